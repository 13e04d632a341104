"""Gazetteer matcher throughput on a random dictionary and token stream."""
import argparse
import time

import numpy as np

from gazfusion.gazetteer import Gazetteer


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--entries", type=int, default=100_000)
    parser.add_argument("--vocab", type=int, default=50_000)
    parser.add_argument("--tokens", type=int, default=500_000)
    parser.add_argument("--sentence-len", type=int, default=25)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    words = [f"w{i}" for i in range(args.vocab)]
    entries = set()
    while len(entries) < args.entries:
        n = int(rng.integers(1, 4))
        entries.add(tuple(words[j] for j in rng.integers(0, len(words), n)))
    t0 = time.perf_counter()
    g = Gazetteer("g", entries)
    build = time.perf_counter() - t0
    tokens = [words[j] for j in rng.integers(0, len(words), args.tokens)]
    step = args.sentence_len
    sentences = [tokens[i:i + step] for i in range(0, len(tokens), step)]
    rates = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        for s in sentences:
            g.match(s)
        rates.append(len(tokens) / (time.perf_counter() - t0))
    print(f"entries={len(g)} build={build:.2f}s best={max(rates) / 1e6:.2f}M tokens/s "
          f"median={float(np.median(rates)) / 1e6:.2f}M tokens/s")


if __name__ == "__main__":
    main()
