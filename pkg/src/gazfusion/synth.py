"""Synthetic tagged corpora with type-correlated context cues.

Entity names are pseudo-words grouped into per-type dictionaries. A fraction
of each dictionary is held out and only ever appears in the test split, so a
model that memorizes names fails on them while one that reads context cues
or consults a gazetteer does not.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (Corpus, Sentence, Span, TagScheme, encode_spans, normalize_mention,
                     write_column_corpus)
from .gazetteer import Gazetteer, GazetteerSet, write_manifest
from .kvconfig import load_dataclass

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 2000
    types: tuple[str, ...] = ("MED", "COND", "PROC")
    names_per_type: int = 300
    name_zipf: float = 1.0
    name_len_min: int = 1
    name_len_max: int = 3
    name_token_reuse: float = 0.3
    sentences_train: int = 3000
    sentences_dev: int = 500
    sentences_test: int = 1000
    unseen_fraction: float = 0.3
    cue_strength: float = 0.7
    cues_per_type: int = 8
    filler_len_min: int = 4
    filler_len_max: int = 14
    max_entities: int = 2
    empty_sentence_rate: float = 0.1
    gazetteer_coverage: float = 1.0
    gazetteer_noise: int = 0
    dialect: int = 0

    def validate(self) -> None:
        if not self.types:
            raise SynthError("at least one entity type required")
        if not 0.0 <= self.unseen_fraction <= 1.0:
            raise SynthError(f"unseen_fraction {self.unseen_fraction} outside [0, 1]")
        if not 1 <= self.name_len_min <= self.name_len_max:
            raise SynthError("need 1 <= name_len_min <= name_len_max")
        if self.names_per_type < 1 or self.vocab_size < 1:
            raise SynthError("names_per_type and vocab_size must be positive")
        if not 1 <= self.filler_len_min <= self.filler_len_max:
            raise SynthError("need 1 <= filler_len_min <= filler_len_max")
        if self.name_zipf < 0:
            raise SynthError("name_zipf must be >= 0")
        for name in ("cue_strength", "gazetteer_coverage", "name_token_reuse",
                     "empty_sentence_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthError(f"{name} {v} outside [0, 1]")
        if self.max_entities < 1:
            raise SynthError("max_entities must be >= 1")
        if self.max_entities > self.filler_len_min + 1:
            raise SynthError("max_entities needs filler_len_min >= max_entities - 1")


def load_synth_config(path=None, overrides=None) -> SynthConfig:
    cfg = load_dataclass(SynthConfig, path, overrides)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class Mention:
    entity_type: str
    tokens: tuple[str, ...]


@dataclass
class SyntheticData:
    train: Corpus
    dev: Corpus
    test: Corpus
    gazetteers: GazetteerSet
    held_out_mentions: list[Mention]
    dictionary: dict[str, list[tuple[str, ...]]] = field(default_factory=dict)

    @property
    def scheme(self) -> TagScheme:
        return self.train.scheme


class _WordFactory:
    def __init__(self, rng: np.random.Generator, taken: set[str]):
        self.rng = rng
        self.taken = taken

    def word(self, syl_min: int, syl_max: int) -> str:
        for _ in range(1000):
            n = int(self.rng.integers(syl_min, syl_max + 1))
            w = "".join(_CONSONANTS[self.rng.integers(len(_CONSONANTS))]
                        + _VOWELS[self.rng.integers(len(_VOWELS))] for _ in range(n))
            if w not in self.taken:
                self.taken.add(w)
                return w
        raise SynthError("pseudo-word space exhausted; lower vocab_size")


def _subsequences(name: tuple[str, ...]):
    n = len(name)
    for i in range(n):
        for j in range(i + 1, n + 1):
            if j - i < n:
                yield name[i:j]


def _make_dictionary(cfg: SynthConfig, rng: np.random.Generator,
                     words: _WordFactory) -> dict[str, list[tuple[str, ...]]]:
    # no name may occur inside another, so held-out names cannot leak via seen ones
    names: set[tuple[str, ...]] = set()
    inner: set[tuple[str, ...]] = set()
    singles: set[str] = set()
    out: dict[str, list[tuple[str, ...]]] = {}
    for typ in cfg.types:
        pool: list[str] = []
        lst: list[tuple[str, ...]] = []
        for _ in range(cfg.names_per_type):
            for _attempt in range(200):
                n = int(rng.integers(cfg.name_len_min, cfg.name_len_max + 1))
                toks = []
                for _k in range(n):
                    usable = [w for w in pool if w not in singles]
                    if usable and rng.random() < cfg.name_token_reuse:
                        toks.append(usable[int(rng.integers(len(usable)))])
                    else:
                        toks.append(words.word(2, 3))
                name = tuple(toks)
                if name in names or name in inner or len(set(name)) < len(name):
                    continue
                if any(sub in names for sub in _subsequences(name)):
                    continue
                break
            else:
                raise SynthError(f"could not generate {cfg.names_per_type} distinct "
                                 f"names for {typ}; raise name_len_max")
            names.add(name)
            inner.update(_subsequences(name))
            if n == 1:
                singles.add(name[0])
            pool.extend(t for t in name if t not in pool)
            lst.append(name)
        out[typ] = lst
    return out


def _zipf_weights(n: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _sentence(rng: np.random.Generator, cfg: SynthConfig, filler: list[str],
              filler_p: np.ndarray, cues: dict[str, list[str]],
              pick_name, scheme: TagScheme) -> Sentence:
    n_fill = int(rng.integers(cfg.filler_len_min, cfg.filler_len_max + 1))
    fill = [filler[i] for i in rng.choice(len(filler), size=n_fill, p=filler_p)]
    if rng.random() < cfg.empty_sentence_rate:
        return Sentence(tuple(fill), (0,) * n_fill)
    n_ent = int(rng.integers(1, cfg.max_entities + 1))
    gaps = sorted(int(g) for g in rng.choice(n_fill + 1, size=n_ent, replace=False))
    inserts = {}
    for g in gaps:
        typ, name = pick_name()
        piece: list[tuple[str, bool]] = [(t, True) for t in name]
        if rng.random() < cfg.cue_strength:
            cue = cues[typ][int(rng.integers(len(cues[typ])))]
            if rng.random() < 0.7:
                piece = [(cue, False)] + piece
            else:
                piece = piece + [(cue, False)]
        inserts[g] = (typ, piece)
    tokens: list[str] = []
    spans = []
    for i in range(n_fill + 1):
        if i in inserts:
            typ, piece = inserts[i]
            start = None
            for tok, is_name in piece:
                if is_name and start is None:
                    start = len(tokens)
                tokens.append(tok)
            end = start + sum(1 for _, is_name in piece if is_name) - 1
            spans.append(Span(0, start, end, typ))
        if i < n_fill:
            tokens.append(fill[i])
    return Sentence(tuple(tokens), tuple(encode_spans(len(tokens), spans, scheme)))


def generate_synthetic_corpus(cfg: SynthConfig, seed: int) -> SyntheticData:
    cfg.validate()
    scheme = TagScheme(tuple(cfg.types))
    taken: set[str] = set()
    # dictionaries depend only on the seed; context vocabulary also on the dialect
    name_rng = np.random.default_rng([seed, 0])
    ctx_rng = np.random.default_rng([seed, 1, cfg.dialect])
    words = _WordFactory(name_rng, taken)
    dictionary = _make_dictionary(cfg, name_rng, words)

    ctx_words = _WordFactory(ctx_rng, taken)
    filler = [ctx_words.word(1, 3) for _ in range(cfg.vocab_size)]
    cues = {t: [ctx_words.word(2, 3) for _ in range(cfg.cues_per_type)] for t in cfg.types}
    filler_p = _zipf_weights(len(filler))

    split_rng = np.random.default_rng([seed, 2])
    seen: dict[str, list[tuple[str, ...]]] = {}
    unseen: dict[str, list[tuple[str, ...]]] = {}
    for typ in cfg.types:
        names = dictionary[typ]
        n_unseen = int(round(cfg.unseen_fraction * len(names)))
        if n_unseen > len(names):
            raise SynthError("more unseen mentions requested than dictionary size")
        order = split_rng.permutation(len(names))
        unseen[typ] = [names[i] for i in sorted(order[:n_unseen])]
        seen[typ] = [names[i] for i in sorted(order[n_unseen:])]
    if any(not seen[t] for t in cfg.types) and (cfg.sentences_train or cfg.sentences_dev):
        raise SynthError("every type needs at least one seen name (lower unseen_fraction)")

    held_out = [Mention(t, n) for t in cfg.types for n in unseen[t]]
    if len(held_out) > cfg.sentences_test * cfg.max_entities:
        raise SynthError("test split too small to place every unseen mention")

    sent_rng = np.random.default_rng([seed, 3, cfg.dialect])
    types = list(cfg.types)

    # long-tailed mention frequencies; rank order is a random permutation of the names
    rank_rng = np.random.default_rng([seed, 5])
    weight = {}
    for typ in types:
        names = dictionary[typ]
        ranks = rank_rng.permutation(len(names))
        weight.update({n: 1.0 / (r + 1) ** cfg.name_zipf for n, r in zip(names, ranks)})

    def picker(pools):
        probs = {}
        for typ, pool in pools.items():
            w = np.array([weight[n] for n in pool])
            probs[typ] = w / w.sum()

        def pick():
            typ = types[int(sent_rng.integers(len(types)))]
            pool = pools[typ]
            return typ, pool[int(sent_rng.choice(len(pool), p=probs[typ]))]
        return pick

    def make(n, pick):
        return [_sentence(sent_rng, cfg, filler, filler_p, cues, pick, scheme)
                for _ in range(n)]

    train = make(cfg.sentences_train, picker(seen))
    dev = make(cfg.sentences_dev, picker(seen))
    every = {t: seen[t] + unseen[t] for t in types}
    # held-out names first so each occurs in test at least once
    queue = list(held_out)
    base_pick = picker(every)

    def test_pick():
        if queue:
            m = queue.pop(0)
            return m.entity_type, m.tokens
        return base_pick()

    test = []
    while len(test) < cfg.sentences_test:
        test.append(_sentence(sent_rng, cfg, filler, filler_p, cues, test_pick, scheme))
    if queue:
        raise SynthError("test split too small to place every unseen mention")
    test_order = sent_rng.permutation(len(test))
    test = [test[i] for i in test_order]

    gaz_rng = np.random.default_rng([seed, 4])
    gazetteers = []
    for typ in types:
        names = dictionary[typ]
        keep = gaz_rng.random(len(names)) < cfg.gazetteer_coverage
        entries = [n for n, k in zip(names, keep) if k]
        if cfg.gazetteer_noise:
            idx = gaz_rng.choice(len(filler), size=min(cfg.gazetteer_noise, len(filler)),
                                 replace=False)
            entries += [(filler[i],) for i in sorted(idx)]
        gazetteers.append(Gazetteer(typ, entries))

    return SyntheticData(
        train=Corpus(tuple(train), scheme, "train"),
        dev=Corpus(tuple(dev), scheme, "dev"),
        test=Corpus(tuple(test), scheme, "test"),
        gazetteers=GazetteerSet(gazetteers),
        held_out_mentions=held_out,
        dictionary=dictionary,
    )


def contains_mention(tokens, mention: tuple[str, ...]) -> bool:
    """Token-boundary occurrence test on normalized tokens."""
    norm = normalize_mention(tokens)
    n = len(mention)
    return any(norm[i:i + n] == mention for i in range(len(norm) - n + 1))


def write_synthetic(data: SyntheticData, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in ("train", "dev", "test"):
        p = directory / f"{split}.tsv"
        write_column_corpus(getattr(data, split), p)
        paths[split] = p
    paths["gazetteers"] = write_manifest(data.gazetteers, directory / "gazetteers")
    held = directory / "held_out_mentions.tsv"
    held.write_text("".join(f"{m.entity_type}\t{' '.join(m.tokens)}\n"
                            for m in data.held_out_mentions), encoding="utf-8")
    paths["held_out"] = held
    return paths
