"""Command-line entry point.

Every subcommand writes into a run directory (``--out``, else
``$GAZFUSION_OUT/<command>``, else ``runs/<command>``) that records the
effective config, seed, format versions and input digests. Failures exit
nonzero and print one line ``gazfusion-error category=<name> exit=<code>: <message>``.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from .checkpoint import CheckpointError
from .corpus import (Corpus, CorpusError, Sentence, load_column_corpus, read_raw_sentences,
                     scheme_of_column_file, tokenize, write_column_corpus)
from .evaluation import evaluate, evaluate_pool, evaluate_unseen, seen_mentions
from .gazetteer import (CODES, GazetteerError, add_entries, load_manifest, manifest_files,
                        remove_entries, write_gazetteer_file)
from .harness import HarnessError, explain, load_spec, render_trace, run_experiment
from .kvconfig import ConfigError, dump_kv, parse_overrides
from .model import ModelError, predict_corpus, unplug_gazetteer
from .synth import SynthError, load_synth_config, generate_synthetic_corpus, write_synthetic
from .training import TrainConfig, TrainingError, load_train_config, train

log = logging.getLogger("gazfusion")

RUN_FORMAT_VERSION = 1
OUT_ENV = "GAZFUSION_OUT"

# exit status per failure category
EXIT = {
    "usage": 2,
    "missing_file": 3,
    "schema_mismatch": 4,
    "config": 5,
    "locked": 6,
    "numeric": 7,
    "internal": 70,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def categorize(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, NotADirectoryError)):
        return "missing_file"
    if isinstance(exc, (CorpusError, GazetteerError, CheckpointError, ModelError)):
        return "schema_mismatch"
    if isinstance(exc, (ConfigError, HarnessError, SynthError, TrainingError)):
        return "config"
    if isinstance(exc, FloatingPointError):
        return "numeric"
    return "internal"


def report_error(category: str, message: str) -> int:
    code = EXIT[category]
    one_line = " ".join(str(message).split())
    print(f"gazfusion-error category={category} exit={code}: {one_line}", file=sys.stderr)
    return code


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


# --- run directory --------------------------------------------------------------


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Locked output directory with a reproducibility record."""

    def __init__(self, args, command: str):
        root = os.environ.get(OUT_ENV) or "runs"
        self.path = Path(args.out) if args.out else Path(root) / command
        self.command = command
        self.inputs: dict[str, str] = {}
        self._lock = self.path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError("locked", f"run directory {self.path} is in use "
                                     f"(remove {self._lock} if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self._lock.unlink(missing_ok=True)

    def add_input(self, path: str | Path | None) -> None:
        if path:
            self.inputs[str(path)] = file_digest(path)

    def record(self, config_text: str, seed: int | None, extra: dict | None = None) -> None:
        (self.path / "run.cfg").write_text(config_text, encoding="utf-8")
        meta = {
            "command": self.command,
            "seed": seed,
            "format_versions": {"run": RUN_FORMAT_VERSION,
                                "checkpoint": checkpoint.FORMAT_VERSION},
            "inputs": dict(sorted(self.inputs.items())),
        }
        meta.update(extra or {})
        (self.path / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")


# --- input helpers -------------------------------------------------------------------


def read_sentences(path: str | Path, fmt: str = "auto") -> list[Sentence]:
    """Tokens from a column file (first field) or raw text (one sentence per line)."""
    with open(path, encoding="utf-8") as fh:
        lines = [l.rstrip("\r\n") for l in fh]
    if fmt == "auto":
        body = [l for l in lines if l.strip()]
        fmt = "column" if body and all("\t" in l for l in body) else "raw"
    if fmt == "raw":
        return read_raw_sentences(path)
    out, toks = [], []
    for line in lines + [""]:
        if not line.strip():
            if toks:
                out.append(Sentence(tuple(toks)))
                toks = []
            continue
        toks.append(line.split("\t", 1)[0])
    return out


def _train_config(args) -> TrainConfig:
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.mode:
        overrides["mode"] = args.mode
    if args.attention:
        overrides["attention"] = args.attention
    return load_train_config(args.config, overrides)


# --- commands --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    overrides = parse_overrides(args.set or [])
    cfg = load_synth_config(args.config, overrides)
    seed = args.seed if args.seed is not None else 0
    with RunDir(args, "synth") as run:
        run.add_input(args.config)
        data = generate_synthetic_corpus(cfg, seed)
        paths = write_synthetic(data, run.path)
        run.record(dump_kv(cfg), seed, {"outputs": {k: str(v.relative_to(run.path))
                                                   for k, v in paths.items()}})
    log.info("wrote synthetic data to %s", run.path)
    print(run.path)
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    scheme = scheme_of_column_file(args.train)
    train_c = load_column_corpus(args.train, scheme)
    dev = load_column_corpus(args.dev, scheme) if args.dev else None
    gaz = load_manifest(args.gazetteers) if args.gazetteers else None
    if cfg.mode != "ner_only" and gaz is None:
        raise CliError("usage", f"--gazetteers is required for {cfg.mode} fusion")
    with RunDir(args, "train") as run:
        for p in (args.config, args.train, args.dev, args.gazetteers):
            run.add_input(p)
        if gaz is not None:
            for _, f in manifest_files(args.gazetteers):
                run.add_input(f)
        model, record = train(cfg, train_c, dev, gaz if cfg.mode != "ner_only" else None)
        ckpt = checkpoint.save(model, run.path / "model.ckpt")
        (run.path / "train_log.jsonl").write_text(record.lines(), encoding="utf-8")
        run.record(dump_kv(cfg), cfg.seed, {"best_epoch": record.best_epoch,
                                            "best_dev_f1": record.best_dev_f1,
                                            "checkpoint": ckpt.name,
                                            "checkpoint_sha256": checkpoint.digest(model)})
    print(ckpt)
    return 0


def _load_model(args):
    model = checkpoint.load(args.model)
    if getattr(args, "unplug", False):
        model = unplug_gazetteer(model)
    gaz = None
    if model.uses_gazetteers:
        if not args.gazetteers:
            raise CliError("usage", f"--gazetteers is required for a {model.config.mode} model")
        gaz = load_manifest(args.gazetteers)
    return model, gaz


def cmd_predict(args) -> int:
    model, gaz = _load_model(args)
    sentences = read_sentences(args.input, args.format)
    corpus = Corpus(tuple(sentences), model.scheme, "input")
    with RunDir(args, "predict") as run:
        for p in (args.model, args.input):
            run.add_input(p)
        if gaz is not None:
            for _, f in manifest_files(args.gazetteers):
                run.add_input(f)
        pred, _ = predict_corpus(model, corpus, gaz)
        out = run.path / "predictions.tsv"
        write_column_corpus(pred, out)
        run.record(f"unplug={'true' if args.unplug else 'false'}\nformat={args.format}\n", None,
                   {"checkpoint_sha256": checkpoint.digest(model),
                    "gazetteer_version": None if gaz is None else gaz.version})
    print(out)
    return 0


def cmd_eval(args) -> int:
    scheme = scheme_of_column_file(args.gold)
    gold = load_column_corpus(args.gold, scheme)
    pred = load_column_corpus(args.pred, scheme)
    if args.seen:
        seen = seen_mentions(*(load_column_corpus(p, scheme) for p in args.seen))
        report = evaluate_unseen(pred, gold, seen)
    elif args.pool:
        with open(args.pool, encoding="utf-8") as fh:
            pool = [tuple(l.rstrip("\n").split("\t")[-1].split()) for l in fh if l.strip()]
        report = evaluate_pool(pred, gold, pool)
    else:
        report = evaluate(pred, gold)
    with RunDir(args, "eval") as run:
        for p in [args.pred, args.gold, args.pool] + list(args.seen or []):
            run.add_input(p)
        (run.path / "eval.json").write_text(json.dumps(report.record(), sort_keys=True) + "\n",
                                            encoding="utf-8")
        run.record("", None)
    print(report.table())
    return 0


def cmd_match(args) -> int:
    gaz = load_manifest(args.gazetteers)
    sentences = read_sentences(args.input, args.format)
    with RunDir(args, "match") as run:
        run.add_input(args.input)
        for _, f in manifest_files(args.gazetteers):
            run.add_input(f)
        out = run.path / "matches.tsv"
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# token\t" + "\t".join(gaz.names) + "\n")
            for i, s in enumerate(sentences):
                if i:
                    fh.write("\n")
                codes = gaz.annotate(s.tokens).codes
                for t, tok in enumerate(s.tokens):
                    fh.write(tok + "\t" + "\t".join(CODES[c] for c in codes[:, t]) + "\n")
        run.record(f"format={args.format}\n", None)
    print(out)
    return 0


def cmd_gazette(args) -> int:
    gaz = load_manifest(args.gazetteers)
    files = dict(manifest_files(args.gazetteers))
    if args.action == "list":
        if args.name:
            for entry in gaz[args.name].entries:
                print(" ".join(entry))
        else:
            for g in gaz:
                print(f"{g.name}\t{len(g)}\t{files[g.name]}")
        return 0
    if not args.name:
        raise CliError("usage", f"gazette {args.action} needs --name")
    entries = [tuple(tokenize(e)) for e in args.entry or []]
    if args.entries_file:
        with open(args.entries_file, encoding="utf-8") as fh:
            entries += [tuple(l.split()) for l in fh if l.strip() and not l.startswith("#")]
    if not entries:
        raise CliError("usage", "no entries given (--entry or --entries-file)")
    before = len(gaz[args.name])
    (add_entries if args.action == "add" else remove_entries)(gaz, args.name, entries)
    write_gazetteer_file(gaz[args.name], files[args.name])
    print(f"{args.name}\t{before}\t{len(gaz[args.name])}")
    return 0


def cmd_experiment(args) -> int:
    overrides = parse_overrides(args.set or [])
    overrides["kind"] = args.kind
    if args.seed is not None:
        overrides["seeds"] = str(args.seed)
    if args.mode:
        overrides["train.mode"] = args.mode
    if args.attention:
        overrides["train.attention"] = args.attention
    spec = load_spec(args.config, overrides)
    with RunDir(args, f"experiment-{args.kind}") as run:
        run.add_input(args.config)
        for p in (spec.train_path, spec.dev_path, spec.test_path, spec.gazetteers,
                  spec.held_out_path):
            run.add_input(p)
        spec = dataclasses.replace(spec, out=str(run.path))
        run.record(spec.dump(), None, {"seeds": list(spec.seeds), "kind": spec.kind})
        result = run_experiment(spec, run.path)
    text = result if isinstance(result, str) else result.table
    print(text)
    return 0


def cmd_explain(args) -> int:
    model, gaz = _load_model(args)
    if model.config.mode != "late":
        raise CliError("schema_mismatch",
                       f"{model.config.mode} model has no separable branches to explain")
    if args.text:
        sentences = [Sentence(tuple(tokenize(args.text)))]
    elif args.input:
        sentences = read_sentences(args.input, args.format)
    else:
        raise CliError("usage", "explain needs --text or --input")
    blocks = []
    records = []
    for s in sentences:
        trace = explain(model, s.tokens, gaz, args.top_k)
        blocks.append(render_trace(trace))
        records.append([dataclasses.asdict(t) for t in trace])
    text = "\n\n".join(blocks)
    with RunDir(args, "explain") as run:
        for p in (args.model, args.input):
            run.add_input(p)
        (run.path / "explain.txt").write_text(text + "\n", encoding="utf-8")
        (run.path / "explain.json").write_text(json.dumps(records, sort_keys=True) + "\n",
                                               encoding="utf-8")
        run.record(f"top_k={args.top_k}\n", None)
    print(text)
    return 0


# --- parser -------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, config=True, seed=True) -> None:
    if config:
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key; repeatable, last wins")
    if seed:
        p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory")
    p.add_argument("--quiet", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("ner_only", "early", "late"))
    p.add_argument("--attention", choices=("on", "off"))


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="gazfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="write a synthetic benchmark")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a tagger")
    _common(p)
    _model_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--gazetteers", help="gazetteer manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="tag sentences with a checkpoint")
    _common(p, config=False, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--gazetteers")
    p.add_argument("--format", choices=("auto", "column", "raw"), default="auto")
    p.add_argument("--unplug", action="store_true", help="use only the NER branch")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="span micro-F1 of predictions against gold")
    _common(p, config=False, seed=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--seen", action="append", help="score only mentions unseen in these files")
    g.add_argument("--pool", help="score only mentions listed in this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="gazetteer annotation of sentences")
    _common(p, config=False, seed=False)
    p.add_argument("--gazetteers", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("auto", "column", "raw"), default="auto")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("gazette", help="edit or list gazetteers in place")
    _common(p, config=False, seed=False)
    p.add_argument("action", choices=("add", "remove", "list"))
    p.add_argument("--gazetteers", required=True)
    p.add_argument("--name")
    p.add_argument("--entry", action="append")
    p.add_argument("--entries-file")
    p.set_defaults(func=cmd_gazette)

    p = sub.add_parser("experiment", help="run an experiment protocol")
    _common(p)
    _model_flags(p)
    p.add_argument("kind", choices=("compare", "zero_shot", "one_shot", "ablation",
                                     "low_resource", "transfer", "explain"))
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("explain", help="per-token branch attribution of a late-fusion model")
    _common(p, config=False, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--gazetteers")
    p.add_argument("--text")
    p.add_argument("--input")
    p.add_argument("--format", choices=("auto", "column", "raw"), default="auto")
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as e:
        return report_error(e.category, str(e))
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001
        category = categorize(e)
        if category == "internal":
            log.debug("internal error", exc_info=True)
        return report_error(category, f"{type(e).__name__}: {e}")
