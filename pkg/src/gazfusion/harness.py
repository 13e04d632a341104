"""Experiment protocols: fusion comparison, zero-shot, one-shot ablation,
gazetteer hot-swap curve, low-resource curve, cross-dialect transfer, and
per-token explanations.

Every experiment is a pure function of its spec and seed list. Outputs go to
``spec.out``: ``results.jsonl`` (one record per run plus summary records),
an aligned text table, and two-column ``.dat`` curve files.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .corpus import (Corpus, TagScheme, load_column_corpus, mention_of,
                     normalize_mention, restrict_types, scheme_of_column_file, spans_of)
from .evaluation import (EvalReport, evaluate, evaluate_pool, evaluate_unseen,
                         seen_mentions)
from .gazetteer import CODES, GazetteerSet, add_entries, load_manifest
from .kvconfig import ConfigError, render_value, apply_kv, dump_kv, parse_kv_lines, read_kv
from .model import FusionModel, ModelError, predict_corpus, unplug_gazetteer
from .synth import Mention, SynthConfig, generate_synthetic_corpus
from .training import TrainConfig, subsample, train

log = logging.getLogger(__name__)

KINDS = ("compare", "zero_shot", "one_shot", "ablation", "low_resource", "transfer", "explain")

COMPARE_CONFIGS = (
    ("ner_only", "ner_only", False, "NER w/o fusion"),
    ("early", "early", False, "Early fusion"),
    ("early_att", "early", True, "Early fusion + attention"),
    ("late", "late", False, "Late fusion"),
    ("late_att", "late", True, "Late fusion + attention"),
)
R0_FREEZE = ("token_embeddings", "encoder", "tagger_R")


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "compare"
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs/experiment"
    # data: synthesized unless train_path is given
    synth_seed: int = 1
    train_path: str = ""
    dev_path: str = ""
    test_path: str = ""
    gazetteers: str = ""
    held_out_path: str = ""
    fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    inclusion_fractions: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    split_ratio: float = 0.7
    filter_dev: bool = False
    zero_shot_fraction: float = 0.2
    # fixed R0G budget: the frozen NER branch already fits the labelled data, so G
    # only receives signal where word dropout hides a name from it
    r0g_epochs: int | None = 30
    r0g_word_dropout: float | None = 0.5
    target_dialect: int = 1
    shared_types: tuple[str, ...] = ()
    explain_sentences: int = 5
    top_k: int = 3
    resume: bool = True
    # nested overrides, written as ``train.<key>=`` / ``synth.<key>=`` lines
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise HarnessError(f"unknown experiment kind {self.kind!r}; one of {KINDS}")
        if len(self.seeds) < 1:
            raise HarnessError("at least one seed required")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise HarnessError(f"fraction {f} outside (0, 1]")
        for f in self.inclusion_fractions:
            if not 0.0 <= f <= 1.0:
                raise HarnessError(f"inclusion fraction {f} outside [0, 1]")
        if not 0.0 < self.split_ratio < 1.0:
            raise HarnessError("split_ratio must be in (0, 1)")
        if self.r0g_epochs is not None and self.r0g_epochs < 1:
            raise HarnessError("r0g_epochs must be >= 1")
        if self.r0g_word_dropout is not None and not 0.0 <= self.r0g_word_dropout < 1.0:
            raise HarnessError("r0g_word_dropout must be in [0, 1)")

    def dump(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name in ("train", "synth"):
                continue
            lines.append(f"{f.name}={render_value(getattr(self, f.name))}")
        lines += [f"train.{l}" for l in dump_kv(self.train).splitlines()]
        lines += [f"synth.{l}" for l in dump_kv(self.synth).splitlines()]
        return "\n".join(lines) + "\n"


def default_experiment_train() -> TrainConfig:
    """Training settings for the bundled synthetic benchmark.

    The encoder trains from scratch here, so it needs a larger step size
    than the fine-tuning default of ``TrainConfig``. Word dropout keeps the
    NER branch reading context cues instead of only memorizing names.
    """
    return TrainConfig(learning_rate=2e-3, h=32, batch_size=16, max_epochs=40, patience=5,
                       word_dropout=0.1)


def bundled_synth_config() -> SynthConfig:
    text = resources.files("gazfusion").joinpath("data/synthetic.cfg").read_text("utf-8")
    return apply_kv(SynthConfig(), parse_kv_lines(text.splitlines(), "synthetic.cfg"))


def make_spec(mapping: dict[str, str] | None = None, **kw) -> ExperimentSpec:
    """Spec from flat keys; ``train.*`` and ``synth.*`` keys go to the nested configs."""
    mapping = dict(mapping or {})
    top, tr, sy = {}, {}, {}
    for k, v in mapping.items():
        if k.startswith("train."):
            tr[k[6:]] = v
        elif k.startswith("synth."):
            sy[k[6:]] = v
        else:
            top[k] = v
    base = ExperimentSpec(train=default_experiment_train(), synth=bundled_synth_config())
    try:
        # explicit keyword arguments win over mapping entries
        spec = dataclasses.replace(apply_kv(base, top), **{k: v for k, v in kw.items()
                                                           if k not in ("train", "synth")})
        spec = dataclasses.replace(spec, train=apply_kv(kw.get("train", spec.train), tr),
                                   synth=apply_kv(kw.get("synth", spec.synth), sy))
    except ConfigError as e:
        raise HarnessError(str(e)) from None
    return spec


def load_spec(path=None, overrides: dict[str, str] | None = None) -> ExperimentSpec:
    mapping = read_kv(path) if path else {}
    mapping.update(overrides or {})
    return make_spec(mapping)


# --- data ------------------------------------------------------------------


@dataclass
class Dataset:
    train: Corpus
    dev: Corpus
    test: Corpus
    gazetteers: GazetteerSet
    held_out: list[Mention] = field(default_factory=list)

    @property
    def scheme(self) -> TagScheme:
        return self.train.scheme


def load_dataset(spec: ExperimentSpec, dialect: int | None = None) -> Dataset:
    if spec.train_path:
        scheme = scheme_of_column_file(spec.train_path)
        train_c = load_column_corpus(spec.train_path, scheme)
        dev = load_column_corpus(spec.dev_path, scheme) if spec.dev_path else \
            Corpus((), scheme, "dev")
        test = load_column_corpus(spec.test_path, scheme)
        if not spec.gazetteers:
            raise HarnessError("a gazetteer manifest is required with user data")
        gaz = load_manifest(spec.gazetteers)
        held = []
        if spec.held_out_path:
            with open(spec.held_out_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        typ, text = line.rstrip("\n").split("\t", 1)
                        held.append(Mention(typ, tuple(text.split())))
        return Dataset(train_c, dev, test, gaz, held)
    cfg = spec.synth if dialect is None else dataclasses.replace(spec.synth, dialect=dialect)
    data = generate_synthetic_corpus(cfg, spec.synth_seed)
    return Dataset(data.train, data.dev, data.test, data.gazetteers, data.held_out_mentions)


def gazetteer_for_type(gazetteers: GazetteerSet, entity_type: str) -> str:
    for name in gazetteers.names:
        if name.casefold() == entity_type.casefold():
            return name
    raise HarnessError(f"no gazetteer named after entity type {entity_type!r}")


def without_mentions(gazetteers: GazetteerSet, mentions: Sequence[Mention]) -> GazetteerSet:
    out = gazetteers.copy()
    for m in mentions:
        out[gazetteer_for_type(out, m.entity_type)].remove([m.tokens])
    return out


# --- mention split -----------------------------------------------------------


@dataclass
class MentionSplit:
    labelled_mentions: list[tuple[str, ...]]
    gazetteer_only_mentions: list[tuple[str, ...]]
    train: Corpus
    dev: Corpus
    gazetteers: GazetteerSet


def _ngram_hit(tokens, pool: set, max_len: int) -> bool:
    norm = normalize_mention(tokens)
    n = len(norm)
    for i in range(n):
        for L in range(1, min(max_len, n - i) + 1):
            if norm[i:i + L] in pool:
                return True
    return False


def make_mention_split(train_corpus: Corpus, ratio: float, seed: int,
                       gazetteers: GazetteerSet, dev: Corpus | None = None,
                       filter_dev: bool = False) -> MentionSplit:
    """Partition the unique training mentions into labelled and gazetteer-only.

    Sentences mentioning a gazetteer-only form are dropped from the training
    corpus (and from dev when ``filter_dev``); those forms are added to the
    gazetteer of their type.
    """
    if not 0.0 < ratio < 1.0:
        raise HarnessError("split ratio must be in (0, 1)")
    types_of: dict[tuple[str, ...], set[str]] = {}
    for i, s in enumerate(train_corpus):
        for sp in spans_of(s, train_corpus.scheme, i):
            types_of.setdefault(mention_of(s, sp), set()).add(sp.entity_type)
    forms = sorted(types_of)
    order = np.random.default_rng([seed, 11]).permutation(len(forms))
    n_lab = int(round(ratio * len(forms)))
    labelled = [forms[i] for i in sorted(order[:n_lab])]
    gaz_only = [forms[i] for i in sorted(order[n_lab:])]
    if not labelled or not gaz_only:
        raise HarnessError(f"degenerate mention split: {len(labelled)} labelled, "
                           f"{len(gaz_only)} gazetteer-only")
    pool = set(gaz_only)
    max_len = max(len(m) for m in pool)
    keep = [i for i, s in enumerate(train_corpus) if not _ngram_hit(s.tokens, pool, max_len)]
    reduced = train_corpus.subset(keep)
    if dev is not None and filter_dev:
        dev = dev.subset([i for i, s in enumerate(dev) if not _ngram_hit(s.tokens, pool, max_len)])
    elif dev is None:
        dev = Corpus((), train_corpus.scheme, "dev")
    gaz = gazetteers.copy()
    for form in gaz_only:
        for typ in sorted(types_of[form]):
            add_entries(gaz, gazetteer_for_type(gaz, typ), [form])
    return MentionSplit(labelled, gaz_only, reduced, dev, gaz)


# --- runner --------------------------------------------------------------------


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def _r(x: float) -> float:
    return round(float(x), 10)


def run_key(cfg: TrainConfig, train_c: Corpus, dev: Corpus | None,
            gazetteers: GazetteerSet | None, freeze=(), init_model=None) -> str:
    """Fingerprint of everything a training run depends on."""
    h = hashlib.sha256(dump_kv(cfg).encode())
    h.update(repr(sorted(freeze)).encode())
    for corpus in (train_c, dev):
        if corpus is not None:
            h.update(repr([(s.tokens, s.tags) for s in corpus]).encode())
    if gazetteers is not None and cfg.mode != "ner_only":
        for g in gazetteers:
            h.update(repr((g.name, sorted(g.normalized_entries()))).encode())
    if init_model is not None:
        h.update(checkpoint.digest(init_model).encode())
    return h.hexdigest()


class Runner:
    """Trains (or resumes) runs keyed by id and writes experiment outputs."""

    def __init__(self, spec: ExperimentSpec, out: str | Path | None = None):
        self.spec = spec
        self.out = Path(out or spec.out)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(exist_ok=True)
        (self.out / "logs").mkdir(exist_ok=True)
        self.records: list[dict] = []

    def config_for(self, mode: str, attention: bool, seed: int) -> TrainConfig:
        return dataclasses.replace(self.spec.train, mode=mode, attention=attention, seed=seed)

    def r0g_config(self, seed: int) -> TrainConfig:
        cfg = self.config_for("late", True, seed)
        if self.spec.r0g_epochs is not None:
            cfg = dataclasses.replace(cfg, max_epochs=self.spec.r0g_epochs, early_stopping=False)
        if self.spec.r0g_word_dropout is not None:
            cfg = dataclasses.replace(cfg, word_dropout=self.spec.r0g_word_dropout)
        return cfg

    def train(self, run_id: str, cfg: TrainConfig, train_c: Corpus, dev: Corpus,
              gazetteers: GazetteerSet | None, freeze=(), init_model=None) -> FusionModel:
        path = self.out / "checkpoints" / f"{run_id}.ckpt"
        key_path = self.out / "logs" / f"{run_id}.key"
        key = run_key(cfg, train_c, dev, gazetteers, freeze, init_model)
        if (self.spec.resume and path.exists() and key_path.exists()
                and key_path.read_text(encoding="utf-8") == key):
            log.info("resuming %s from %s", run_id, path)
            return checkpoint.load(path)
        log.info("training %s", run_id)
        model, record = train(cfg, train_c, dev, gazetteers if cfg.mode != "ner_only" else None,
                              freeze=freeze, init_model=init_model)
        checkpoint.save(model, path)
        record.checkpoint_path = str(path.relative_to(self.out))
        (self.out / "logs" / f"{run_id}.jsonl").write_text(record.lines(), encoding="utf-8")
        key_path.write_text(key, encoding="utf-8")
        return model

    def add(self, **rec) -> dict:
        self.records.append(rec)
        return rec

    def write(self, table: str, curves: dict[str, Sequence[tuple[float, float]]] | None = None):
        with open(self.out / "results.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (self.out / f"{self.spec.kind}_table.txt").write_text(table + "\n", encoding="utf-8")
        (self.out / "spec.cfg").write_text(self.spec.dump(), encoding="utf-8")
        for name, points in (curves or {}).items():
            (self.out / f"{name}.dat").write_text(
                "".join(f"{x:.6g} {y:.10f}\n" for x, y in points), encoding="utf-8")


def run_id(key: str, fraction: float, seed: int) -> str:
    """Checkpoint name for a config trained on a subsample; equal ids share a run."""
    return f"{key}_f{fraction:g}_s{seed}"


def _predict(model: FusionModel, corpus: Corpus, gazetteers) -> Corpus:
    return predict_corpus(model, corpus, gazetteers if model.uses_gazetteers else None)[0]


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    all_rows = [list(header)] + [list(r) for r in rows]
    widths = [max(len(r[i]) for r in all_rows) for i in range(len(header))]
    lines = []
    for k, r in enumerate(all_rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines)


# --- experiments ---------------------------------------------------------------


@dataclass
class CompareResult:
    means: dict[str, float]
    per_seed: dict[str, list[float]]
    table: str


def run_compare(spec: ExperimentSpec, data: Dataset | None = None,
                runner: Runner | None = None) -> CompareResult:
    data = data or load_dataset(spec)
    runner = runner or Runner(spec)
    per_seed: dict[str, list[float]] = {}
    for key, mode, att, label in COMPARE_CONFIGS:
        for seed in spec.seeds:
            model = runner.train(run_id(key, 1.0, seed), runner.config_for(mode, att, seed),
                                 data.train, data.dev, data.gazetteers)
            rep = evaluate(_predict(model, data.test, data.gazetteers), data.test)
            per_seed.setdefault(key, []).append(rep.micro_f1)
            runner.add(experiment="compare", config=key, seed=seed, **rep.record())
    means = {k: _mean(v) for k, v in per_seed.items()}
    rows = []
    for key, _, _, label in COMPARE_CONFIGS:
        runner.add(experiment="compare", config=key, summary=True, mean_micro_f1=_r(means[key]),
                   per_seed=[_r(x) for x in per_seed[key]])
        rows.append([label, f"{100 * means[key]:.2f}"] +
                    [f"{100 * x:.2f}" for x in per_seed[key]])
    table = render_table(["config", "mean F1"] + [f"seed {s}" for s in spec.seeds], rows)
    runner.write(table)
    return CompareResult(means, per_seed, table)


@dataclass
class ZeroShotResult:
    baseline: list[float]
    fusion: list[float]
    per_type: dict[str, dict[str, float]]
    table: str

    @property
    def delta(self) -> float:
        return _mean(self.fusion) - _mean(self.baseline)


def run_zero_shot(spec: ExperimentSpec, data: Dataset | None = None,
                  runner: Runner | None = None) -> ZeroShotResult:
    data = data or load_dataset(spec)
    runner = runner or Runner(spec)
    scores: dict[str, list[EvalReport]] = {"ner_only": [], "late_att": []}
    for seed in spec.seeds:
        sub = subsample(data.train, spec.zero_shot_fraction, seed)
        seen = seen_mentions(sub, data.dev)
        for key, mode, att in (("ner_only", "ner_only", False), ("late_att", "late", True)):
            model = runner.train(run_id(key, spec.zero_shot_fraction, seed),
                                 runner.config_for(mode, att, seed),
                                 sub, data.dev, data.gazetteers)
            rep = evaluate_unseen(_predict(model, data.test, data.gazetteers), data.test, seen)
            scores[key].append(rep)
            runner.add(experiment="zero_shot", config=key, seed=seed,
                       fraction=spec.zero_shot_fraction, **rep.record())
    types = data.scheme.entity_types
    per_type = {key: {t: _mean([r.per_type[t].f1 for r in reps]) for t in types}
                for key, reps in scores.items()}
    base = [r.micro_f1 for r in scores["ner_only"]]
    fus = [r.micro_f1 for r in scores["late_att"]]
    rows = []
    for key, label, vals in (("ner_only", "NER w/o fusion", base),
                             ("late_att", "Late fusion w/ attention", fus)):
        rows.append([label, f"{100 * _mean(vals):.2f}"] +
                    [f"{100 * per_type[key][t]:.2f}" for t in types])
        runner.add(experiment="zero_shot", config=key, summary=True,
                   mean_micro_f1=_r(_mean(vals)), per_seed=[_r(x) for x in vals])
    delta = _mean(fus) - _mean(base)
    rows.append(["delta", f"{100 * delta:+.2f}"] +
                [f"{100 * (per_type['late_att'][t] - per_type['ner_only'][t]):+.2f}"
                 for t in types])
    table = render_table(["unseen mentions", "micro"] + list(types), rows)
    runner.write(table)
    return ZeroShotResult(base, fus, per_type, table)


ABLATION_COLUMNS = ("R0", "RG", "R", "R0G")


@dataclass
class AblationResult:
    per_seed: dict[str, list[float]]
    curve: list[tuple[float, float]] | None
    curve_per_seed: dict[float, list[float]] | None
    digests_unchanged: bool
    shared_ner_branch: bool
    table: str

    @property
    def means(self) -> dict[str, float]:
        return {k: _mean(v) for k, v in self.per_seed.items()}


def _base_one_shot_gazetteers(data: Dataset) -> GazetteerSet:
    # held-out names are what the hot-swap curve adds back
    return without_mentions(data.gazetteers, data.held_out)


def run_ablation(spec: ExperimentSpec, data: Dataset | None = None,
                 runner: Runner | None = None, with_curve: bool = False) -> AblationResult:
    """R0 / RG / R / R0G on gazetteer-only test mentions; optionally the hot-swap curve."""
    data = data or load_dataset(spec)
    runner = runner or Runner(spec)
    base_gaz = _base_one_shot_gazetteers(data)
    per_seed: dict[str, list[float]] = {k: [] for k in ABLATION_COLUMNS}
    curve_per_seed: dict[float, list[float]] = {f: [] for f in spec.inclusion_fractions}
    digests_ok = True
    shared = True
    for seed in spec.seeds:
        split = make_mention_split(data.train, spec.split_ratio, seed, base_gaz, data.dev,
                                   spec.filter_dev)
        gaz = split.gazetteers
        r0 = runner.train(f"abl_R0_s{seed}", runner.config_for("ner_only", False, seed),
                          split.train, split.dev, None)
        rg = runner.train(f"abl_RG_s{seed}", runner.config_for("late", True, seed),
                          split.train, split.dev, gaz)
        r = unplug_gazetteer(rg)
        r0g = runner.train(f"abl_R0G_s{seed}", runner.r0g_config(seed),
                           split.train, split.dev, gaz, freeze=R0_FREEZE, init_model=r0)
        shared &= all(r.params[k] is rg.params[k] for k in r.params)
        for key, model in (("R0", r0), ("RG", rg), ("R", r), ("R0G", r0g)):
            rep = evaluate_pool(_predict(model, data.test, gaz), data.test,
                                split.gazetteer_only_mentions)
            per_seed[key].append(rep.micro_f1)
            runner.add(experiment="ablation", config=key, seed=seed,
                       labelled=len(split.labelled_mentions),
                       gazetteer_only=len(split.gazetteer_only_mentions),
                       train_sentences=len(split.train), **rep.record())
        if with_curve:
            before = checkpoint.digest(rg)
            seen = seen_mentions(split.train, split.dev)
            pts = adaptation_curve(rg, data.test, gaz, data.held_out, seen,
                                   spec.inclusion_fractions, seed)
            digests_ok &= checkpoint.digest(rg) == before
            for f, rep in pts:
                curve_per_seed[f].append(rep.micro_f1)
                runner.add(experiment="adaptation", seed=seed, inclusion_fraction=f,
                           **rep.record())
    means = {k: _mean(v) for k, v in per_seed.items()}
    rows = [[k, f"{100 * means[k]:.2f}"] + [f"{100 * x:.2f}" for x in per_seed[k]]
            for k in ABLATION_COLUMNS]
    for k in ABLATION_COLUMNS:
        runner.add(experiment="ablation", config=k, summary=True, mean_micro_f1=_r(means[k]),
                   per_seed=[_r(x) for x in per_seed[k]])
    table = render_table(["model", "mean F1"] + [f"seed {s}" for s in spec.seeds], rows)
    table = ("  ".join(f"{k}={100 * means[k]:.2f}" for k in ABLATION_COLUMNS)
             + "\n\n" + table)
    curves = {}
    curve = None
    if with_curve:
        curve = [(f, _mean(curve_per_seed[f])) for f in spec.inclusion_fractions]
        curves["adaptation_curve"] = curve
        for f, y in curve:
            runner.add(experiment="adaptation", inclusion_fraction=f, summary=True,
                       mean_micro_f1=_r(y), per_seed=[_r(x) for x in curve_per_seed[f]])
        table += "\n\nhot-swap adaptation (unseen test mentions)\n" + render_table(
            ["included", "mean F1"], [[f"{f:.2f}", f"{100 * y:.2f}"] for f, y in curve])
    runner.write(table, curves)
    return AblationResult(per_seed, curve, curve_per_seed if with_curve else None,
                          digests_ok, shared, table)


def adaptation_curve(model: FusionModel, test: Corpus, gazetteers: GazetteerSet,
                     pool: Sequence[Mention], seen, fractions: Sequence[float],
                     seed: int) -> list[tuple[float, EvalReport]]:
    """Add growing shares of ``pool`` to fresh copies of ``gazetteers``, no retraining.

    Each point scores unseen test mentions. ``gazetteers`` itself is never mutated.
    """
    if model.config.mode != "late":
        raise ModelError("the adaptation curve needs a late-fusion model")
    order = np.random.default_rng([seed, 13]).permutation(len(pool))
    out = []
    for f in fractions:
        gaz = gazetteers.copy()
        for i in sorted(order[:int(round(f * len(pool)))]):
            m = pool[i]
            add_entries(gaz, gazetteer_for_type(gaz, m.entity_type), [m.tokens])
        rep = evaluate_unseen(_predict(model, test, gaz), test, seen)
        out.append((f, rep))
    return out


@dataclass
class LowResourceResult:
    baseline: dict[float, list[float]]
    fusion: dict[float, list[float]]
    table: str

    def gap(self, fraction: float) -> float:
        return _mean(self.fusion[fraction]) - _mean(self.baseline[fraction])


def run_low_resource(spec: ExperimentSpec, data: Dataset | None = None,
                     runner: Runner | None = None) -> LowResourceResult:
    data = data or load_dataset(spec)
    runner = runner or Runner(spec)
    base: dict[float, list[float]] = {}
    fus: dict[float, list[float]] = {}
    for frac in spec.fractions:
        for seed in spec.seeds:
            sub = subsample(data.train, frac, seed)
            for key, mode, att, store in (("ner_only", "ner_only", False, base),
                                          ("late_att", "late", True, fus)):
                model = runner.train(run_id(key, frac, seed),
                                     runner.config_for(mode, att, seed),
                                     sub, data.dev, data.gazetteers)
                rep = evaluate(_predict(model, data.test, data.gazetteers), data.test)
                store.setdefault(frac, []).append(rep.micro_f1)
                runner.add(experiment="low_resource", config=key, seed=seed, fraction=frac,
                           train_sentences=len(sub), **rep.record())
    res = LowResourceResult(base, fus, "")
    rows = []
    for frac in spec.fractions:
        b, f = _mean(base[frac]), _mean(fus[frac])
        rows.append([f"{100 * frac:.0f}%", f"{100 * b:.2f}", f"{100 * f:.2f}",
                     f"{100 * (f - b):+.2f}"])
        runner.add(experiment="low_resource", fraction=frac, summary=True,
                   baseline_mean=_r(b), fusion_mean=_r(f), gap=_r(f - b),
                   baseline_per_seed=[_r(x) for x in base[frac]],
                   fusion_per_seed=[_r(x) for x in fus[frac]])
    res.table = render_table(["train data", "NER w/o fusion", "Late fusion", "gap"], rows)
    runner.write(res.table, {
        "low_resource_baseline": [(f, _mean(base[f])) for f in spec.fractions],
        "low_resource_fusion": [(f, _mean(fus[f])) for f in spec.fractions],
        "low_resource_gap": [(f, res.gap(f)) for f in spec.fractions],
    })
    return res


@dataclass
class TransferResult:
    # cells[(trained_on, evaluated_on)] = (baseline per seed, fusion per seed)
    cells: dict[tuple[str, str], tuple[list[float], list[float]]]
    table: str

    def delta(self, trained_on: str, evaluated_on: str) -> float:
        b, f = self.cells[(trained_on, evaluated_on)]
        return _mean(f) - _mean(b)


def run_transfer(spec: ExperimentSpec, source: Dataset | None = None,
                 target: Dataset | None = None, shared_types: Sequence[str] | None = None,
                 runner: Runner | None = None) -> TransferResult:
    source = source or load_dataset(spec)
    target = target or load_dataset(spec, dialect=spec.target_dialect)
    runner = runner or Runner(spec)
    shared = list(shared_types or spec.shared_types or
                  [t for t in source.scheme.entity_types if t in target.scheme.entity_types])
    if not shared:
        raise HarnessError("source and target share no entity types")
    sets = {}
    for name, ds in (("source", source), ("target", target)):
        sets[name] = tuple(restrict_types(c, shared) for c in (ds.train, ds.dev, ds.test))
    gaz = source.gazetteers
    if gaz.names != target.gazetteers.names:
        raise HarnessError("source and target gazetteer manifests differ")
    cells: dict[tuple[str, str], tuple[list[float], list[float]]] = {}
    for trained_on in ("source", "target"):
        tr, dv, _ = sets[trained_on]
        for seed in spec.seeds:
            for key, mode, att in (("ner_only", "ner_only", False), ("late_att", "late", True)):
                model = runner.train(f"tr_{trained_on}_{key}_s{seed}",
                                     runner.config_for(mode, att, seed), tr, dv, gaz)
                for evaluated_on in ("source", "target"):
                    test = sets[evaluated_on][2]
                    rep = evaluate(_predict(model, test, gaz), test)
                    b, f = cells.setdefault((trained_on, evaluated_on), ([], []))
                    (b if key == "ner_only" else f).append(rep.micro_f1)
                    runner.add(experiment="transfer", config=key, seed=seed,
                               trained_on=trained_on, evaluated_on=evaluated_on,
                               **rep.record())
    res = TransferResult(cells, "")
    rows = []
    for evaluated_on in ("source", "target"):
        row = [evaluated_on]
        for trained_on in ("source", "target"):
            b, f = cells[(trained_on, evaluated_on)]
            row.append(f"{100 * _mean(b):.2f} -> {100 * _mean(f):.2f} "
                       f"({100 * (_mean(f) - _mean(b)):+.2f})")
            runner.add(experiment="transfer", summary=True, trained_on=trained_on,
                       evaluated_on=evaluated_on, baseline_mean=_r(_mean(b)),
                       fusion_mean=_r(_mean(f)), delta=_r(_mean(f) - _mean(b)))
        rows.append(row)
    res.table = render_table(["eval \\ train", "source", "target"], rows)
    runner.write(res.table)
    return res


# --- explanation ---------------------------------------------------------------


@dataclass
class TokenTrace:
    token: str
    codes: dict[str, str]
    ner_top: list[tuple[str, float]]
    gaz_top: list[tuple[str, float]]
    ner_tag: str
    gaz_tag: str
    fused_tag: str
    winner: str                    # branch supplying the fused argmax logit
    coordinate_winners: list[str]  # per output tag: "ner" | "gazetteer" | "tie"
    fused_logits: list[float]


def explain(model: FusionModel, tokens: Sequence[str], gazetteers: GazetteerSet,
            top_k: int = 3) -> list[TokenTrace]:
    if model.config.mode != "late":
        raise ModelError(f"{model.config.mode} model has no separable branches to explain")
    ann = gazetteers.annotate(tokens)
    pred = model.forward(tokens, ann)
    tags = model.scheme.tags
    out = []
    for t, tok in enumerate(tokens):
        o_r, o_g = pred.ner_logits[t], pred.gaz_logits[t]
        winners = ["ner" if a > b else "gazetteer" if b > a else "tie" for a, b in zip(o_r, o_g)]
        c = int(pred.tags[t])

        def top(v):
            idx = np.argsort(-v, kind="stable")[:top_k]
            return [(tags[i], float(v[i])) for i in idx]

        out.append(TokenTrace(
            token=tok,
            codes={g: CODES[ann.codes[j, t]] for j, g in enumerate(gazetteers.names)},
            ner_top=top(o_r), gaz_top=top(o_g),
            ner_tag=tags[int(np.argmax(o_r))], gaz_tag=tags[int(np.argmax(o_g))],
            fused_tag=tags[c], winner=winners[c], coordinate_winners=winners,
            fused_logits=[float(x) for x in np.maximum(o_r, o_g)],
        ))
    return out


def render_trace(trace: Sequence[TokenTrace]) -> str:
    if not trace:
        return ""
    gnames = list(trace[0].codes)
    header = ["token"] + [f"z:{g}" for g in gnames] + ["R", "G", "RG", "from", "R top", "G top"]
    rows = []
    for tr in trace:
        fmt = lambda top: " ".join(f"{t}:{v:.2f}" for t, v in top)  # noqa: E731
        rows.append([tr.token] + [tr.codes[g] for g in gnames] +
                    [tr.ner_tag, tr.gaz_tag, tr.fused_tag, tr.winner,
                     fmt(tr.ner_top), fmt(tr.gaz_top)])
    return render_table(header, rows)


def run_explain(spec: ExperimentSpec, data: Dataset | None = None,
                runner: Runner | None = None) -> str:
    """Trace test sentences where the unplugged NER branch and the fused model disagree."""
    data = data or load_dataset(spec)
    runner = runner or Runner(spec)
    seed = spec.seeds[0]
    sub = subsample(data.train, spec.zero_shot_fraction, seed)
    model = runner.train(run_id("late_att", spec.zero_shot_fraction, seed),
                         runner.config_for("late", True, seed),
                         sub, data.dev, data.gazetteers)
    fused, preds = predict_corpus(model, data.test, data.gazetteers)
    blocks = []
    for i, (s, p) in enumerate(zip(data.test, preds)):
        if len(blocks) >= spec.explain_sentences:
            break
        ner_tags = np.argmax(p.ner_logits, axis=-1)
        if np.array_equal(ner_tags, p.tags):
            continue
        trace = explain(model, s.tokens, data.gazetteers, spec.top_k)
        gold = " ".join(data.scheme.tag_of(t) for t in s.tags)
        blocks.append(f"sentence {i}: {' '.join(s.tokens)}\ngold: {gold}\n"
                      + render_trace(trace))
        runner.add(experiment="explain", sentence=i,
                   tokens=list(s.tokens),
                   ner=[tr.ner_tag for tr in trace], gaz=[tr.gaz_tag for tr in trace],
                   fused=[tr.fused_tag for tr in trace], winner=[tr.winner for tr in trace])
    text = "\n\n".join(blocks)
    runner.write(text)
    return text


def run_experiment(spec: ExperimentSpec, out: str | Path | None = None):
    runner = Runner(spec, out)
    kind = spec.kind
    if kind == "compare":
        return run_compare(spec, runner=runner)
    if kind == "zero_shot":
        return run_zero_shot(spec, runner=runner)
    if kind == "ablation":
        return run_ablation(spec, runner=runner)
    if kind == "one_shot":
        return run_ablation(spec, runner=runner, with_curve=True)
    if kind == "low_resource":
        return run_low_resource(spec, runner=runner)
    if kind == "transfer":
        return run_transfer(spec, runner=runner)
    return run_explain(spec, runner=runner)
