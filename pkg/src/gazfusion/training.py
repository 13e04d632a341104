"""Mini-batch Adam training with dropout, clipping and early stopping on dev F1."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .corpus import Corpus
from .evaluation import evaluate
from .gazetteer import GazetteerSet
from .kvconfig import dump_kv, load_dataclass
from .model import (GROUPS, UNK_ID, FusionModel, ModelConfig, ModelError, Vocabulary,
                    annotate_corpus, predict_corpus)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    dropout_p: float = 0.1
    word_dropout: float = 0.0
    d: int = 8
    w: int = 5
    h: int = 64
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    mode: str = "late"
    attention: bool = True
    encoder_window: int | None = 8
    ff_mult: int = 2
    max_len: int = 256
    min_count: int = 2
    grad_clip: float = 5.0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stopping: bool = True
    attention_value: str = "window"
    attention_scale: str = "md"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise TrainingError("dropout_p must be in [0, 1)")
        if not 0.0 <= self.word_dropout < 1.0:
            raise TrainingError("word_dropout must be in [0, 1)")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingError("batch_size and max_epochs must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(mode=self.mode, attention=self.attention, h=self.h, d=self.d,
                           window=self.w, encoder_window=self.encoder_window,
                           ff_mult=self.ff_mult, max_len=self.max_len,
                           attention_value=self.attention_value,
                           attention_scale=self.attention_scale)


def load_train_config(path=None, overrides=None) -> TrainConfig:
    return load_dataclass(TrainConfig, path, overrides)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_f1: float | None
    wall_time: float


@dataclass
class RunRecord:
    config: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_f1: float | None = None
    checkpoint_path: str | None = None

    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def lines(self, with_time: bool = True) -> str:
        out = []
        for e in self.epochs:
            rec = asdict(e)
            if not with_time:
                rec.pop("wall_time")
            out.append(json.dumps(rec, sort_keys=True))
        return "\n".join(out) + ("\n" if out else "")


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, warmup_steps: int = 0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             names: Iterable[str]) -> None:
        self.t += 1
        lr = self.lr
        if self.warmup_steps:
            lr *= min(1.0, self.t / self.warmup_steps)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in names:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], names, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in names))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in names:
            grads[k] = grads[k] * scale
    return norm


def trainable_names(model: FusionModel, freeze: Iterable[str]) -> list[str]:
    freeze = set(freeze)
    unknown = freeze - set(GROUPS)
    if unknown:
        raise TrainingError(f"unknown parameter groups {sorted(unknown)}")
    return [n for g in model.groups() if g not in freeze for n in GROUPS[g]]


def dev_f1(model: FusionModel, dev: Corpus, gazetteers, annotations=None) -> float:
    pred, _ = predict_corpus(model, dev, gazetteers, annotations)
    return evaluate(pred, dev).micro_f1


def train(config: TrainConfig, train_corpus: Corpus, dev: Corpus | None,
          gazetteers: GazetteerSet | None, freeze: Iterable[str] = (),
          init_model: FusionModel | None = None) -> tuple[FusionModel, RunRecord]:
    """Train a model; returns the best-dev-F1 parameters and the run record.

    ``init_model`` starts from existing parameters (and vocabulary); it is
    not modified.
    """
    if len(train_corpus) == 0:
        raise TrainingError("empty training corpus")
    if dev is not None and dev.scheme.entity_types != train_corpus.scheme.entity_types:
        raise TrainingError("train and dev corpora use different tag schemes")
    if config.mode != "ner_only" and gazetteers is None:
        raise TrainingError(f"{config.mode} fusion needs gazetteers")
    mcfg = config.model_config()
    if init_model is not None:
        if init_model.config.mode != config.mode:
            model = FusionModel(mcfg, init_model.vocab, init_model.scheme,
                                gazetteers.names if gazetteers else [],
                                _extend_params(init_model, mcfg, gazetteers, config.seed))
        else:
            model = init_model.copy()
    else:
        vocab = Vocabulary.build(train_corpus.sentences, config.min_count)
        names = gazetteers.names if gazetteers is not None else []
        model = FusionModel(mcfg, vocab, train_corpus.scheme, names, seed=config.seed)

    names = trainable_names(model, freeze)
    sentences = train_corpus.sentences
    train_ann = annotate_corpus(gazetteers, sentences) if model.uses_gazetteers else None
    dev_ann = (annotate_corpus(gazetteers, dev.sentences)
               if model.uses_gazetteers and dev is not None else None)

    record = RunRecord(config=dump_kv(config), seed=config.seed)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps,
               config.warmup_steps)
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_f1 = -1.0
    bad_epochs = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(sentences))
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        word_rng = np.random.default_rng([config.seed, epoch, 2])
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = model.make_batch([sentences[i] for i in idx],
                                     [train_ann[i] for i in idx] if train_ann else None)
            if config.word_dropout > 0:
                # gazetteer codes still come from the original tokens
                hide = (word_rng.random(batch.ids.shape) < config.word_dropout) & batch.valid
                batch.ids = np.where(hide, UNK_ID, batch.ids)
            loss, grads = model.loss_and_gradients(batch, config.dropout_p, drop_rng)
            clip_global_norm(grads, names, config.grad_clip)
            opt.step(model.params, grads, names)
            total += loss * batch.n_tokens
            count += batch.n_tokens
        train_loss = total / count
        f1 = None
        if dev is not None and len(dev):
            f1 = dev_f1(model, dev, gazetteers, dev_ann)
            if math.isnan(f1):
                raise TrainingError(f"dev F1 is NaN at epoch {epoch}")
        record.epochs.append(EpochRecord(epoch, train_loss, f1, time.perf_counter() - t0))
        log.info("epoch %d loss %.5f dev_f1 %s", epoch, train_loss,
                 "n/a" if f1 is None else f"{f1:.4f}")
        if f1 is None or not config.early_stopping:
            record.best_epoch, record.best_dev_f1 = epoch, f1
            best_params = None
            continue
        if f1 > best_f1:
            best_f1 = f1
            best_params = {k: v.copy() for k, v in model.params.items()}
            record.best_epoch, record.best_dev_f1 = epoch, f1
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    if best_params is not None:
        model.params = best_params
    return model, record


def _extend_params(base: FusionModel, mcfg: ModelConfig, gazetteers, seed: int) -> dict:
    """Parameters for ``mcfg`` that reuse every array ``base`` already has."""
    if gazetteers is None:
        raise ModelError("extending a model to fusion needs gazetteers")
    fresh = FusionModel(mcfg, base.vocab, base.scheme, gazetteers.names, seed=seed)
    params = dict(fresh.params)
    for k, v in base.params.items():
        if k in params:
            if params[k].shape != v.shape:
                raise ModelError(f"{k}: cannot reuse shape {v.shape} as {params[k].shape}")
            params[k] = v.copy()
    return params


def subsample(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Uniform sentence sample without replacement, original order kept."""
    if not 0.0 < fraction <= 1.0:
        raise TrainingError(f"fraction {fraction} outside (0, 1]")
    if fraction == 1.0:
        return corpus
    n = int(round(fraction * len(corpus)))
    if n < 1:
        raise TrainingError("subsample would be empty")
    idx = np.sort(np.random.default_rng([seed, 7]).choice(len(corpus), size=n, replace=False))
    return corpus.subset(idx.tolist())
