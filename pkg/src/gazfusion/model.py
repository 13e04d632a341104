"""Token encoder, context-aware gazetteer branch, taggers and their fusion.

Shapes: B sentences padded to length T, encoder width h, M gazetteers,
K = 5 gazetteer codes, d gazetteer embedding size, C output tags.
"""
from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .corpus import Corpus, Sentence, TagScheme, normalize_token, repair_tags
from .gazetteer import K, GazetteerAnnotation

MODES = ("ner_only", "early", "late")
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

ENCODER_PARAMS = ("enc_Wq", "enc_Wk", "enc_Wv", "enc_Wo", "enc_bo",
                  "enc_ln1_g", "enc_ln1_b", "enc_ff_W1", "enc_ff_b1",
                  "enc_ff_W2", "enc_ff_b2", "enc_ln2_g", "enc_ln2_b")
GROUPS = {
    "token_embeddings": ("tok_emb",),
    "encoder": ENCODER_PARAMS,
    "gazetteer_embeddings": ("gaz_emb",),
    "tagger_R": ("tagR_W1", "tagR_b1", "tagR_W2", "tagR_b2"),
    "tagger_G": ("tagG_W1", "tagG_b1", "tagG_W2", "tagG_b2"),
    "tagger_RG": ("tagRG_W1", "tagRG_b1", "tagRG_W2", "tagRG_b2"),
}
MODE_GROUPS = {
    "ner_only": ("token_embeddings", "encoder", "tagger_R"),
    "early": ("token_embeddings", "encoder", "gazetteer_embeddings", "tagger_RG"),
    "late": ("token_embeddings", "encoder", "gazetteer_embeddings", "tagger_R", "tagger_G"),
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "late"
    attention: bool = True
    h: int = 64
    d: int = 8
    window: int = 5
    encoder_window: int | None = 8
    ff_mult: int = 2
    max_len: int = 256
    # debug switches for the gazetteer attention: value rows taken from the
    # window ("window") or the query row ("query"); scale by sqrt(M*d) or sqrt(d)
    attention_value: str = "window"
    attention_scale: str = "md"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModelError(f"unknown fusion mode {self.mode!r}")
        if self.window < 0:
            raise ModelError("attention window must be >= 0")
        if self.attention_value not in ("window", "query"):
            raise ModelError(f"bad attention_value {self.attention_value!r}")
        if self.attention_scale not in ("md", "d"):
            raise ModelError(f"bad attention_scale {self.attention_scale!r}")


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [PAD, UNK]:
            tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ModelError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        get = self.index.get
        return [get(normalize_token(t), UNK_ID) for t in tokens]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    @classmethod
    def build(cls, sentences: Iterable[Sentence], min_count: int = 2) -> "Vocabulary":
        """Tokens seen at least ``min_count`` times, most frequent first.

        Rare tokens fall back to the unknown id, which gives that id training signal.
        """
        counts = Counter(normalize_token(t) for s in sentences for t in s.tokens)
        kept = sorted((t for t, c in counts.items() if c >= min_count),
                      key=lambda t: (-counts[t], t))
        return cls([PAD, UNK] + kept)


@dataclass
class Prediction:
    tags: np.ndarray                      # (T,) argmax tag ids
    distribution: np.ndarray              # (T, C) fused softmax
    ner_logits: np.ndarray | None = None  # (T, C) o^r
    gaz_logits: np.ndarray | None = None  # (T, C) o^g
    fused_logits: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tags)


@dataclass
class Batch:
    ids: np.ndarray                # (B, T) vocabulary ids
    valid: np.ndarray              # (B, T) bool
    codes: np.ndarray | None       # (B, M, T) gazetteer codes
    gold: np.ndarray | None        # (B, T) tag ids
    lengths: list[int] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return int(self.valid.sum())


def lookup_gazetteer_embedding(table: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Concatenate ``table[j, codes[..., j, t]]`` over gazetteers j.

    ``table`` is (M, K, d); ``codes`` is (M, T) or (B, M, T). Returns (T, M*d)
    or (B, T, M*d).
    """
    codes = np.asarray(codes)
    M, _, d = table.shape
    if codes.shape[-2] != M:
        raise ModelError(f"annotation has {codes.shape[-2]} gazetteers, table has {M}")
    j = np.arange(M)[:, None]
    emb = table[j, codes]                       # (..., M, T, d)
    emb = np.moveaxis(emb, -3, -2)              # (..., T, M, d)
    return emb.reshape(emb.shape[:-2] + (M * d,))


def gazetteer_attention(Eg: np.ndarray, window: int, d: int | None = None,
                        value: str = "window") -> np.ndarray:
    """Windowed scaled dot-product self-attention over rows of ``Eg`` (T, M*d).

    Scores are scaled by ``1/sqrt(d)`` (``d`` defaults to the row width).
    """
    T, width = Eg.shape
    scale = 1.0 / math.sqrt(d if d is not None else width)
    allowed = nn.window_mask(T, window)
    if value == "query":
        # weights sum to one, so the query-valued form returns its input
        return Eg.copy()
    out, _ = nn.attend(Eg, Eg, Eg, allowed, scale)
    return out


def attention_weights(Eg: np.ndarray, window: int, d: int | None = None) -> np.ndarray:
    T, width = Eg.shape
    scale = 1.0 / math.sqrt(d if d is not None else width)
    _, cache = nn.attend(Eg, Eg, Eg, nn.window_mask(T, window), scale)
    return cache[3]


class FusionModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, scheme: TagScheme,
                 gazetteer_names: Sequence[str], params: dict | None = None,
                 seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.scheme = scheme
        self.gazetteer_names = list(gazetteer_names)
        if config.mode != "ner_only" and not self.gazetteer_names:
            raise ModelError(f"{config.mode} fusion needs at least one gazetteer")
        self._pos = nn.sinusoidal_positions(config.max_len, config.h)
        self.unplugged = False
        if params is None:
            params = self.init_params(np.random.default_rng(seed))
        missing = [n for n in self.param_names() if n not in params]
        if missing:
            raise ModelError(f"parameters missing for {config.mode} mode: {missing}")
        self.params = {n: params[n] for n in self.param_names()}
        self._check_shapes()

    # --- structure -------------------------------------------------------

    @property
    def M(self) -> int:
        return len(self.gazetteer_names)

    @property
    def n_tags(self) -> int:
        return len(self.scheme)

    @property
    def uses_gazetteers(self) -> bool:
        return self.config.mode != "ner_only"

    def groups(self) -> tuple[str, ...]:
        return MODE_GROUPS[self.config.mode]

    def param_names(self) -> list[str]:
        return [n for g in self.groups() for n in GROUPS[g]]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, d, M, C = self.config.h, self.config.d, self.M, self.n_tags
        f = self.config.ff_mult * h
        shapes = {
            "tok_emb": (len(self.vocab), h),
            "enc_Wq": (h, h), "enc_Wk": (h, h), "enc_Wv": (h, h), "enc_Wo": (h, h),
            "enc_bo": (h,), "enc_ln1_g": (h,), "enc_ln1_b": (h,),
            "enc_ff_W1": (h, f), "enc_ff_b1": (f,), "enc_ff_W2": (f, h), "enc_ff_b2": (h,),
            "enc_ln2_g": (h,), "enc_ln2_b": (h,),
            "gaz_emb": (M, K, d),
        }
        for name, width in (("tagR", h), ("tagG", M * d), ("tagRG", h + M * d)):
            shapes.update({f"{name}_W1": (width, width), f"{name}_b1": (width,),
                           f"{name}_W2": (width, C), f"{name}_b2": (C,)})
        return {n: shapes[n] for n in self.param_names()}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, shape in self.shapes().items():
            if name == "tok_emb":
                # rows are looked up one at a time: fan_in 1
                limit = math.sqrt(6.0 / (1 + shape[1]))
                params[name] = rng.uniform(-limit, limit, size=shape)
            elif name == "gaz_emb":
                params[name] = rng.normal(0.0, 0.1, size=shape)
            elif name.endswith("_g"):
                params[name] = np.ones(shape)
            elif len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                params[name] = nn.glorot(rng, *shape)
        return params

    def _check_shapes(self) -> None:
        for name, shape in self.shapes().items():
            arr = self.params[name]
            if arr.shape != shape:
                raise ModelError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name}: non-finite values")

    def copy(self) -> "FusionModel":
        m = FusionModel(self.config, self.vocab, self.scheme, self.gazetteer_names,
                        {k: v.copy() for k, v in self.params.items()})
        m.unplugged = self.unplugged
        return m

    # --- batching --------------------------------------------------------

    def make_batch(self, sentences: Sequence[Sentence],
                   annotations: Sequence[GazetteerAnnotation | np.ndarray] | None = None
                   ) -> Batch:
        lengths = [len(s) for s in sentences]
        if not lengths:
            raise ModelError("empty batch")
        T = max(lengths)
        if T > self.config.max_len:
            raise ModelError(f"sentence of length {T} exceeds max_len {self.config.max_len}")
        if min(lengths) == 0:
            raise ModelError("empty sentence")
        Bn = len(sentences)
        ids = np.zeros((Bn, T), dtype=np.int64)
        valid = np.zeros((Bn, T), dtype=bool)
        gold = None
        if all(s.tags is not None for s in sentences):
            gold = np.zeros((Bn, T), dtype=np.int64)
        for b, s in enumerate(sentences):
            n = len(s)
            ids[b, :n] = self.vocab.ids(s.tokens)
            valid[b, :n] = True
            if gold is not None:
                gold[b, :n] = s.tags
        codes = None
        if self.uses_gazetteers:
            if annotations is None:
                raise ModelError(f"{self.config.mode} fusion needs gazetteer annotations")
            codes = np.zeros((Bn, self.M, T), dtype=np.int64)
            for b, (s, ann) in enumerate(zip(sentences, annotations)):
                arr = ann.codes if isinstance(ann, GazetteerAnnotation) else np.asarray(ann)
                if arr.shape != (self.M, len(s)):
                    raise ModelError(f"annotation shape {arr.shape} does not match "
                                     f"({self.M}, {len(s)})")
                codes[b, :, :len(s)] = arr
        return Batch(ids, valid, codes, gold, lengths)

    # --- forward / backward ----------------------------------------------

    def _encode(self, batch: Batch, dropout_p: float, rng):
        p = self.params
        cfg = self.config
        T = batch.ids.shape[1]
        h = cfg.h
        cache = {}
        x = p["tok_emb"][batch.ids] + self._pos[:T]
        m0 = nn.dropout_mask(rng, x.shape, dropout_p)
        if m0 is not None:
            x = x * m0
        allowed = nn.attention_mask(batch.valid, cfg.encoder_window)
        q, k, v = x @ p["enc_Wq"], x @ p["enc_Wk"], x @ p["enc_Wv"]
        c, att = nn.attend(q, k, v, allowed, 1.0 / math.sqrt(h))
        a = c @ p["enc_Wo"] + p["enc_bo"]
        m1 = nn.dropout_mask(rng, a.shape, dropout_p)
        if m1 is not None:
            a = a * m1
        x1, ln1 = nn.layer_norm(x + a, p["enc_ln1_g"], p["enc_ln1_b"])
        f0 = x1 @ p["enc_ff_W1"] + p["enc_ff_b1"]
        f1, act = nn.gelu(f0)
        f2 = f1 @ p["enc_ff_W2"] + p["enc_ff_b2"]
        m2 = nn.dropout_mask(rng, f2.shape, dropout_p)
        if m2 is not None:
            f2 = f2 * m2
        r, ln2 = nn.layer_norm(x1 + f2, p["enc_ln2_g"], p["enc_ln2_b"])
        cache.update(x=x, m0=m0, att=att, c=c, m1=m1, ln1=ln1, x1=x1, act=act,
                     f1=f1, m2=m2, ln2=ln2)
        return r, cache

    def _encode_backward(self, dr, cache, batch: Batch, grads):
        p = self.params
        du2, grads["enc_ln2_g"], grads["enc_ln2_b"] = nn.layer_norm_backward(dr, cache["ln2"])
        df2 = du2 if cache["m2"] is None else du2 * cache["m2"]
        df1, grads["enc_ff_W2"], grads["enc_ff_b2"] = nn.linear_backward(
            df2, cache["f1"], p["enc_ff_W2"])
        df0 = nn.gelu_backward(df1, cache["act"])
        dx1, grads["enc_ff_W1"], grads["enc_ff_b1"] = nn.linear_backward(
            df0, cache["x1"], p["enc_ff_W1"])
        dx1 = dx1 + du2
        du1, grads["enc_ln1_g"], grads["enc_ln1_b"] = nn.layer_norm_backward(dx1, cache["ln1"])
        da = du1 if cache["m1"] is None else du1 * cache["m1"]
        dc, grads["enc_Wo"], grads["enc_bo"] = nn.linear_backward(da, cache["c"], p["enc_Wo"])
        dq, dk, dv = nn.attend_backward(dc, cache["att"])
        x = cache["x"]
        dx = du1.copy()
        for name, dproj in (("enc_Wq", dq), ("enc_Wk", dk), ("enc_Wv", dv)):
            dxp, grads[name], _ = nn.linear_backward(dproj, x, p[name])
            dx += dxp
        if cache["m0"] is not None:
            dx = dx * cache["m0"]
        demb = np.zeros_like(p["tok_emb"])
        np.add.at(demb, batch.ids[batch.valid], dx[batch.valid])
        grads["tok_emb"] = demb

    def _gazetteer(self, batch: Batch):
        cfg = self.config
        Eg = lookup_gazetteer_embedding(self.params["gaz_emb"], batch.codes)
        if not cfg.attention or cfg.attention_value == "query":
            return Eg, (Eg, None)
        width = Eg.shape[-1]
        scale_dim = width if cfg.attention_scale == "md" else cfg.d
        allowed = nn.attention_mask(batch.valid, cfg.window)
        g, att = nn.attend(Eg, Eg, Eg, allowed, 1.0 / math.sqrt(scale_dim))
        return g, (Eg, att)

    def _gazetteer_backward(self, dg, cache, batch: Batch, grads):
        _, att = cache
        if att is None:
            dEg = dg
        else:
            dq, dk, dv = nn.attend_backward(dg, att)
            dEg = dq + dk + dv
        M, d = self.M, self.config.d
        dEg = dEg.reshape(dEg.shape[:-1] + (M, d))       # (B, T, M, d)
        codes = np.moveaxis(batch.codes, 1, 2)            # (B, T, M)
        sel = batch.valid
        gaz_rows = np.broadcast_to(np.arange(M), codes.shape)[sel]
        dtable = np.zeros_like(self.params["gaz_emb"])
        np.add.at(dtable, (gaz_rows, codes[sel]), dEg[sel])
        grads["gaz_emb"] = dtable

    def _tagger(self, name: str, x):
        p = self.params
        return nn.mlp(x, p[f"{name}_W1"], p[f"{name}_b1"], p[f"{name}_W2"], p[f"{name}_b2"])

    def _tagger_backward(self, name: str, dout, cache, grads):
        p = self.params
        dx, *dps = nn.mlp_backward(dout, cache, p[f"{name}_W1"], p[f"{name}_W2"])
        for suffix, g in zip(("W1", "b1", "W2", "b2"), dps):
            grads[f"{name}_{suffix}"] = g
        return dx

    def run(self, batch: Batch, dropout_p: float = 0.0, rng=None):
        """Forward pass; returns ``(outputs, cache)``. Dropout only when ``rng`` is given."""
        mode = self.config.mode
        r, enc_cache = self._encode(batch, dropout_p, rng)
        out = {"r": r}
        cache = {"enc": enc_cache}
        if mode == "ner_only":
            o_r, cache["tagR"] = self._tagger("tagR", r)
            out.update(o_r=o_r, logits=o_r)
            return out, cache
        g, cache["gaz"] = self._gazetteer(batch)
        out["g"] = g
        if mode == "early":
            logits, cache["tagRG"] = self._tagger("tagRG", np.concatenate([r, g], axis=-1))
            out["logits"] = logits
            return out, cache
        o_r, cache["tagR"] = self._tagger("tagR", r)
        o_g, cache["tagG"] = self._tagger("tagG", g)
        # ties go to the NER branch
        ner_wins = o_r >= o_g
        out.update(o_r=o_r, o_g=o_g, logits=np.where(ner_wins, o_r, o_g), ner_wins=ner_wins)
        return out, cache

    def backward(self, dlogits: np.ndarray, out, cache, batch: Batch) -> dict[str, np.ndarray]:
        mode = self.config.mode
        grads: dict[str, np.ndarray] = {}
        if mode == "ner_only":
            dr = self._tagger_backward("tagR", dlogits, cache["tagR"], grads)
        elif mode == "early":
            dx = self._tagger_backward("tagRG", dlogits, cache["tagRG"], grads)
            h = self.config.h
            dr, dg = dx[..., :h], dx[..., h:]
            self._gazetteer_backward(dg, cache["gaz"], batch, grads)
        else:
            wins = out["ner_wins"]
            dr = self._tagger_backward("tagR", np.where(wins, dlogits, 0.0), cache["tagR"], grads)
            dg = self._tagger_backward("tagG", np.where(wins, 0.0, dlogits), cache["tagG"], grads)
            self._gazetteer_backward(dg, cache["gaz"], batch, grads)
        self._encode_backward(dr, cache["enc"], batch, grads)
        return grads

    # --- public API ------------------------------------------------------

    def loss(self, batch: Batch, dropout_p: float = 0.0, rng=None) -> float:
        out, _ = self.run(batch, dropout_p, rng)
        return _nll(out["logits"], batch)[0]

    def loss_and_gradients(self, batch: Batch, dropout_p: float = 0.0, rng=None):
        if batch.gold is None:
            raise ModelError("loss needs gold tags")
        out, cache = self.run(batch, dropout_p, rng)
        loss, dlogits = _nll(out["logits"], batch)
        if not math.isfinite(loss):
            lengths = batch.lengths
            raise FloatingPointError(
                f"non-finite loss {loss} on batch of {len(lengths)} sentences "
                f"(lengths {min(lengths)}..{max(lengths)}, {batch.n_tokens} tokens)")
        return loss, self.backward(dlogits, out, cache, batch)

    def encode(self, tokens: Sequence[str], train_mode: bool = False,
               dropout_p: float = 0.0, rng=None) -> np.ndarray:
        """Contextual token vectors ``r`` (T, h)."""
        batch = self._tokens_only_batch(tokens)
        r, _ = self._encode(batch, dropout_p if train_mode else 0.0,
                            rng if train_mode else None)
        return r[0]

    def _tokens_only_batch(self, tokens):
        n = len(tokens)
        if n > self.config.max_len:
            raise ModelError(f"sentence of length {n} exceeds max_len {self.config.max_len}")
        ids = np.array([self.vocab.ids(tokens)], dtype=np.int64)
        return Batch(ids, np.ones((1, n), dtype=bool), None, None, [n])

    def predict_batch(self, sentences: Sequence[Sentence],
                      annotations: Sequence[GazetteerAnnotation] | None = None,
                      batch_size: int = 64) -> list[Prediction]:
        preds: list[Prediction] = []
        for lo in range(0, len(sentences), batch_size):
            chunk = [Sentence(s.tokens) for s in sentences[lo:lo + batch_size]]
            anns = None if annotations is None else annotations[lo:lo + batch_size]
            batch = self.make_batch(chunk, anns if self.uses_gazetteers else None)
            out, _ = self.run(batch)
            probs = nn.softmax(out["logits"])
            for b, n in enumerate(batch.lengths):
                preds.append(Prediction(
                    tags=np.argmax(probs[b, :n], axis=-1),
                    distribution=probs[b, :n],
                    ner_logits=out["o_r"][b, :n] if "o_r" in out else None,
                    gaz_logits=out["o_g"][b, :n] if "o_g" in out else None,
                    fused_logits=out["logits"][b, :n],
                ))
        return preds

    def forward(self, tokens: Sequence[str],
                annotation: GazetteerAnnotation | None = None) -> Prediction:
        anns = [annotation] if annotation is not None else None
        return self.predict_batch([Sentence(tuple(tokens))], anns)[0]


def _nll(logits: np.ndarray, batch: Batch):
    """Mean token cross-entropy and its gradient w.r.t. the logits."""
    logp = nn.log_softmax(logits)
    valid = batch.valid
    n = max(batch.n_tokens, 1)
    gold = batch.gold
    picked = np.take_along_axis(logp, gold[..., None], axis=-1)[..., 0]
    loss = float(-np.sum(picked[valid]) / n)
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, gold[..., None],
                      np.take_along_axis(dlogits, gold[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= valid[..., None] / n
    return loss, dlogits


def unplug_gazetteer(model: FusionModel) -> FusionModel:
    """NER branch of a late-fusion model, sharing its parameter arrays."""
    if model.config.mode != "late":
        raise ModelError(f"cannot unplug the gazetteer from a {model.config.mode} model")
    cfg = replace(model.config, mode="ner_only")
    shared = {n: model.params[n] for g in MODE_GROUPS["ner_only"] for n in GROUPS[g]}
    out = FusionModel(cfg, model.vocab, model.scheme, model.gazetteer_names, shared)
    out.unplugged = True
    return out


def build_model(config: ModelConfig, vocab: Vocabulary, scheme: TagScheme,
                gazetteer_names: Sequence[str], seed: int = 0) -> FusionModel:
    return FusionModel(config, vocab, scheme, gazetteer_names, seed=seed)


def annotate_corpus(gazetteers, sentences) -> list[GazetteerAnnotation] | None:
    if gazetteers is None:
        return None
    return [gazetteers.annotate(s.tokens) for s in sentences]


def predict_corpus(model: FusionModel, corpus, gazetteers=None, annotations=None):
    """Copy of ``corpus`` with predicted tags (repaired to valid IOBES paths),
    plus the raw per-token predictions."""
    if model.uses_gazetteers and annotations is None:
        if gazetteers is None:
            raise ModelError(f"{model.config.mode} fusion needs gazetteers")
        if list(gazetteers.names) != model.gazetteer_names:
            raise ModelError(f"gazetteer set {gazetteers.names} does not match the "
                             f"model's {model.gazetteer_names}")
        annotations = annotate_corpus(gazetteers, corpus.sentences)
    preds = model.predict_batch(corpus.sentences,
                                annotations if model.uses_gazetteers else None)
    sents = [s.with_tags(repair_tags(p.tags.tolist(), corpus.scheme))
             for s, p in zip(corpus.sentences, preds)]
    return Corpus(tuple(sents), corpus.scheme, corpus.name), preds
