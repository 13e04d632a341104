"""Plain-text checkpoints.

Layout: a ``key=value`` header, the vocabulary (one token per line), then each
tensor as ``tensor <name> <ndim> <dims...>`` followed by its row-major values,
one row per line, written with ``repr`` so floats round-trip exactly.
Identical parameters always produce identical bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

import numpy as np

from .corpus import TagScheme
from .gazetteer import K
from .kvconfig import apply_kv, dump_kv, parse_kv_lines
from .model import FusionModel, ModelConfig, Vocabulary

MAGIC = "gazfusion-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def manifest_hash(names) -> str:
    return hashlib.sha256("\n".join(names).encode()).hexdigest()[:16]


def dumps(model: FusionModel) -> str:
    cfg = model.config
    lines = [MAGIC, f"format_version={FORMAT_VERSION}"]
    lines += dump_kv(cfg).splitlines()
    lines += [
        f"M={model.M}", f"K={K}", f"vocab_size={len(model.vocab)}",
        f"vocab_hash={model.vocab.digest()}",
        f"gazetteers={','.join(model.gazetteer_names)}",
        f"gazetteer_manifest_hash={manifest_hash(model.gazetteer_names)}",
        f"tag_scheme={','.join(model.scheme.entity_types)}",
        f"unplugged={'true' if model.unplugged else 'false'}",
        "vocab",
    ]
    for tok in model.vocab.tokens:
        if any(c.isspace() for c in tok):
            raise CheckpointError(f"vocabulary token with whitespace: {tok!r}")
        lines.append(tok)
    for name in model.param_names():
        arr = model.params[name]
        lines.append(f"tensor {name} {arr.ndim} {' '.join(map(str, arr.shape))}")
        rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save(model: FusionModel, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(model))
    return path


def loads(text: str) -> FusionModel:
    lines = text.split("\n")
    if not lines or lines[0] != MAGIC:
        raise CheckpointError("not a gazfusion checkpoint")
    i = 1
    header_lines = []
    while i < len(lines) and lines[i] != "vocab":
        header_lines.append(lines[i])
        i += 1
    header = parse_kv_lines(header_lines, "checkpoint header")
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    if int(header["K"]) != K:
        raise CheckpointError(f"checkpoint K={header['K']}, expected {K}")
    cfg_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    cfg = apply_kv(ModelConfig(), {k: v for k, v in header.items() if k in cfg_keys})
    n_vocab = int(header["vocab_size"])
    vocab = Vocabulary(lines[i + 1:i + 1 + n_vocab])
    if vocab.digest() != header["vocab_hash"]:
        raise CheckpointError("vocabulary hash mismatch")
    i += 1 + n_vocab
    params = {}
    while lines[i] != "end":
        parts = lines[i].split()
        if parts[0] != "tensor":
            raise CheckpointError(f"line {i + 1}: expected tensor header")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(x) for x in parts[3:3 + ndim])
        n_rows = int(np.prod(shape[:-1])) if ndim > 1 else 1
        rows = [np.array(lines[i + 1 + r].split(), dtype=np.float64) for r in range(n_rows)]
        params[name] = np.stack(rows).reshape(shape) if rows else np.zeros(shape)
        i += 1 + n_rows
    names = [n for n in header["gazetteers"].split(",") if n]
    if manifest_hash(names) != header["gazetteer_manifest_hash"]:
        raise CheckpointError("gazetteer manifest hash mismatch")
    scheme = TagScheme(tuple(t for t in header["tag_scheme"].split(",") if t))
    model = FusionModel(cfg, vocab, scheme, names, params)
    model.unplugged = header.get("unplugged") == "true"
    return model


def load(path: str | Path) -> FusionModel:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def digest(model: FusionModel) -> str:
    return hashlib.sha256(dumps(model).encode()).hexdigest()
