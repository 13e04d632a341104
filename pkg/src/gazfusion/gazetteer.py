"""Named dictionaries, token-trie matching and per-token gazetteer codes.

Matching is greedy leftmost-longest: at each position the longest entry
starting there wins, and scanning resumes after it. Entries are compared
after case folding.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from itertools import compress
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import normalize_mention, normalize_tokens

# gazetteer code alphabet (K = 5)
O, B, I, E, S = range(5)
CODES = ("O", "B", "I", "E", "S")
K = len(CODES)

_END = None  # terminal marker key inside trie nodes


class GazetteerError(ValueError):
    pass


def _as_tokens(entry) -> tuple[str, ...]:
    if isinstance(entry, str):
        return tuple(entry.split())
    return tuple(entry)


class Gazetteer:
    def __init__(self, name: str, entries: Iterable = ()):
        self.name = name
        self._surface: dict[tuple[str, ...], tuple[str, ...]] = {}
        self._root: dict = {}
        self._max_len = 0
        self._lock = threading.Lock()
        for i, entry in enumerate(entries):
            toks = _as_tokens(entry)
            if not toks or any(not t for t in toks):
                raise GazetteerError(f"gazetteer {name!r}: empty entry at index {i}")
            key = normalize_mention(toks)
            if key in self._surface:
                continue
            self._surface[key] = toks
            self._insert(self._root, key, None)
        self._max_len = max((len(k) for k in self._surface), default=0)

    def __len__(self) -> int:
        return len(self._surface)

    def __contains__(self, entry) -> bool:
        return self.lookup(normalize_mention(_as_tokens(entry)))

    def __repr__(self) -> str:
        return f"Gazetteer({self.name!r}, {len(self)} entries)"

    @property
    def entries(self) -> list[tuple[str, ...]]:
        """Surface forms in insertion order."""
        return list(self._surface.values())

    def normalized_entries(self) -> set[tuple[str, ...]]:
        return set(self._surface)

    def lookup(self, key: Sequence[str]) -> bool:
        node = self._root
        for tok in key:
            node = node.get(tok)
            if node is None:
                return False
        return _END in node

    @staticmethod
    def _insert(root: dict, key: tuple[str, ...], copied: set | None) -> None:
        node = root
        for tok in key:
            child = node.get(tok)
            if child is None:
                child = {}
                if copied is not None:
                    copied.add(id(child))
            elif copied is not None and id(child) not in copied:
                child = dict(child)
                copied.add(id(child))
            node[tok] = child
            node = child
        node[_END] = True

    @staticmethod
    def _delete(root: dict, key: tuple[str, ...], copied: set) -> None:
        path = [root]
        node = root
        for tok in key:
            child = node[tok]
            if id(child) not in copied:
                child = dict(child)
                copied.add(id(child))
                node[tok] = child
            path.append(child)
            node = child
        del node[_END]
        for depth in range(len(key), 0, -1):
            if path[depth]:
                break
            del path[depth - 1][key[depth - 1]]

    def add(self, entries: Iterable) -> int:
        """Insert entries; returns the number actually new."""
        new = []
        for i, entry in enumerate(entries):
            toks = _as_tokens(entry)
            if not toks or any(not t for t in toks):
                raise GazetteerError(f"gazetteer {self.name!r}: empty entry at index {i}")
            key = normalize_mention(toks)
            if key not in self._surface and all(key != k for k, _ in new):
                new.append((key, toks))
        if not new:
            return 0
        with self._lock:
            # readers holding the old root keep a consistent snapshot
            root = dict(self._root)
            copied = {id(root)}
            for key, _ in new:
                self._insert(root, key, copied)
            for key, toks in new:
                self._surface[key] = toks
            self._max_len = max(self._max_len, max(len(k) for k, _ in new))
            self._root = root
        return len(new)

    def remove(self, entries: Iterable) -> int:
        keys = []
        for entry in entries:
            key = normalize_mention(_as_tokens(entry))
            if key in self._surface and key not in keys:
                keys.append(key)
        if not keys:
            return 0
        with self._lock:
            root = dict(self._root)
            copied = {id(root)}
            for key in keys:
                self._delete(root, key, copied)
                del self._surface[key]
            self._max_len = max((len(k) for k in self._surface), default=0)
            self._root = root
        return len(keys)

    def match_normalized(self, norm: Sequence[str]) -> list[int]:
        n = len(norm)
        codes = [O] * n
        # root lookups run at C speed; the Python loop only visits positions that hit
        heads = list(map(self._root.get, norm))
        resume = 0
        for t in compress(range(n), heads):
            if t < resume:
                continue
            node = heads[t]
            best = 1 if _END in node else 0
            j = t + 1
            while j < n:
                node = node.get(norm[j])
                if node is None:
                    break
                j += 1
                if _END in node:
                    best = j - t
            if best == 1:
                codes[t] = S
            elif best:
                codes[t] = B
                codes[t + 1:t + best - 1] = [I] * (best - 2)
                codes[t + best - 1] = E
            resume = t + best
        return codes

    def match(self, tokens: Sequence[str]) -> list[int]:
        return self.match_normalized(normalize_tokens(tokens))


def build_gazetteer(name: str, entries: Iterable) -> Gazetteer:
    return Gazetteer(name, entries)


@dataclass(frozen=True)
class GazetteerAnnotation:
    codes: np.ndarray  # (M, T) int8

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def row(self, j: int) -> list[int]:
        return [int(c) for c in self.codes[j]]


class GazetteerSet:
    """Ordered gazetteers; the order fixes the first axis of the embedding table."""

    label_alphabet = CODES

    def __init__(self, gazetteers: Sequence[Gazetteer]):
        if not gazetteers:
            raise GazetteerError("a gazetteer set needs at least one gazetteer")
        names = [g.name for g in gazetteers]
        if len(set(names)) != len(names):
            raise GazetteerError(f"duplicate gazetteer names: {names}")
        self.gazetteers = list(gazetteers)
        self.version = 0

    def __len__(self) -> int:
        return len(self.gazetteers)

    def __iter__(self):
        return iter(self.gazetteers)

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.gazetteers]

    def __getitem__(self, name: str) -> Gazetteer:
        for g in self.gazetteers:
            if g.name == name:
                return g
        raise GazetteerError(f"unknown gazetteer {name!r}")

    def manifest_hash(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]

    def annotate(self, tokens: Sequence[str]) -> GazetteerAnnotation:
        norm = normalize_tokens(tokens)
        codes = np.zeros((len(self.gazetteers), len(norm)), dtype=np.int8)
        for j, g in enumerate(self.gazetteers):
            codes[j] = g.match_normalized(norm)
        return GazetteerAnnotation(codes)

    def copy(self) -> "GazetteerSet":
        return GazetteerSet([Gazetteer(g.name, g.entries) for g in self.gazetteers])

    def snapshot(self) -> dict[str, list[tuple[str, ...]]]:
        return {g.name: g.entries for g in self.gazetteers}


def annotate(gazetteers: GazetteerSet, tokens: Sequence[str]) -> GazetteerAnnotation:
    return gazetteers.annotate(tokens)


def add_entries(gazetteers: GazetteerSet, name: str, entries: Iterable) -> GazetteerSet:
    if gazetteers[name].add(entries):
        gazetteers.version += 1
    return gazetteers


def remove_entries(gazetteers: GazetteerSet, name: str, entries: Iterable) -> GazetteerSet:
    if gazetteers[name].remove(entries):
        gazetteers.version += 1
    return gazetteers


def is_valid_code_row(row: Sequence[int]) -> bool:
    inside = False
    for c in row:
        if c in (O, S, B):
            if inside:
                return False
            inside = c == B
        elif not inside:
            return False
        elif c == E:
            inside = False
    return not inside


# --- files ----------------------------------------------------------------


def load_gazetteer_file(path: str | Path, name: str | None = None) -> Gazetteer:
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            entries.append(tuple(line.split()))
    return Gazetteer(name or path.stem, entries)


def write_gazetteer_file(gazetteer: Gazetteer, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# gazetteer {gazetteer.name}\n")
        for entry in gazetteer.entries:
            fh.write(" ".join(entry) + "\n")


def load_manifest(path: str | Path) -> GazetteerSet:
    """Manifest: one gazetteer file path per line (relative to the manifest),
    optionally ``name=path`` to override the stem."""
    return GazetteerSet([load_gazetteer_file(f, name) for name, f in manifest_files(path)])


def manifest_files(path: str | Path) -> list[tuple[str, Path]]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name = None
            if "=" in line:
                name, line = (p.strip() for p in line.split("=", 1))
            file = Path(line)
            if not file.is_absolute():
                file = path.parent / file
            out.append((name or file.stem, file))
    return out


def write_manifest(gazetteers: GazetteerSet, directory: str | Path,
                   manifest_name: str = "gazetteers.txt") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for g in gazetteers:
        fname = f"{g.name}.txt"
        write_gazetteer_file(g, directory / fname)
        lines.append(f"{g.name}={fname}" if Path(fname).stem != g.name else fname)
    manifest = directory / manifest_name
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
