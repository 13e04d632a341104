"""Tagged-sentence data model, IOBES span codec and column-format IO."""
from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PREFIXES = ("B", "I", "E", "S")


class CorpusError(ValueError):
    pass


class TagSchemeError(CorpusError):
    pass


_NORM_CACHE: dict[str, str] = {}
_NORM_CACHE_MAX = 1 << 20


def normalize_token(token: str) -> str:
    out = _NORM_CACHE.get(token)
    if out is None:
        out = token.lower() if token.isascii() else \
            unicodedata.normalize("NFC", token).casefold()
        if len(_NORM_CACHE) >= _NORM_CACHE_MAX:
            _NORM_CACHE.clear()
        _NORM_CACHE[token] = out
    return out


def normalize_tokens(tokens: Sequence[str]) -> list[str]:
    """``normalize_token`` over a sequence; cache hits stay in C."""
    out = list(map(_NORM_CACHE.get, tokens))
    if None in out:
        for i, v in enumerate(out):
            if v is None:
                out[i] = normalize_token(tokens[i])
    return out


def normalize_mention(tokens: Iterable[str]) -> tuple[str, ...]:
    return tuple(normalize_token(t) for t in tokens)


_TOKEN_RE = re.compile(r"\w+(?:[-'.]\w+)*|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Whitespace split with punctuation detached as separate tokens."""
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class TagScheme:
    """IOBES tag alphabet. Id 0 is ``O``; type ``k`` owns ids ``1+4k .. 4+4k`` (B, I, E, S)."""

    entity_types: tuple[str, ...]
    tags: tuple[str, ...] = field(init=False, repr=False, compare=False)
    _ids: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        types = tuple(self.entity_types)
        if len(set(types)) != len(types):
            raise TagSchemeError(f"duplicate entity types: {types}")
        for t in types:
            if not t or "-" in t or any(c.isspace() for c in t):
                raise TagSchemeError(f"bad entity type name {t!r}")
        tags = ["O"] + [f"{p}-{t}" for t in types for p in PREFIXES]
        object.__setattr__(self, "entity_types", types)
        object.__setattr__(self, "tags", tuple(tags))
        object.__setattr__(self, "_ids", {tag: i for i, tag in enumerate(tags)})

    def __len__(self) -> int:
        return len(self.tags)

    def id_of(self, tag: str) -> int:
        try:
            return self._ids[tag]
        except KeyError:
            raise TagSchemeError(f"unknown tag {tag!r}") from None

    def tag_of(self, tag_id: int) -> str:
        if not 0 <= tag_id < len(self.tags):
            raise TagSchemeError(f"tag id {tag_id} out of range")
        return self.tags[tag_id]

    def parse(self, tag_id: int) -> tuple[str, str | None]:
        """``(prefix, type)``; ``("O", None)`` for the outside tag."""
        if tag_id == 0:
            return "O", None
        k, p = divmod(tag_id - 1, 4)
        return PREFIXES[p], self.entity_types[k]

    def make(self, prefix: str, entity_type: str | None) -> int:
        if prefix == "O":
            return 0
        return self._ids[f"{prefix}-{entity_type}"]

    @classmethod
    def from_tags(cls, tags: Iterable[str]) -> "TagScheme":
        """Scheme whose types are those seen in ``tags``, in first-seen order."""
        types: list[str] = []
        for tag in tags:
            if tag == "O":
                continue
            if len(tag) < 3 or tag[1] != "-" or tag[0] not in PREFIXES:
                raise TagSchemeError(f"not an IOBES tag: {tag!r}")
            if tag[2:] not in types:
                types.append(tag[2:])
        return cls(tuple(types))


@dataclass(frozen=True)
class Span:
    sentence_index: int
    start: int
    end: int  # inclusive
    entity_type: str

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise CorpusError(f"bad span bounds {self.start}..{self.end}")


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    tags: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tags is not None:
            object.__setattr__(self, "tags", tuple(int(t) for t in self.tags))
            if len(self.tags) != len(self.tokens):
                raise CorpusError(
                    f"{len(self.tokens)} tokens but {len(self.tags)} tags")

    def __len__(self) -> int:
        return len(self.tokens)

    def with_tags(self, tags: Sequence[int]) -> "Sentence":
        return Sentence(self.tokens, tuple(tags))


@dataclass(frozen=True)
class Corpus:
    sentences: tuple[Sentence, ...]
    scheme: TagScheme
    name: str = "corpus"

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        n = len(self.scheme)
        for i, s in enumerate(self.sentences):
            if s.tags is not None and any(not 0 <= t < n for t in s.tags):
                raise CorpusError(f"sentence {i}: tag id outside scheme")

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Corpus":
        return Corpus(tuple(self.sentences[i] for i in indices), self.scheme,
                      name or self.name)

    def spans(self) -> list[Span]:
        out: list[Span] = []
        for i, s in enumerate(self.sentences):
            out.extend(spans_of(s, self.scheme, sentence_index=i))
        return out

    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)


# --- IOBES codec ---------------------------------------------------------


def is_valid_path(tags: Sequence[int], scheme: TagScheme) -> bool:
    open_type = None
    for t in tags:
        p, typ = scheme.parse(t)
        if p in ("O", "S", "B"):
            if open_type is not None:
                return False
            if p == "B":
                open_type = typ
        else:
            if open_type != typ:
                return False
            if p == "E":
                open_type = None
    return open_type is None


def repair_tags(tags: Sequence[int], scheme: TagScheme) -> list[int]:
    """Rewrite an arbitrary tag sequence into a valid IOBES path.

    Left to right: an I/E with no open span of its type becomes B; a span
    still open at a type change or at the end is closed on its last token
    (I -> E, lone B -> S). Valid paths are returned unchanged.
    """
    out: list[int] = []
    open_type: str | None = None

    def close():
        p, typ = scheme.parse(out[-1])
        out[-1] = scheme.make("S" if p == "B" else "E", typ)

    for t in tags:
        p, typ = scheme.parse(t)
        if p in ("I", "E") and open_type == typ:
            out.append(t)
            if p == "E":
                open_type = None
            continue
        if open_type is not None:
            close()
            open_type = None
        if p in ("I", "E"):
            out.append(scheme.make("B", typ))
            open_type = typ
        else:
            out.append(t)
            if p == "B":
                open_type = typ
    if open_type is not None:
        close()
    return out


def spans_of(sentence: Sentence, scheme: TagScheme, sentence_index: int = 0) -> list[Span]:
    if sentence.tags is None:
        raise CorpusError("sentence has no tags")
    return spans_from_tags(sentence.tags, scheme, sentence_index)


def spans_from_tags(tags: Sequence[int], scheme: TagScheme,
                    sentence_index: int = 0) -> list[Span]:
    spans = []
    start = 0
    for i, t in enumerate(repair_tags(tags, scheme)):
        p, typ = scheme.parse(t)
        if p == "B":
            start = i
        elif p == "S":
            spans.append(Span(sentence_index, i, i, typ))
        elif p == "E":
            spans.append(Span(sentence_index, start, i, typ))
    return spans


def encode_spans(n_tokens: int, spans: Iterable[Span], scheme: TagScheme) -> list[int]:
    tags = [0] * n_tokens
    for sp in sorted(spans, key=lambda s: s.start):
        if sp.end >= n_tokens:
            raise CorpusError(f"span {sp.start}..{sp.end} outside {n_tokens} tokens")
        if any(tags[i] for i in range(sp.start, sp.end + 1)):
            raise CorpusError(f"overlapping span at {sp.start}..{sp.end}")
        if sp.start == sp.end:
            tags[sp.start] = scheme.make("S", sp.entity_type)
            continue
        tags[sp.start] = scheme.make("B", sp.entity_type)
        for i in range(sp.start + 1, sp.end):
            tags[i] = scheme.make("I", sp.entity_type)
        tags[sp.end] = scheme.make("E", sp.entity_type)
    return tags


def mention_of(sentence: Sentence, span: Span) -> tuple[str, ...]:
    return normalize_mention(sentence.tokens[span.start:span.end + 1])


# --- column format -------------------------------------------------------


def parse_column_lines(lines: Iterable[str], scheme: TagScheme, name: str = "corpus",
                       lenient: bool = False) -> Corpus:
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[int] = []

    def flush():
        if not tokens:
            return
        if not is_valid_path(tags, scheme):
            if not lenient:
                raise CorpusError(
                    f"sentence {len(sentences)}: invalid IOBES transition")
            tags[:] = repair_tags(tags, scheme)
        sentences.append(Sentence(tuple(tokens), tuple(tags)))
        tokens.clear()
        tags.clear()

    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise CorpusError(f"line {lineno}: expected token<TAB>tag")
        try:
            tag_id = scheme.id_of(parts[1].strip())
        except TagSchemeError:
            raise CorpusError(f"line {lineno}: unknown tag {parts[1]!r}") from None
        tokens.append(parts[0])
        tags.append(tag_id)
    flush()
    return Corpus(tuple(sentences), scheme, name)


def load_column_corpus(path: str | Path, scheme: TagScheme, lenient: bool = False) -> Corpus:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_column_lines(fh, scheme, name=path.stem, lenient=lenient)


def scheme_of_column_file(path: str | Path) -> TagScheme:
    tags = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) == 2:
                tags.append(parts[1].strip())
    return TagScheme.from_tags(tags)


def format_column_corpus(corpus: Corpus) -> str:
    blocks = []
    for s in corpus.sentences:
        tags = s.tags if s.tags is not None else (0,) * len(s)
        blocks.append("".join(f"{tok}\t{corpus.scheme.tag_of(t)}\n"
                              for tok, t in zip(s.tokens, tags)))
    return "\n".join(blocks)


def write_column_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_column_corpus(corpus))


def read_raw_sentences(path: str | Path) -> list[Sentence]:
    """One sentence of raw text per non-blank line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = tokenize(line)
            if toks:
                out.append(Sentence(tuple(toks)))
    return out


def restrict_types(corpus: Corpus, keep: Sequence[str]) -> Corpus:
    """Project onto ``keep``: tags of other types become O, ids re-indexed."""
    missing = [t for t in keep if t not in corpus.scheme.entity_types]
    if missing:
        raise CorpusError(f"types not in scheme: {missing}")
    new_scheme = TagScheme(tuple(keep))
    out = []
    for s in corpus.sentences:
        if s.tags is None:
            out.append(s)
            continue
        tags = []
        for t in s.tags:
            p, typ = corpus.scheme.parse(t)
            tags.append(new_scheme.make(p, typ) if typ in keep else 0)
        out.append(Sentence(s.tokens, tuple(tags)))
    return Corpus(tuple(out), new_scheme, corpus.name)
