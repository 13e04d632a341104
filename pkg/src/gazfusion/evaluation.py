"""Exact-match span micro-F1, per-type breakdown and mention-filtered scoring."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .corpus import Corpus, CorpusError, Span, mention_of, normalize_mention, spans_of


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class TypeScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    tp: int
    fp: int
    fn: int
    per_type: dict[str, TypeScore] = field(default_factory=dict)
    filter: str | None = None

    @property
    def support(self) -> int:
        return self.tp + self.fn

    def record(self) -> dict:
        rec = {
            "micro_precision": round(self.micro_precision, 10),
            "micro_recall": round(self.micro_recall, 10),
            "micro_f1": round(self.micro_f1, 10),
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "filter": self.filter,
        }
        for t, s in sorted(self.per_type.items()):
            rec[f"{t}.precision"] = round(s.precision, 10)
            rec[f"{t}.recall"] = round(s.recall, 10)
            rec[f"{t}.f1"] = round(s.f1, 10)
            rec[f"{t}.support"] = s.support
        return rec

    def table(self) -> str:
        rows = [("type", "P", "R", "F1", "support")]
        for t, s in sorted(self.per_type.items()):
            rows.append((t, f"{s.precision:.4f}", f"{s.recall:.4f}", f"{s.f1:.4f}", str(s.support)))
        rows.append(("micro", f"{self.micro_precision:.4f}", f"{self.micro_recall:.4f}",
                     f"{self.micro_f1:.4f}", str(self.support)))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                           for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
        if self.filter:
            lines.insert(0, f"filter: {self.filter}")
        return "\n".join(lines)


def span_key(span: Span) -> tuple:
    return (span.sentence_index, span.start, span.end, span.entity_type)


def score_span_sets(pred: Iterable[tuple], gold: Iterable[tuple],
                    types: Iterable[str] = (), filter: str | None = None) -> EvalReport:
    """Score sets of ``(sentence, start, end, type)`` tuples."""
    pred, gold = set(pred), set(gold)
    tp_set = pred & gold
    tp, fp, fn = len(tp_set), len(pred - gold), len(gold - pred)
    p, r, f = prf(tp, fp, fn)
    per_type = {}
    tp_t = Counter(k[3] for k in tp_set)
    pred_t = Counter(k[3] for k in pred)
    gold_t = Counter(k[3] for k in gold)
    for t in sorted(set(types) | set(pred_t) | set(gold_t)):
        tp_i = tp_t[t]
        pi, ri, fi = prf(tp_i, pred_t[t] - tp_i, gold_t[t] - tp_i)
        per_type[t] = TypeScore(pi, ri, fi, gold_t[t])
    return EvalReport(p, r, f, tp, fp, fn, per_type, filter)


def _check_aligned(pred: Corpus, gold: Corpus) -> None:
    if len(pred) != len(gold):
        raise CorpusError(f"corpus mismatch: {len(pred)} predicted vs {len(gold)} gold sentences")
    if pred.scheme.entity_types != gold.scheme.entity_types:
        raise CorpusError("corpus mismatch: tag schemes differ")
    for i, (a, b) in enumerate(zip(pred, gold)):
        if len(a) != len(b):
            raise CorpusError(f"corpus mismatch: sentence {i} has {len(a)} vs {len(b)} tokens")


def evaluate_filtered(pred: Corpus, gold: Corpus,
                      keep: Callable[[tuple[str, ...]], bool] | None,
                      filter: str | None = None, filter_predictions: bool = True
                      ) -> EvalReport:
    _check_aligned(pred, gold)
    pred_keys, gold_keys = [], []
    for corpus, out, filtered in ((pred, pred_keys, filter_predictions), (gold, gold_keys, True)):
        for i, s in enumerate(corpus):
            for sp in spans_of(s, corpus.scheme, i):
                if keep is None or not filtered or keep(mention_of(s, sp)):
                    out.append(span_key(sp))
    return score_span_sets(pred_keys, gold_keys, gold.scheme.entity_types, filter)


def evaluate(pred: Corpus, gold: Corpus) -> EvalReport:
    return evaluate_filtered(pred, gold, None)


def seen_mentions(*corpora: Corpus) -> set[tuple[str, ...]]:
    """Normalized surface forms of every gold span in ``corpora``."""
    out = set()
    for corpus in corpora:
        for i, s in enumerate(corpus):
            for sp in spans_of(s, corpus.scheme, i):
                out.add(mention_of(s, sp))
    return out


def evaluate_unseen(pred: Corpus, gold: Corpus, seen: Iterable,
                    filter_predictions: bool = True) -> EvalReport:
    """Score only spans whose surface form is outside ``seen``.

    With ``filter_predictions`` off, every predicted span counts against the
    filtered gold set.
    """
    seen_norm = {normalize_mention(m) for m in seen}
    return evaluate_filtered(pred, gold, lambda m: m not in seen_norm, "unseen",
                             filter_predictions)


def evaluate_pool(pred: Corpus, gold: Corpus, pool: Iterable) -> EvalReport:
    """Score only spans whose surface form belongs to ``pool``."""
    pool_norm = {normalize_mention(m) for m in pool}
    return evaluate_filtered(pred, gold, lambda m: m in pool_norm, "pool")
