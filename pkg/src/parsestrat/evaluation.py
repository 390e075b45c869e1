"""Phrasal surprisal aggregation and labeled bracketing F1."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .treebank import Tree


class SegmentationMismatch(ValueError):
    pass


class YieldMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SurprisalRow:
    segment_id: str
    phrase: str
    surprisal: float
    subword_surprisals: tuple[float, ...]
    unk: bool


@dataclass
class SurprisalTable:
    rows: list[SurprisalRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def extend(self, other: "SurprisalTable") -> None:
        self.rows.extend(other.rows)

    def as_dict(self) -> dict[str, SurprisalRow]:
        return {r.segment_id: r for r in self.rows}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["segment_id", "phrase", "surprisal", "subword_surprisals", "unk"])
            for r in self.rows:
                w.writerow([r.segment_id, r.phrase, repr(r.surprisal),
                            " ".join(repr(x) for x in r.subword_surprisals), int(r.unk)])

    @classmethod
    def read_csv(cls, path) -> "SurprisalTable":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                subs = tuple(float(x) for x in rec["subword_surprisals"].split())
                rows.append(SurprisalRow(rec["segment_id"], rec["phrase"], float(rec["surprisal"]),
                                         subs, rec["unk"] == "1"))
        return cls(rows)


def phrasal_surprisal(
    surprisals: Sequence[float],
    lengths: Sequence[int],
    segment_ids: Sequence[str] | None = None,
    phrases: Sequence[str] | None = None,
    unk_flags: Sequence[bool] | None = None,
) -> SurprisalTable:
    """Sum subword surprisals within each segment, left to right."""
    if sum(lengths) != len(surprisals) or any(n < 1 for n in lengths):
        raise SegmentationMismatch(f"{len(surprisals)} subwords vs segment lengths {list(lengths)}")
    n = len(lengths)
    segment_ids = segment_ids or [str(i) for i in range(n)]
    phrases = phrases or [""] * n
    unk_flags = unk_flags or [False] * n
    if not len(segment_ids) == len(phrases) == len(unk_flags) == n:
        raise SegmentationMismatch("per-segment fields disagree in length")
    rows, pos = [], 0
    for i, k in enumerate(lengths):
        parts = tuple(float(x) for x in surprisals[pos:pos + k])
        total = 0.0
        for x in parts:
            total += x
        rows.append(SurprisalRow(segment_ids[i], phrases[i], total, parts, bool(unk_flags[i])))
        pos += k
    return SurprisalTable(rows)


def labeled_spans(tree: Tree) -> Counter:
    """Multiset of (label, start, end) over internal nodes, root included."""
    spans: Counter = Counter()

    def walk(node, start):
        if not isinstance(node, Tree):
            return start + 1
        end = start
        for child in node.children:
            end = walk(child, end)
        spans[node.label, start, end] += 1
        return end

    walk(tree, 0)
    return spans


@dataclass
class F1Report:
    precision: float
    recall: float
    f1: float
    matched: int
    gold: int
    predicted: int
    sentences: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _prf(matched: int, gold: int, pred: int) -> tuple[float, float, float]:
    p = matched / pred if pred else 0.0
    r = matched / gold if gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def labeled_f1(gold: Tree, predicted: Tree) -> F1Report:
    if gold.leaves() != predicted.leaves():
        raise YieldMismatch(f"{gold.leaves()} vs {predicted.leaves()}")
    g, p = labeled_spans(gold), labeled_spans(predicted)
    matched = sum((g & p).values())
    ng, np_ = sum(g.values()), sum(p.values())
    return F1Report(*_prf(matched, ng, np_), matched, ng, np_)


def corpus_f1(pairs: Iterable[tuple[Tree, Tree]]) -> F1Report:
    """Micro-averaged F1 from pooled span counts, with per-sentence values attached."""
    m = g = p = 0
    per = []
    for i, (gold, pred) in enumerate(pairs):
        r = labeled_f1(gold, pred)
        m, g, p = m + r.matched, g + r.gold, p + r.predicted
        per.append({"index": i, "precision": r.precision, "recall": r.recall, "f1": r.f1})
    return F1Report(*_prf(m, g, p), m, g, p, per)
