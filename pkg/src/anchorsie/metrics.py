"""Parsing, entity-labeling and entity-linking scores."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .codec import EMPTY, ParseResult
from .core import DocumentAnnotation, EntityGroup

KV_MODES = ("pair", "fields")


def normalize_text(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True, order=True)
class Field:
    label: str
    text: str

    def __post_init__(self):
        if self.label == EMPTY:
            raise ValueError("a field cannot carry the empty label")
        object.__setattr__(self, "text", normalize_text(self.text))


@dataclass
class ScoreReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_class: dict[str, "ScoreReport"] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def add(self, other: "ScoreReport") -> "ScoreReport":
        out = ScoreReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)
        for k in sorted(set(self.per_class) | set(other.per_class)):
            out.per_class[k] = self.per_class.get(k, ScoreReport()).add(
                other.per_class.get(k, ScoreReport()))
        return out

    def to_json(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn,
                "per_class": {k: v.to_json() for k, v in sorted(self.per_class.items())}}

    def table(self, title: str = "") -> str:
        lines = [f"{title:<14}{'P':>8}{'R':>8}{'F1':>8}{'tp':>7}{'fp':>7}{'fn':>7}"]
        rows = [("all", self)] + sorted(self.per_class.items())
        for name, r in rows:
            lines.append(f"{name:<14}{r.precision:8.4f}{r.recall:8.4f}{r.f1:8.4f}"
                         f"{r.tp:7d}{r.fp:7d}{r.fn:7d}")
        return "\n".join(lines)


def combine(reports: Iterable[ScoreReport]) -> ScoreReport:
    out = ScoreReport()
    for r in reports:
        out = out.add(r)
    return out


def group_fields(group: EntityGroup, key_label: str = "key", kv_mode: str = "pair") -> Counter:
    """Multiset of Fields scored for one group.

    In ``pair`` mode a key-value group collapses to one field carrying the
    value's class and the value's text; the key itself is not scored.
    """
    if kv_mode not in KV_MODES:
        raise ValueError(f"kv_mode must be one of {KV_MODES}")
    if group.kind == "key_value" and kv_mode == "pair":
        values = [e for e in group.entities if e.label != key_label]
        return Counter(Field(e.label, e.text) for e in values)
    return Counter(Field(e.label, e.text) for e in group.entities)


def _as_field_groups(x, key_label: str, kv_mode: str) -> list[Counter]:
    if isinstance(x, DocumentAnnotation):
        groups = [group_fields(g, key_label, kv_mode) for g in x.groups]
    elif isinstance(x, ParseResult):
        groups = [group_fields(g, key_label, kv_mode) for g in x.groups]
        groups += [Counter([Field(e.label, e.text)]) for e in x.orphans]
    else:
        groups = [Counter(g) for g in x]
    return [g for g in groups if g]


def _overlap(a: Counter, b: Counter) -> int:
    return sum((a & b).values())


def match_groups(pred: Sequence[Counter], gt: Sequence[Counter]) -> list[tuple[int, int]]:
    """Maximum-weight one-to-one matching, weight = multiset intersection size."""
    if not pred or not gt:
        return []
    weights = np.array([[_overlap(p, g) for g in gt] for p in pred], dtype=np.int64)
    rows, cols = linear_sum_assignment(weights, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def _report_from_groups(pred: list[Counter], gt: list[Counter],
                        pairs: list[tuple[int, int]]) -> ScoreReport:
    per: dict[str, list[int]] = {}
    for g in pred:
        for f, c in g.items():
            per.setdefault(f.label, [0, 0, 0])[1] += c
    for g in gt:
        for f, c in g.items():
            per.setdefault(f.label, [0, 0, 0])[2] += c
    for i, j in pairs:
        for f, c in (pred[i] & gt[j]).items():
            per[f.label][0] += c
    report = ScoreReport()
    for label, (tp, n_pred, n_gt) in sorted(per.items()):
        sub = ScoreReport(tp, n_pred - tp, n_gt - tp)
        report.per_class[label] = sub
        report.tp += sub.tp
        report.fp += sub.fp
        report.fn += sub.fn
    return report


def parsing_f1(pred, gt, key_label: str = "key", kv_mode: str = "pair") -> ScoreReport:
    """Group-matched field F1.

    ``pred`` and ``gt`` may be ParseResult, DocumentAnnotation, or a list of
    field iterables (one per group).
    """
    p = _as_field_groups(pred, key_label, kv_mode)
    g = _as_field_groups(gt, key_label, kv_mode)
    return _report_from_groups(p, g, match_groups(p, g))


def labeling_f1(pred_labels: Sequence[str], gt_labels: Sequence[str]) -> ScoreReport:
    """Word-level micro F1; words that are empty in both are ignored."""
    if len(pred_labels) != len(gt_labels):
        raise ValueError(f"length mismatch: {len(pred_labels)} vs {len(gt_labels)}")
    report = ScoreReport()
    for p, g in zip(pred_labels, gt_labels):
        if p == g:
            if g == EMPTY:
                continue
            report.tp += 1
            report.per_class.setdefault(g, ScoreReport()).tp += 1
            continue
        if p != EMPTY:
            report.fp += 1
            report.per_class.setdefault(p, ScoreReport()).fp += 1
        if g != EMPTY:
            report.fn += 1
            report.per_class.setdefault(g, ScoreReport()).fn += 1
    return report


def linking_f1(pred_links: Iterable, gt_links: Iterable) -> ScoreReport:
    pred, gt = set(pred_links), set(gt_links)
    tp = len(pred & gt)
    return ScoreReport(tp, len(pred) - tp, len(gt) - tp)


def dumps_reports(reports: dict[str, ScoreReport]) -> str:
    return json.dumps({k: v.to_json() for k, v in reports.items()}, indent=2)
