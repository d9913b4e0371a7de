"""Anchor-word codec.

``encode_targets`` turns a grouped annotation into per-token supervision
(anchor class, role, box, primary flag, link matrix).  ``decode_predictions``
turns per-token model outputs back into grouped entities.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (BBox, DocumentAnnotation, Entity, EntityGroup, OcrSequence,
                   aggregate_text, default_row_tolerance, iou, raster_keys,
                   union_boxes, words_in_box)

log = logging.getLogger(__name__)

EMPTY = "<empty>"
ANCHOR_MODES = ("first", "last", "first_last")
PRIMARY_RULES = ("by_class", "first_entity")


class AnchorError(ValueError):
    """Raised when an annotation cannot be encoded under an AnchorConfig."""


@dataclass(frozen=True)
class AnchorConfig:
    labels: tuple[str, ...] = ("store", "key", "date", "time", "cashier", "table",
                               "name", "count", "unit_price", "price",
                               "subtotal", "tax", "total")
    anchor_mode: str = "first"
    primary_rule: str = "by_class"
    primary_label: str = "name"
    key_label: str = "key"
    singleton_labels: tuple[str, ...] = ("store",)
    link_threshold: float = 0.5
    primary_threshold: float = 0.5
    # duplicate anchors of one class whose boxes overlap this much are suppressed
    nms_iou: float = 0.9
    # a decoded last anchor joins a first anchor of its class above this IoU
    merge_iou: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "singleton_labels", tuple(self.singleton_labels))
        if self.anchor_mode not in ANCHOR_MODES:
            raise ValueError(f"anchor_mode must be one of {ANCHOR_MODES}")
        if self.primary_rule not in PRIMARY_RULES:
            raise ValueError(f"primary_rule must be one of {PRIMARY_RULES}")
        if EMPTY in self.labels or len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be unique and must not contain the empty label")
        for name in ("link_threshold", "primary_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")

    @property
    def class_set(self) -> tuple[str, ...]:
        return (EMPTY,) + self.labels

    @property
    def roles(self) -> tuple[str, ...]:
        return {"first": ("first",), "last": ("last",),
                "first_last": ("first", "last")}[self.anchor_mode]

    @property
    def key_role(self) -> str:
        """Role of the token that represents an entity for linking."""
        return "last" if self.anchor_mode == "last" else "first"

    @property
    def head_classes(self) -> tuple[tuple[str, str], ...]:
        """Classes of the anchor head: ``(label, role)`` pairs after the empty class."""
        return ((EMPTY, "none"),) + tuple((lab, r) for r in self.roles for lab in self.labels)

    @property
    def num_head_classes(self) -> int:
        return len(self.head_classes)

    def head_index(self, label: str, role: str) -> int:
        if label == EMPTY:
            return 0
        return 1 + self.roles.index(role) * len(self.labels) + self.labels.index(label)

    def group_kind(self, primary_label: str) -> str:
        if primary_label == self.key_label:
            return "key_value"
        if primary_label in self.singleton_labels:
            return "singleton"
        return "line_item"


@dataclass
class AnchorTargets:
    """Per-token supervision for one document (arrays are aligned to OCR order)."""
    head_class: np.ndarray          # (N,) int index into AnchorConfig.head_classes
    anchor_class: list[str]         # (N,) label or EMPTY
    anchor_role: list[str]          # (N,) none / first / last
    boxes: np.ndarray               # (N, 4) center-size; zeros where EMPTY
    box_mask: np.ndarray            # (N,) bool
    is_primary: np.ndarray          # (N,) float 0/1
    primary_tokens: np.ndarray      # (m,) token indices, ascending
    secondary_tokens: np.ndarray    # (n,) token indices, ascending
    link_matrix: np.ndarray         # (m, n) float 0/1

    def __len__(self) -> int:
        return len(self.anchor_class)


@dataclass
class Predictions:
    """Per-token outputs in probability space, aligned to OCR order.

    ``affinity[i, j]`` is the linking score of token ``i`` as a primary and
    token ``j`` as a secondary; the decoder selects the m x n sub-matrix.
    """
    class_probs: np.ndarray     # (N, K)
    boxes: np.ndarray           # (N, 4) center-size
    primary_probs: np.ndarray   # (N,)
    affinity: np.ndarray        # (N, N)

    def __len__(self) -> int:
        return self.class_probs.shape[0]


@dataclass
class ParseResult:
    groups: list[EntityGroup] = field(default_factory=list)
    orphans: list[Entity] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "groups": [{"kind": g.kind, "fields": [entity_to_json(e) for e in g.entities]}
                       for g in self.groups],
            "orphans": [entity_to_json(e) for e in self.orphans],
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @property
    def entities(self) -> list[Entity]:
        return [e for g in self.groups for e in g.entities] + list(self.orphans)


def entity_to_json(e: Entity) -> dict:
    return {"label": e.label, "text": e.text,
            "box": [round(v, 6) for v in e.box.corners]}


def primary_of(group: EntityGroup, cfg: AnchorConfig, keys: dict[int, tuple]) -> Entity:
    """Primary entity of ``group`` under the configured rule."""
    if group.kind == "key_value":
        keyed = [e for e in group.entities if e.label == cfg.key_label]
        return keyed[0] if keyed else group.primary
    if group.kind == "singleton" or not group.secondaries:
        return group.primary
    if cfg.primary_rule == "by_class":
        named = [e for e in group.entities if e.label == cfg.primary_label]
        if not named:
            labels = [e.label for e in group.entities]
            raise AnchorError(f"group {labels} has no {cfg.primary_label!r} entity")
        return named[0]
    return min(group.entities, key=lambda e: min(keys[i] for i in e.span))


def encode_targets(doc: DocumentAnnotation, cfg: AnchorConfig) -> AnchorTargets:
    n_tok = len(doc.ocr)
    keys = raster_keys(list(doc.ocr))
    head = np.zeros(n_tok, dtype=np.int64)
    anchor_class = [EMPTY] * n_tok
    anchor_role = ["none"] * n_tok
    boxes = np.zeros((n_tok, 4), dtype=np.float64)
    is_primary = np.zeros(n_tok, dtype=np.float64)
    group_keys: list[tuple[int, list[int]]] = []

    seen: set[int] = set()
    for group in doc.groups:
        primary = primary_of(group, cfg, keys)
        prim_tok = None
        sec_toks = []
        for e in group.entities:
            if not e.span:
                raise AnchorError(f"entity {e.label!r} has an empty span")
            if seen.intersection(e.span):
                raise AnchorError(f"entity {e.label!r} overlaps another entity")
            seen.update(e.span)
            if e.label not in cfg.labels:
                raise AnchorError(f"label {e.label!r} not in the class set")
            ordered = sorted(e.span, key=lambda i: keys[i])
            first, last = ordered[0], ordered[-1]
            slots = {"first": first, "last": last}
            for role in cfg.roles:
                tok = slots[role]
                if anchor_role[tok] != "none":
                    # single-word entity in first_last mode: one token, first role
                    continue
                head[tok] = cfg.head_index(e.label, role)
                anchor_class[tok] = e.label
                anchor_role[tok] = role
                boxes[tok] = e.box.as_tuple()
            key_tok = slots[cfg.key_role]
            if e is primary:
                prim_tok = key_tok
                is_primary[key_tok] = 1.0
            else:
                sec_toks.append(key_tok)
        group_keys.append((prim_tok, sec_toks))

    primary_tokens = np.array(sorted(p for p, _ in group_keys), dtype=np.int64)
    secondary_tokens = np.array(sorted(s for _, ss in group_keys for s in ss), dtype=np.int64)
    row = {t: i for i, t in enumerate(primary_tokens.tolist())}
    col = {t: j for j, t in enumerate(secondary_tokens.tolist())}
    link = np.zeros((len(primary_tokens), len(secondary_tokens)), dtype=np.float64)
    for p, ss in group_keys:
        for s in ss:
            link[row[p], col[s]] = 1.0
    return AnchorTargets(head, anchor_class, anchor_role, boxes, head > 0, is_primary,
                         primary_tokens, secondary_tokens, link)


def perfect_predictions(targets: AnchorTargets, ocr: OcrSequence, cfg: AnchorConfig) -> Predictions:
    """Predictions that reproduce ``targets`` exactly (used for round-trip checks)."""
    n_tok = len(targets)
    probs = np.zeros((n_tok, cfg.num_head_classes))
    probs[np.arange(n_tok), targets.head_class] = 1.0
    boxes = np.array([w.box.as_tuple() for w in ocr], dtype=np.float64).reshape(n_tok, 4)
    boxes[targets.box_mask] = targets.boxes[targets.box_mask]
    aff = np.zeros((n_tok, n_tok))
    for i, p in enumerate(targets.primary_tokens):
        for j, s in enumerate(targets.secondary_tokens):
            aff[p, s] = targets.link_matrix[i, j]
    return Predictions(probs, boxes, targets.is_primary.copy(), aff)


def aggregate_entity_text(box: BBox, ocr: OcrSequence, row_tolerance: float | None = None) -> str:
    return aggregate_text(words_in_box(box, ocr, row_tolerance))


def _box(row: Sequence[float]) -> BBox:
    cx, cy, w, h = (float(np.clip(v, 0.0, 1.0)) for v in row)
    return BBox(cx, cy, w, h)


def decode_predictions(preds: Predictions, ocr: OcrSequence, cfg: AnchorConfig) -> ParseResult:
    n_tok = len(ocr)
    if len(preds) != n_tok or preds.boxes.shape != (n_tok, 4) \
            or preds.affinity.shape != (n_tok, n_tok) or preds.primary_probs.shape != (n_tok,):
        raise ValueError(f"predictions do not align with {n_tok} OCR tokens")
    if preds.class_probs.shape[1] != cfg.num_head_classes:
        raise ValueError(f"expected {cfg.num_head_classes} classes, got {preds.class_probs.shape[1]}")
    tol = default_row_tolerance(list(ocr))
    heads = cfg.head_classes
    cls = preds.class_probs.argmax(axis=1)
    conf = preds.class_probs.max(axis=1)

    keyed: list[dict] = []
    trailing: list[dict] = []
    for t in range(n_tok):
        if cls[t] == 0:
            continue
        label, role = heads[cls[t]]
        cand = {"tok": t, "label": label, "prob": float(conf[t]), "box": _box(preds.boxes[t])}
        (keyed if role == cfg.key_role else trailing).append(cand)

    # duplicate suppression among entity-keying anchors
    kept: list[dict] = []
    suppressed = 0
    for cand in sorted(keyed, key=lambda c: (-c["prob"], c["tok"])):
        if any(k["label"] == cand["label"] and iou(k["box"], cand["box"]) > cfg.nms_iou for k in kept):
            suppressed += 1
            continue
        kept.append(cand)
    kept.sort(key=lambda c: c["tok"])

    merged = discarded = 0
    for cand in trailing:
        best, best_iou = None, cfg.merge_iou
        for k in kept:
            if k["label"] != cand["label"]:
                continue
            v = iou(k["box"], cand["box"])
            if v > best_iou:
                best, best_iou = k, v
        if best is None:
            discarded += 1
        else:
            best["box"] = best["box"].union(cand["box"])
            merged += 1

    entities = {}
    for k in kept:
        words = words_in_box(k["box"], ocr, tol)
        entities[k["tok"]] = Entity(k["label"], k["box"], aggregate_text(words),
                                    tuple(sorted(w.index for w in words)), anchor=k["tok"])

    result = link_entities(entities, preds, cfg)
    result.diagnostics.update({"anchors": len(keyed) + len(trailing), "suppressed": suppressed,
                               "merged_last": merged, "discarded_last": discarded})
    return result


def link_entities(entities: dict[int, Entity], preds: Predictions, cfg: AnchorConfig) -> ParseResult:
    """Group entities keyed by anchor token using primary scores and affinities.

    Each secondary joins the primary with the highest affinity when that
    affinity exceeds ``cfg.link_threshold``; otherwise it is an orphan.
    """
    prim = [t for t in sorted(entities) if preds.primary_probs[t] > cfg.primary_threshold]
    prim_set = set(prim)
    sec = [t for t in sorted(entities) if t not in prim_set]
    members: dict[int, list[int]] = {p: [] for p in prim}
    orphans = []
    links = 0
    if prim and sec:
        sub = preds.affinity[np.ix_(prim, sec)]
        best_rows = sub.argmax(axis=0)
        for j, s in enumerate(sec):
            i = int(best_rows[j])
            if sub[i, j] > cfg.link_threshold:
                members[prim[i]].append(s)
                links += 1
            else:
                orphans.append(entities[s])
    else:
        orphans = [entities[s] for s in sec]

    groups = []
    for p in prim:
        e = entities[p]
        groups.append(EntityGroup(e, tuple(entities[s] for s in members[p]), cfg.group_kind(e.label)))
    return ParseResult(groups, orphans, {"entities": len(entities), "links": links})


def entity_token_labels(entities: Sequence[Entity], n_tok: int) -> list[str]:
    """Word-level labels implied by entity spans (first claimant wins)."""
    out = [EMPTY] * n_tok
    for e in entities:
        for i in e.span:
            if out[i] == EMPTY:
                out[i] = e.label
    return out


def parse_links(result: ParseResult) -> set[tuple[int, int]]:
    """Decoded links as ``(primary anchor token, secondary anchor token)`` pairs."""
    return {(g.primary.anchor, s.anchor) for g in result.groups for s in g.secondaries}


def target_links(targets: AnchorTargets) -> set[tuple[int, int]]:
    rows, cols = np.nonzero(targets.link_matrix)
    return {(int(targets.primary_tokens[i]), int(targets.secondary_tokens[j]))
            for i, j in zip(rows, cols)}
