"""Geometry and document primitives.

Boxes are normalized to the page (``[0, 1]`` on both axes) and stored in
center-size form.  Corner form is used for I/O and for overlap math.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

_EPS = 1e-9

ORDER_MODES = ("raster_scan", "oracle", "as_given")
GROUP_KINDS = ("line_item", "key_value", "singleton")


def _check_unit(name: str, value: float) -> None:
    if not (-_EPS <= value <= 1.0 + _EPS):
        raise ValueError(f"{name}={value!r} outside [0, 1]")


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            _check_unit(name, getattr(self, name))

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        if x1 < x0 or y1 < y0:
            raise ValueError(f"inverted corners ({x0}, {y0}, {x1}, {y1})")
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def contains_point(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.corners
        return x0 - _EPS <= x <= x1 + _EPS and y0 - _EPS <= y <= y1 + _EPS

    def union(self, other: "BBox") -> "BBox":
        a, b = self.corners, other.corners
        return BBox.from_corners(min(a[0], b[0]), min(a[1], b[1]),
                                 max(a[2], b[2]), max(a[3], b[3]))

    def shifted(self, dx: float = 0.0, dy: float = 0.0) -> "BBox":
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)


def union_boxes(boxes: Iterable[BBox]) -> BBox:
    boxes = list(boxes)
    if not boxes:
        raise ValueError("union of zero boxes")
    out = boxes[0]
    for b in boxes[1:]:
        out = out.union(b)
    return out


def _overlap_terms(a: BBox, b: BBox) -> tuple[float, float, float]:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, hull


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    inter, union, _ = _overlap_terms(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: ``iou - (hull - union) / hull``.

    A degenerate hull (both boxes the same point) contributes no penalty.
    """
    inter, union, hull = _overlap_terms(a, b)
    value = inter / union if union > 0.0 else 0.0
    if hull > 0.0:
        value -= (hull - union) / hull
    return value


@dataclass(frozen=True)
class OcrWord:
    index: int
    text: str
    box: BBox

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"word {self.index} has empty text")


@dataclass(frozen=True)
class OcrSequence:
    words: tuple[OcrWord, ...] = ()
    order_mode: str = "as_given"

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if self.order_mode not in ORDER_MODES:
            raise ValueError(f"unknown order_mode {self.order_mode!r}")
        for pos, w in enumerate(self.words):
            if w.index != pos:
                raise ValueError(f"word at position {pos} carries index {w.index}")

    def __len__(self) -> int:
        return len(self.words)

    def __iter__(self):
        return iter(self.words)

    def __getitem__(self, i: int) -> OcrWord:
        return self.words[i]

    @property
    def texts(self) -> list[str]:
        return [w.text for w in self.words]


def default_row_tolerance(words: Sequence[OcrWord]) -> float:
    """Half the median word height (0 for an empty list)."""
    if not words:
        return 0.0
    return 0.5 * statistics.median(w.box.h for w in words)


def raster_row_ids(words: Sequence[OcrWord], row_tolerance: float) -> dict[int, int]:
    """Single-linkage row clustering on center-y.

    A new row starts wherever consecutive sorted center-y values are more
    than ``row_tolerance`` apart.  Returns ``{word.index: row_id}``.
    """
    ordered = sorted(words, key=lambda w: (w.box.cy, w.index))
    rows: dict[int, int] = {}
    row = -1
    prev = None
    for w in ordered:
        if prev is None or w.box.cy - prev > row_tolerance:
            row += 1
        rows[w.index] = row
        prev = w.box.cy
    return rows


def raster_keys(words: Sequence[OcrWord], row_tolerance: float | None = None) -> dict[int, tuple]:
    if row_tolerance is None:
        row_tolerance = default_row_tolerance(words)
    rows = raster_row_ids(words, row_tolerance)
    return {w.index: (rows[w.index], w.box.cx, w.index) for w in words}


def raster_sorted(words: Sequence[OcrWord], row_tolerance: float | None = None) -> list[OcrWord]:
    keys = raster_keys(words, row_tolerance)
    return sorted(words, key=lambda w: keys[w.index])


def order_raster(words: Sequence[OcrWord], row_tolerance: float | None = None) -> OcrSequence:
    """Sort words top-to-bottom by row, then left-to-right; re-index 0..N-1."""
    ordered = raster_sorted(words, row_tolerance)
    return OcrSequence(tuple(replace(w, index=i) for i, w in enumerate(ordered)),
                       order_mode="raster_scan")


def words_in_box(box: BBox, ocr: OcrSequence | Sequence[OcrWord],
                 row_tolerance: float | None = None) -> list[OcrWord]:
    """Words whose box center lies inside ``box`` (inclusive), raster ordered."""
    words = list(ocr)
    if row_tolerance is None:
        row_tolerance = default_row_tolerance(words)
    hits = [w for w in words if box.contains_point(w.box.cx, w.box.cy)]
    return raster_sorted(hits, row_tolerance)


def aggregate_text(words: Iterable[OcrWord]) -> str:
    return " ".join(w.text for w in words)


@dataclass(frozen=True)
class Entity:
    label: str
    box: BBox
    text: str = ""
    span: tuple[int, ...] = ()
    # token index of the word that represents this entity, when decoded
    anchor: int | None = None


@dataclass(frozen=True)
class EntityGroup:
    primary: Entity
    secondaries: tuple[Entity, ...] = ()
    kind: str = "line_item"

    def __post_init__(self):
        object.__setattr__(self, "secondaries", tuple(self.secondaries))
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")

    @property
    def entities(self) -> tuple[Entity, ...]:
        return (self.primary,) + self.secondaries


@dataclass(frozen=True)
class DocumentAnnotation:
    ocr: OcrSequence
    groups: tuple[EntityGroup, ...] = ()
    page_size: tuple[float, float] = (1000.0, 1000.0)
    doc_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        n = len(self.ocr)
        seen: set[int] = set()
        for g in self.groups:
            for e in g.entities:
                for i in e.span:
                    if not 0 <= i < n:
                        raise ValueError(f"entity {e.label!r} references word {i} of {n}")
                    if i in seen:
                        raise ValueError(f"word {i} belongs to more than one entity")
                    seen.add(i)

    @property
    def entities(self) -> list[Entity]:
        return [e for g in self.groups for e in g.entities]


def _remap_entity(e: Entity, mapping: dict[int, int]) -> Entity:
    return replace(e, span=tuple(sorted(mapping[i] for i in e.span)),
                   anchor=None if e.anchor is None else mapping[e.anchor])


def permute_document(doc: DocumentAnnotation, order: Sequence[int],
                     order_mode: str = "as_given") -> DocumentAnnotation:
    """Reorder OCR words so that new position ``k`` holds old word ``order[k]``."""
    if sorted(order) != list(range(len(doc.ocr))):
        raise ValueError("order is not a permutation of the word indices")
    mapping = {old: new for new, old in enumerate(order)}
    words = tuple(replace(doc.ocr[old], index=new) for new, old in enumerate(order))
    groups = tuple(
        EntityGroup(_remap_entity(g.primary, mapping),
                    tuple(_remap_entity(e, mapping) for e in g.secondaries), g.kind)
        for g in doc.groups)
    return replace(doc, ocr=OcrSequence(words, order_mode), groups=groups)


def raster_permutation(words: Sequence[OcrWord], row_tolerance: float | None = None) -> list[int]:
    return [w.index for w in raster_sorted(words, row_tolerance)]


def oracle_permutation(doc: DocumentAnnotation, row_tolerance: float | None = None) -> list[int]:
    """Entities ordered by raster position of their first word, each kept contiguous.

    Words inside an entity stay in raster order; words outside any entity are
    single-word units placed by their own raster position.
    """
    words = list(doc.ocr)
    keys = raster_keys(words, row_tolerance)
    units: list[list[int]] = []
    covered: set[int] = set()
    for e in doc.entities:
        members = sorted(e.span, key=lambda i: keys[i])
        units.append(members)
        covered.update(members)
    units.extend([w.index] for w in words if w.index not in covered)
    units.sort(key=lambda u: keys[u[0]])
    return [i for u in units for i in u]


def serialize(doc: DocumentAnnotation, mode: str = "raster_scan",
              row_tolerance: float | None = None) -> DocumentAnnotation:
    """Return ``doc`` with its OCR words in the requested serialization."""
    if mode in ("raster_scan", "raster"):
        return permute_document(doc, raster_permutation(list(doc.ocr), row_tolerance), "raster_scan")
    if mode == "oracle":
        return permute_document(doc, oracle_permutation(doc, row_tolerance), "oracle")
    if mode == "as_given":
        return doc
    raise ValueError(f"unknown serialization {mode!r}")
