"""BIOES tagging baseline.

Entities are tagged as contiguous spans in the serialization order, so the
formulation breaks whenever the serialization interleaves an entity's words
with other text.  Linking reuses the anchor-word affinity decoding with the
B/S token of each span as its anchor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .codec import AnchorConfig, ParseResult, Predictions, link_entities
from .core import DocumentAnnotation, Entity, OcrSequence, aggregate_text, union_boxes

log = logging.getLogger(__name__)

OUTSIDE = "O"
PREFIXES = ("B", "I", "E", "S")


def tag_set(labels: Sequence[str]) -> list[str]:
    """``O`` followed by every prefix/label combination (size ``4 * len(labels) + 1``)."""
    return [OUTSIDE] + [f"{p}-{lab}" for p in PREFIXES for lab in labels]


def split_tag(tag: str) -> tuple[str, str]:
    if tag == OUTSIDE:
        return OUTSIDE, ""
    prefix, _, label = tag.partition("-")
    if prefix not in PREFIXES or not label:
        raise ValueError(f"malformed tag {tag!r}")
    return prefix, label


@dataclass
class BioesTags:
    tags: list[str]
    # labels of entities whose words are not contiguous in the serialization
    conflicts: list[str] = field(default_factory=list)

    @property
    def serialization_conflict(self) -> bool:
        return bool(self.conflicts)

    def is_valid(self) -> bool:
        spans, dropped = scan_spans(self.tags)
        return dropped == 0


def encode_bioes(doc: DocumentAnnotation) -> BioesTags:
    """Tag each entity span in the document's current word order.

    Non-contiguous spans are emitted as-is (B at the first position, E at the
    last, I in between) and recorded in ``conflicts``.
    """
    tags = [OUTSIDE] * len(doc.ocr)
    conflicts = []
    for e in doc.entities:
        pos = sorted(e.span)
        if len(pos) == 1:
            tags[pos[0]] = f"S-{e.label}"
            continue
        tags[pos[0]] = f"B-{e.label}"
        for i in pos[1:-1]:
            tags[i] = f"I-{e.label}"
        tags[pos[-1]] = f"E-{e.label}"
        if pos[-1] - pos[0] + 1 != len(pos):
            conflicts.append(e.label)
    if conflicts:
        log.debug("%s: %d entities are not contiguous", doc.doc_id, len(conflicts))
    return BioesTags(tags, conflicts)


def scan_spans(tags: Sequence[str]) -> tuple[list[tuple[str, list[int]]], int]:
    """Well-formed spans as ``(label, positions)`` and the number of dropped fragments.

    A fragment is a maximal run of tokens that does not complete a span.
    """
    spans: list[tuple[str, list[int]]] = []
    dropped = 0
    open_label, open_pos = None, []
    in_fragment = False

    def drop_open():
        nonlocal open_label, open_pos, dropped
        if open_label is not None:
            dropped += 1
        open_label, open_pos = None, []

    for i, tag in enumerate(tags):
        prefix, label = split_tag(tag)
        if prefix == "B":
            drop_open()
            open_label, open_pos = label, [i]
            in_fragment = False
        elif prefix in ("I", "E"):
            if open_label == label:
                open_pos.append(i)
                if prefix == "E":
                    spans.append((label, open_pos))
                    open_label, open_pos = None, []
            else:
                had_open = open_label is not None
                drop_open()
                if not had_open and not in_fragment:
                    dropped += 1
                in_fragment = True
        elif prefix == "S":
            drop_open()
            spans.append((label, [i]))
            in_fragment = False
        else:
            drop_open()
            in_fragment = False
    drop_open()
    return spans, dropped


def decode_bioes(tags: Sequence[str], ocr: OcrSequence) -> list[Entity]:
    if len(tags) != len(ocr):
        raise ValueError(f"{len(tags)} tags for {len(ocr)} words")
    spans, dropped = scan_spans(tags)
    if dropped:
        log.debug("dropped %d malformed tag fragments", dropped)
    out = []
    for label, pos in spans:
        words = [ocr[i] for i in pos]
        out.append(Entity(label, union_boxes(w.box for w in words), aggregate_text(words),
                          tuple(pos), anchor=pos[0]))
    return out


def iob_linking_adapter(entities: Sequence[Entity], preds: Predictions,
                        cfg: AnchorConfig) -> ParseResult:
    """Group tagged entities through the anchor-word affinity decoding (B/S tokens as anchors)."""
    keyed = {e.anchor: e for e in entities}
    result = link_entities(keyed, preds, cfg)
    result.diagnostics["tagged_entities"] = len(entities)
    return result
