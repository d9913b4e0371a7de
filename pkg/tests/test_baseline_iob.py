import numpy as np
import pytest
from hypothesis import given, strategies as st

from anchorsie.baseline_iob import (OUTSIDE, decode_bioes, encode_bioes, iob_linking_adapter,
                                    scan_spans, split_tag, tag_set)
from anchorsie.codec import AnchorConfig, decode_predictions, encode_targets, perfect_predictions
from anchorsie.core import (BBox, DocumentAnnotation, Entity, EntityGroup, OcrSequence, OcrWord,
                            aggregate_text, serialize, union_boxes)
from anchorsie.data import SynthConfig, synth_generate
from anchorsie.metrics import parsing_f1

LABELS = ["name", "count", "price"]


def wrapped_item_doc():
    """Item name wrapping onto a second row, with count and price on the first row."""
    specs = [("Chicken", .05, .30), ("Katsu", .20, .30), ("2", .55, .30), ("$5.00", .85, .30),
             ("Curry", .05, .34)]
    ws = tuple(OcrWord(i, t, BBox(x, y, .1, .03)) for i, (t, x, y) in enumerate(specs))

    def ent(label, span):
        return Entity(label, union_boxes(ws[i].box for i in span), aggregate_text(ws[i] for i in span), tuple(span))

    g = EntityGroup(ent("name", [0, 1, 4]), (ent("count", [2]), ent("price", [3])))
    return DocumentAnnotation(OcrSequence(ws), (g,))


def test_tag_set_size():
    assert len(tag_set(LABELS)) == 4 * len(LABELS) + 1
    assert split_tag("B-name") == ("B", "name")
    with pytest.raises(ValueError):
        split_tag("Q-name")


def test_encode_multiword_and_single():
    ws = tuple(OcrWord(i, t, BBox(.1 + .2 * i, .5, .1, .03)) for i, t in enumerate(["Chicken", "Katsu", "Curry", "2"]))
    ocr = OcrSequence(ws)
    name = Entity("name", union_boxes(w.box for w in ws[:3]), "Chicken Katsu Curry", (0, 1, 2))
    count = Entity("count", ws[3].box, "2", (3,))
    tags = encode_bioes(DocumentAnnotation(ocr, (EntityGroup(name, (count,)),)))
    assert tags.tags == ["B-name", "I-name", "E-name", "S-count"]
    assert not tags.serialization_conflict and tags.is_valid()


def test_raster_split_entity_flags_conflict():
    doc = serialize(wrapped_item_doc(), "raster_scan")
    tags = encode_bioes(doc)
    assert tags.serialization_conflict
    assert tags.conflicts == ["name"]
    assert tags.tags == ["B-name", "I-name", "S-count", "S-price", "E-name"]
    assert not tags.is_valid()
    oracle = encode_bioes(serialize(wrapped_item_doc(), "oracle"))
    assert not oracle.serialization_conflict


def test_malformed_fragments_dropped():
    spans, dropped = scan_spans(["B-name", OUTSIDE, "E-name"])
    assert spans == [] and dropped == 2
    spans, dropped = scan_spans(["I-name", "E-name", "S-count"])
    assert spans == [("count", [2])] and dropped == 1
    ocr = OcrSequence(tuple(OcrWord(i, f"w{i}", BBox(.1 * (i + 1), .5, .05, .03)) for i in range(3)))
    assert decode_bioes(["B-name", OUTSIDE, "E-name"], ocr) == []
    with pytest.raises(ValueError):
        decode_bioes(["O"], ocr)


def _reference_spans(tags):
    """Independent span scanner: regex-like walk accepting only S or B I* E."""
    out, i = [], 0
    while i < len(tags):
        t = tags[i]
        if t.startswith("S-"):
            out.append((t[2:], [i]))
            i += 1
        elif t.startswith("B-"):
            lab, j = t[2:], i + 1
            while j < len(tags) and tags[j] == f"I-{lab}":
                j += 1
            if j < len(tags) and tags[j] == f"E-{lab}":
                out.append((lab, list(range(i, j + 1))))
                i = j + 1
            else:
                i = j if j > i + 1 else i + 1
        else:
            i += 1
    return out


@st.composite
def valid_taggings(draw):
    tags = []
    for _ in range(draw(st.integers(0, 8))):
        kind = draw(st.sampled_from(["O", "S", "M"]))
        lab = draw(st.sampled_from(LABELS))
        if kind == "O":
            tags.append(OUTSIDE)
        elif kind == "S":
            tags.append(f"S-{lab}")
        else:
            n = draw(st.integers(0, 3))
            tags += [f"B-{lab}"] + [f"I-{lab}"] * n + [f"E-{lab}"]
    return tags


@given(valid_taggings())
def test_scanner_matches_reference_on_valid(tags):
    spans, dropped = scan_spans(tags)
    assert dropped == 0
    assert spans == _reference_spans(tags)


@given(st.lists(st.sampled_from(tag_set(LABELS)), max_size=10))
def test_scanner_spans_match_reference_on_arbitrary(tags):
    # maximal well-formed spans agree with the reference even when fragments are present
    assert scan_spans(tags)[0] == _reference_spans(tags)


def test_roundtrip_contiguous(synth_docs):
    for doc in synth_docs[:20]:
        o = serialize(doc, "oracle")
        ents = decode_bioes(encode_bioes(o).tags, o.ocr)
        assert sorted((e.label, e.text, e.span) for e in ents) == \
            sorted((e.label, e.text, tuple(sorted(e.span))) for e in o.entities)


def _perfect_adapter_parse(doc, cfg, tags=None):
    targets = encode_targets(doc, cfg)
    preds = perfect_predictions(targets, doc.ocr, cfg)
    tags = tags if tags is not None else encode_bioes(doc).tags
    return iob_linking_adapter(decode_bioes(tags, doc.ocr), preds, cfg)


def test_adapter_perfect_parse(synth_docs):
    cfg = AnchorConfig(anchor_mode="first")
    for doc in synth_docs[:15]:
        o = serialize(doc, "oracle")
        assert parsing_f1(_perfect_adapter_parse(o, cfg), o).f1 == 1.0


def test_single_corrupted_tag_loses_entity():
    cfg = AnchorConfig(anchor_mode="first")
    doc = serialize(wrapped_item_doc(), "oracle")
    tags = encode_bioes(doc).tags
    assert tags[0] == "B-name"
    tags[0] = "I-name"
    res = _perfect_adapter_parse(doc, cfg, tags)
    assert "name" not in [e.label for e in res.entities]


def test_anchor_formulation_beats_bioes_on_interleaved_raster():
    cfg = AnchorConfig(anchor_mode="first")
    docs = synth_generate(SynthConfig(seed=12, n_docs=40, wrap_prob=1.0))
    anchor_f1, bioes_f1 = [], []
    for doc in docs:
        r = serialize(doc, "raster_scan")
        t = encode_targets(r, cfg)
        anchor_f1.append(parsing_f1(decode_predictions(perfect_predictions(t, r.ocr, cfg), r.ocr, cfg), r).f1)
        bioes_f1.append(parsing_f1(_perfect_adapter_parse(r, cfg), r).f1)
    assert np.mean(anchor_f1) == 1.0
    assert np.mean(anchor_f1) > np.mean(bioes_f1)


def test_corruption_sweep_is_monotone_in_expectation():
    cfg = AnchorConfig(anchor_mode="first")
    docs = [serialize(d, "oracle") for d in synth_generate(SynthConfig(seed=13, n_docs=20))]
    rng = np.random.default_rng(0)
    names = tag_set(cfg.labels)
    scores = []
    for rate in (0.0, 0.1, 0.3):
        f1 = []
        for doc in docs:
            tags = list(encode_bioes(doc).tags)
            for i in np.flatnonzero(rng.random(len(tags)) < rate):
                tags[i] = names[rng.integers(len(names))]
            f1.append(parsing_f1(_perfect_adapter_parse(doc, cfg, tags), doc).f1)
        scores.append(np.mean(f1))
    assert scores[0] == 1.0
    assert scores[0] > scores[1] > scores[2]
