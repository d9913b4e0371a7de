import numpy as np
import pytest
from hypothesis import given, strategies as st

from anchorsie.codec import (EMPTY, AnchorConfig, AnchorError, Predictions, aggregate_entity_text,
                             decode_predictions, encode_targets, perfect_predictions, target_links)
from anchorsie.core import BBox, DocumentAnnotation, EntityGroup, OcrSequence, permute_document
from anchorsie.data import SynthConfig, synth_generate
from anchorsie.metrics import parsing_f1

CONFIGS = [AnchorConfig(anchor_mode=m, primary_rule=r)
           for m in ("first", "last", "first_last") for r in ("by_class", "first_entity")]


def group_signature(groups):
    return sorted((g.kind, tuple(sorted((e.label, e.text) for e in g.entities))) for g in groups)


def test_fig2_anchors_and_links(fig2_doc):
    cfg = AnchorConfig()
    t = encode_targets(fig2_doc, cfg)
    assert t.anchor_class == ["key", EMPTY, "date", "name", "count", "price"]
    assert t.is_primary.tolist() == [1, 0, 0, 1, 0, 0]
    # "2" and "$5.00" link to "Chicken"; "ABC" links to "Ship"
    assert target_links(t) == {(0, 2), (3, 4), (3, 5)}
    assert t.link_matrix.sum(axis=0).tolist() == [1, 1, 1]


def test_fig2_decode(fig2_doc):
    cfg = AnchorConfig()
    res = decode_predictions(perfect_predictions(encode_targets(fig2_doc, cfg), fig2_doc.ocr, cfg),
                             fig2_doc.ocr, cfg)
    kinds = {g.kind: g for g in res.groups}
    assert [(e.label, e.text) for e in kinds["line_item"].entities] == \
        [("name", "Chicken"), ("count", "2"), ("price", "$5.00")]
    assert [(e.label, e.text) for e in kinds["key_value"].entities] == [("key", "Ship To:"), ("date", "ABC")]
    assert not res.orphans
    payload = res.to_json()
    assert list(payload) == ["groups", "orphans", "diagnostics"]
    assert list(payload["groups"][0]["fields"][0]) == ["label", "text", "box"]


def test_empty_document():
    doc = DocumentAnnotation(OcrSequence(()))
    t = encode_targets(doc, AnchorConfig())
    assert t.link_matrix.shape == (0, 0)
    assert len(t) == 0


def test_zero_entities_all_empty(fig2_doc):
    doc = DocumentAnnotation(fig2_doc.ocr)
    t = encode_targets(doc, AnchorConfig())
    assert set(t.anchor_class) == {EMPTY}
    assert t.link_matrix.shape == (0, 0)


def test_missing_primary_class_raises(fig2_doc):
    g = fig2_doc.groups[1]
    bad = DocumentAnnotation(fig2_doc.ocr, (EntityGroup(g.secondaries[0], (g.secondaries[1],)),))
    with pytest.raises(AnchorError, match="name"):
        encode_targets(bad, AnchorConfig(primary_rule="by_class"))
    # the fallback rule picks the first entity in raster order
    t = encode_targets(bad, AnchorConfig(primary_rule="first_entity"))
    assert t.is_primary.tolist() == [0, 0, 0, 0, 1, 0]


def test_config_validation():
    with pytest.raises(ValueError):
        AnchorConfig(link_threshold=1.0)
    with pytest.raises(ValueError):
        AnchorConfig(anchor_mode="middle")
    with pytest.raises(ValueError):
        AnchorConfig(labels=("a", "a"))
    assert AnchorConfig().class_set[0] == EMPTY


def _brute_force_targets(doc, cfg):
    """Anchor scan on a raster-serialized document: first = min index, last = max index."""
    head = {}
    for e in doc.entities:
        lo, hi = min(e.span), max(e.span)
        for role in cfg.roles:
            tok = lo if role == "first" else hi
            if tok not in head:
                head[tok] = cfg.head_index(e.label, role)
    return [head.get(i, 0) for i in range(len(doc.ocr))]


@pytest.mark.parametrize("cfg", CONFIGS[::2], ids=lambda c: c.anchor_mode)
def test_targets_match_span_scan_oracle(cfg):
    for doc in synth_generate(SynthConfig(seed=21, n_docs=50, wrap_prob=0.5)):
        t = encode_targets(doc, cfg)
        assert t.head_class.tolist() == _brute_force_targets(doc, cfg)
        firsts = sum(1 for r in t.anchor_role if r == "first")
        n_anchor_tokens = int((t.head_class > 0).sum())
        if cfg.anchor_mode != "last":
            assert firsts == len(doc.entities)
        if cfg.anchor_mode == "first":
            assert t.anchor_class.count(EMPTY) == len(doc.ocr) - len(doc.entities)
        assert t.anchor_class.count(EMPTY) == len(doc.ocr) - n_anchor_tokens
        assert (t.link_matrix.sum(axis=0) <= 1).all()
        assert t.link_matrix.shape == (len(t.primary_tokens), len(t.secondary_tokens))


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.anchor_mode}-{c.primary_rule}")
def test_perfect_roundtrip(cfg, synth_docs):
    for doc in synth_docs:
        t = encode_targets(doc, cfg)
        res = decode_predictions(perfect_predictions(t, doc.ocr, cfg), doc.ocr, cfg)
        assert group_signature(res.groups) == group_signature(doc.groups)
        assert parsing_f1(res, doc, cfg.key_label).f1 == 1.0


def test_first_and_first_last_agree(synth_docs):
    a, b = AnchorConfig(anchor_mode="first"), AnchorConfig(anchor_mode="first_last")
    for doc in synth_docs[:15]:
        ra = decode_predictions(perfect_predictions(encode_targets(doc, a), doc.ocr, a), doc.ocr, a)
        rb = decode_predictions(perfect_predictions(encode_targets(doc, b), doc.ocr, b), doc.ocr, b)
        assert group_signature(ra.groups) == group_signature(rb.groups)


def test_low_affinity_secondary_becomes_orphan(fig2_doc):
    cfg = AnchorConfig()
    p = perfect_predictions(encode_targets(fig2_doc, cfg), fig2_doc.ocr, cfg)
    p.affinity[3, 5] = 0.2
    res = decode_predictions(p, fig2_doc.ocr, cfg)
    assert [(e.label, e.text) for e in res.orphans] == [("price", "$5.00")]
    line = [g for g in res.groups if g.kind == "line_item"][0]
    assert [e.label for e in line.entities] == ["name", "count"]
    assert res.diagnostics["links"] == 2


def test_shape_mismatch_raises(fig2_doc):
    cfg = AnchorConfig()
    p = perfect_predictions(encode_targets(fig2_doc, cfg), fig2_doc.ocr, cfg)
    short = Predictions(p.class_probs[:3], p.boxes[:3], p.primary_probs[:3], p.affinity[:3, :3])
    with pytest.raises(ValueError):
        decode_predictions(short, fig2_doc.ocr, cfg)


def test_duplicate_anchor_suppressed(fig2_doc):
    cfg = AnchorConfig()
    p = perfect_predictions(encode_targets(fig2_doc, cfg), fig2_doc.ocr, cfg)
    # "To:" also fires as a key anchor with the same box, at lower confidence
    p.class_probs[1] = 0.0
    p.class_probs[1, cfg.head_index("key", "first")] = 0.6
    p.boxes[1] = p.boxes[0]
    res = decode_predictions(p, fig2_doc.ocr, cfg)
    assert res.diagnostics["suppressed"] == 1
    assert parsing_f1(res, fig2_doc, "key").f1 == 1.0


def test_unmatched_last_anchor_discarded(fig2_doc):
    cfg = AnchorConfig(anchor_mode="first_last")
    p = perfect_predictions(encode_targets(fig2_doc, cfg), fig2_doc.ocr, cfg)
    p.class_probs[4] = 0.0
    p.class_probs[4, cfg.head_index("price", "last")] = 1.0   # "2" claims to end a price
    res = decode_predictions(p, fig2_doc.ocr, cfg)
    assert res.diagnostics["discarded_last"] == 1
    assert sorted(e.label for e in res.entities) == ["date", "key", "name", "price"]


def test_aggregate_entity_text(fig2_doc):
    box = fig2_doc.groups[0].primary.box
    assert aggregate_entity_text(box, fig2_doc.ocr) == "Ship To:"
    assert aggregate_entity_text(BBox(.99, .99, 0, 0), fig2_doc.ocr) == ""
    for doc in synth_generate(SynthConfig(seed=8, n_docs=10)):
        for e in doc.entities:
            assert aggregate_entity_text(e.box, doc.ocr) == e.text


@given(st.randoms(use_true_random=False))
def test_serialization_covariance(random):
    doc = synth_generate(SynthConfig(seed=random.randint(0, 10_000), n_docs=1))[0]
    cfg = AnchorConfig(anchor_mode="first_last")
    order = list(range(len(doc.ocr)))
    random.shuffle(order)
    shuffled = permute_document(doc, order)
    t0, t1 = encode_targets(doc, cfg), encode_targets(shuffled, cfg)
    for new, old in enumerate(order):
        assert t1.head_class[new] == t0.head_class[old]
        assert t1.is_primary[new] == t0.is_primary[old]
    back = {(order[p], order[s]) for p, s in target_links(t1)}
    assert back == target_links(t0)


@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_each_secondary_gets_at_most_one_primary(seed, tau):
    doc = synth_generate(SynthConfig(seed=seed, n_docs=1))[0]
    cfg = AnchorConfig(link_threshold=tau)
    p = perfect_predictions(encode_targets(doc, cfg), doc.ocr, cfg)
    p.affinity = np.random.default_rng(seed).random(p.affinity.shape)
    res = decode_predictions(p, doc.ocr, cfg)
    anchors = [e.anchor for e in res.entities]
    assert len(anchors) == len(set(anchors))
