import json
import logging
from pathlib import Path

import numpy as np
import pytest

from anchorsie.codec import AnchorConfig, decode_predictions, encode_targets, perfect_predictions
from anchorsie.core import BBox, DocumentAnnotation, OcrSequence, OcrWord
from anchorsie.data import (ReaderError, SynthConfig, document_from_json, document_to_json,
                            grid_channels, load_corpus, read_cord, read_funsd, render_visual_grid,
                            save_document, synth_generate)
from anchorsie.metrics import parsing_f1

FIX = Path(__file__).parent / "fixtures"


# --- readers ----------------------------------------------------------------------

def test_funsd_key_value_fixture():
    doc = read_funsd(FIX / "funsd_name.json")
    kv = [g for g in doc.groups if g.kind == "key_value"]
    assert len(kv) == 1
    assert [(e.label, e.text) for e in kv[0].entities] == [("question", "Name:"), ("answer", "John")]
    assert len(doc.entities) == 3
    header = [g for g in doc.groups if g.kind == "singleton"][0]
    assert header.primary.text == "APPLICATION FORM"
    # normalized by the declared page size, and recoverable to half a pixel
    name = kv[0].primary.box
    assert np.allclose(np.array(name.corners) * [1000, 800, 1000, 800], [100, 100, 180, 120], atol=0.5)


def test_funsd_dangling_link_names_the_id():
    with pytest.raises(ReaderError, match="7"):
        read_funsd(FIX / "funsd_dangling.json")


def test_funsd_empty_and_malformed(tmp_path):
    assert len(read_funsd({"form": []}).ocr) == 0
    bad = tmp_path / "bad.json"
    bad.write_text("{\"form\": [")
    with pytest.raises(ReaderError, match="line 1"):
        read_funsd(bad)
    with pytest.raises(ReaderError):
        read_funsd({"nope": 1})


def test_cord_line_item_fixture():
    doc = read_cord(FIX / "cord_line_item.json")
    items = [g for g in doc.groups if g.kind == "line_item"]
    assert len(items) == 1
    assert [(e.label, e.text) for e in items[0].entities] == [("name", "Chicken"), ("count", "2"), ("price", "$5.00")]
    kv = [g for g in doc.groups if g.kind == "key_value"][0]
    assert [(e.label, e.text) for e in kv.entities] == [("key", "Total"), ("total", "$5.00")]
    assert all(0 <= v <= 1 for w in doc.ocr for v in w.box.corners)


def test_cord_missing_name_falls_back(caplog):
    with caplog.at_level(logging.WARNING):
        doc = read_cord(FIX / "cord_no_name.json")
    assert doc.groups[0].primary.label == "count"
    assert "falls back" in caplog.text


def test_cord_empty():
    assert len(read_cord({"valid_line": []}).groups) == 0
    assert len(read_cord([]).ocr) == 0


def test_readers_feed_the_codec():
    doc = read_cord(FIX / "cord_line_item.json")
    cfg = AnchorConfig()
    res = decode_predictions(perfect_predictions(encode_targets(doc, cfg), doc.ocr, cfg), doc.ocr, cfg)
    assert parsing_f1(res, doc).f1 == 1.0


# --- canonical JSON ---------------------------------------------------------------------

def test_canonical_roundtrip(tmp_path, synth_docs):
    doc = synth_docs[3]
    again = document_from_json(json.loads(json.dumps(document_to_json(doc))))
    assert [w.text for w in again.ocr] == [w.text for w in doc.ocr]
    assert [(e.label, e.text, e.span) for e in again.entities] == [(e.label, e.text, e.span) for e in doc.entities]
    assert document_to_json(doc)["schema_version"] == 1
    for i, d in enumerate(synth_docs[:3]):
        save_document(d, tmp_path / f"d{i}.json")
    assert len(load_corpus(tmp_path)) == 3


def test_canonical_rejects_bad_version(synth_docs):
    data = document_to_json(synth_docs[0])
    data["schema_version"] = 99
    with pytest.raises(ReaderError):
        document_from_json(data)


# --- synthetic generator ---------------------------------------------------------------

def test_synth_deterministic_and_empty():
    a = synth_generate(SynthConfig(seed=0, n_docs=5))
    b = synth_generate(SynthConfig(seed=0, n_docs=5))
    assert [document_to_json(d) for d in a] == [document_to_json(d) for d in b]
    assert synth_generate(SynthConfig(n_docs=0)) == []
    c = synth_generate(SynthConfig(seed=1, n_docs=5))
    assert [document_to_json(d) for d in a] != [document_to_json(d) for d in c]


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(line_item_range=(3, 1))
    with pytest.raises(ValueError):
        SynthConfig(word_drop=1.5)


@pytest.mark.parametrize("mode", ["first", "last", "first_last"])
def test_synth_documents_satisfy_target_invariants(mode):
    cfg = AnchorConfig(anchor_mode=mode)
    for doc in synth_generate(SynthConfig(seed=4, n_docs=30, wrap_prob=0.5)):
        t = encode_targets(doc, cfg)
        assert (t.link_matrix.sum(axis=0) == 1).all()
        assert all(0 <= v <= 1 for w in doc.ocr for v in w.box.as_tuple())
        for e in doc.entities:
            assert e.text == " ".join(doc.ocr[i].text for i in sorted(e.span))


def test_synth_contains_interleaved_entities():
    from anchorsie.baseline_iob import encode_bioes
    docs = synth_generate(SynthConfig(seed=6, n_docs=30, wrap_prob=1.0))
    assert any(encode_bioes(d).serialization_conflict for d in docs)


# --- visual grid -------------------------------------------------------------------------

def test_grid_empty_and_single_cell():
    empty = render_visual_grid(DocumentAnnotation(OcrSequence(())), 4)
    assert empty.features.shape == (4, 4, grid_channels())
    assert not empty.features.any()
    one = OcrSequence((OcrWord(0, "ab", BBox.from_corners(0.25, 0.5, 0.5, 0.75)),))
    g = render_visual_grid(one, 4).features[:, :, 0]
    assert g[2, 1] == pytest.approx(1.0)
    assert np.count_nonzero(g) == 1


def test_grid_shift_equivariance(synth_docs):
    G = 16
    cell = 1.0 / G
    doc = synth_docs[5]
    # keep words clear of the right border so the shift stays on the page
    words = [w for w in doc.ocr if w.box.corners[2] < 1 - cell][:12]
    words = tuple(OcrWord(i, w.text, w.box) for i, w in enumerate(words))
    base = render_visual_grid(OcrSequence(words), G).features
    shifted = render_visual_grid(OcrSequence(tuple(OcrWord(w.index, w.text, w.box.shifted(dx=cell))
                                                   for w in words)), G).features
    assert np.allclose(shifted[:, 1:], base[:, :-1], atol=1e-5)
    assert not shifted[:, 0].any()


def test_grid_digit_channel():
    ocr = OcrSequence((OcrWord(0, "$5.00", BBox(.5, .5, .2, .2)), OcrWord(1, "Tea", BBox(.1, .1, .1, .1))))
    f = render_visual_grid(ocr, 8).features
    assert f[4, 4, -1] > 0 and f[0, 0, -1] == 0
    assert np.isfinite(f).all() and f.max() <= 1.0
