import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from anchorsie.core import BBox, DocumentAnnotation, Entity, EntityGroup, OcrSequence, OcrWord

torch.set_num_threads(1)

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def word(i, text, x0, y0, x1, y1):
    return OcrWord(i, text, BBox.from_corners(x0, y0, x1, y1))


@pytest.fixture
def fig2_doc():
    """Small receipt: a "Ship To: ABC" key-value pair and one line item."""
    ws = [word(0, "Ship", .05, .10, .12, .13), word(1, "To:", .13, .10, .18, .13),
          word(2, "ABC", .30, .10, .36, .13),
          word(3, "Chicken", .05, .30, .17, .33), word(4, "2", .50, .30, .52, .33),
          word(5, "$5.00", .80, .30, .90, .33)]
    ocr = OcrSequence(tuple(ws), "raster_scan")

    def ent(label, span):
        from anchorsie.core import aggregate_text, union_boxes
        return Entity(label, union_boxes(ws[i].box for i in span),
                      aggregate_text(ws[i] for i in span), tuple(span))

    groups = (EntityGroup(ent("key", [0, 1]), (ent("date", [2]),), "key_value"),
              EntityGroup(ent("name", [3]), (ent("count", [4]), ent("price", [5])), "line_item"))
    return DocumentAnnotation(ocr, groups, doc_id="fig2")


@pytest.fixture(scope="session")
def synth_docs():
    from anchorsie.data import SynthConfig, synth_generate
    return synth_generate(SynthConfig(seed=11, n_docs=40, wrap_prob=0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
