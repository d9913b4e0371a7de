import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from anchorsie.losses import (LossWeights, bbox_loss, bce, entity_extraction_loss,
                              entity_linking_loss, giou_pairwise, mdm_loss)

from oracles import scalar_bce, scalar_bbox_loss, scalar_extraction_loss, scalar_giou

D64 = torch.float64


def rand_boxes(g, n):
    c = torch.rand(n, 2, generator=g, dtype=D64) * 0.6 + 0.2
    wh = torch.rand(n, 2, generator=g, dtype=D64) * 0.3 + 0.05
    return torch.cat([c, wh], -1)


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(giou=-1)


def test_bbox_loss_examples():
    b = torch.tensor([.5, .5, .2, .2], dtype=D64)
    assert bbox_loss(b, b).item() == pytest.approx(0.0, abs=1e-12)
    w = LossWeights(l1=1.0, giou=0.0)
    assert bbox_loss(b, torch.tensor([.5, .5, .2, .4], dtype=D64), w).item() == pytest.approx(0.2, abs=1e-12)


def test_bbox_loss_matches_scalar_oracle():
    g = torch.Generator().manual_seed(0)
    a, b = rand_boxes(g, 50), rand_boxes(g, 50)
    got = bbox_loss(a, b)
    for i in range(50):
        assert got[i].item() == pytest.approx(scalar_bbox_loss(a[i].tolist(), b[i].tolist()), abs=1e-10)
        assert giou_pairwise(a[i], b[i]).item() == pytest.approx(scalar_giou(a[i].tolist(), b[i].tolist()), abs=1e-10)
    assert (got >= 0).all()


def test_uniform_cross_entropy_is_ln4():
    loss = entity_extraction_loss(torch.zeros(1, 4, dtype=D64), torch.zeros(1, 4, dtype=D64),
                                  torch.tensor([0]), torch.zeros(1, 4, dtype=D64))
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_extraction_loss_near_zero_when_perfect():
    target = torch.tensor([0, 2, 1])
    logits = torch.full((3, 4), -60.0, dtype=D64)
    logits[torch.arange(3), target] = 60.0
    boxes = torch.tensor([[.5, .5, .1, .1], [.3, .3, .1, .2], [.6, .6, .2, .1]], dtype=D64)
    assert entity_extraction_loss(logits, boxes, target, boxes).item() < 1e-12


def test_extraction_loss_matches_scalar_oracle():
    g = torch.Generator().manual_seed(1)
    for _ in range(10):
        n, K = 6, 5
        logits = torch.randn(n, K, generator=g, dtype=D64)
        target = torch.randint(0, K, (n,), generator=g)
        pb, tb = rand_boxes(g, n), rand_boxes(g, n)
        got = entity_extraction_loss(logits, pb, target, tb, LossWeights(box=0.7))
        ref = scalar_extraction_loss(logits.tolist(), pb.tolist(), target.tolist(), tb.tolist(), lam=0.7)
        assert got.item() == pytest.approx(ref, abs=1e-10)


def test_box_weight_zero_is_plain_cross_entropy():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(5, 3, generator=g, dtype=D64)
    target = torch.tensor([0, 1, 2, 1, 0])
    got = entity_extraction_loss(logits, rand_boxes(g, 5), target, rand_boxes(g, 5), LossWeights(box=0.0))
    assert got.item() == pytest.approx(torch.nn.CrossEntropyLoss(reduction="sum")(logits, target).item(), abs=1e-12)


def test_class_out_of_range():
    with pytest.raises(ValueError):
        entity_extraction_loss(torch.zeros(2, 3), torch.zeros(2, 4), torch.tensor([0, 3]), torch.zeros(2, 4))


def test_linking_loss_examples():
    half = torch.full((4,), 0.5, dtype=D64)
    M, Mh = torch.tensor([[1., 0.], [0., 1.]], dtype=D64), torch.full((2, 2), 0.5, dtype=D64)
    val = entity_linking_loss(torch.tensor([1., 0., 1., 0.], dtype=D64), half, M, Mh)
    assert abs(val.item() - 2 * math.log(2)) < 1e-12
    L = torch.tensor([1., 0., 1.], dtype=D64)
    assert entity_linking_loss(L, L.clone(), M, M.clone()).item() <= 2e-6
    with pytest.raises(ValueError):
        bce(torch.zeros(2), torch.zeros(3))


def test_linking_loss_matches_scalar_oracle():
    g = torch.Generator().manual_seed(3)
    for _ in range(10):
        L = (torch.rand(7, generator=g) < 0.4).to(D64)
        Lh = torch.rand(7, generator=g, dtype=D64)
        M = (torch.rand(3, 4, generator=g) < 0.3).to(D64)
        Mh = torch.rand(3, 4, generator=g, dtype=D64)
        got = entity_linking_loss(L, Lh, M, Mh, LossWeights(link=0.3))
        ref = scalar_bce(L.tolist(), Lh.tolist()) + 0.3 * scalar_bce(M.flatten().tolist(), Mh.flatten().tolist())
        assert got.item() == pytest.approx(ref, abs=1e-10)


def test_empty_link_matrix_contributes_zero():
    L = torch.tensor([0., 0.], dtype=D64)
    Lh = torch.tensor([0.5, 0.5], dtype=D64)
    assert entity_linking_loss(L, Lh, torch.zeros(0, 0), torch.zeros(0, 0)).item() == pytest.approx(math.log(2))


def test_mdm_loss_cases():
    V = 6
    logits = torch.zeros(4, V, dtype=D64)
    boxes = torch.full((4, 4), 0.3, dtype=D64)
    assert mdm_loss(logits, boxes, torch.tensor([], dtype=torch.long), torch.tensor([], dtype=torch.long), None).item() == 0.0
    perfect = logits.clone()
    perfect[2] = -60.0
    perfect[2, 4] = 60.0
    assert mdm_loss(perfect, boxes, torch.tensor([2]), torch.tensor([4]), boxes[2:3]).item() < 1e-12
    g = torch.Generator().manual_seed(4)
    lg = torch.randn(5, V, generator=g, dtype=D64)
    bx = rand_boxes(g, 5)
    masked = torch.tensor([0, 3])
    tt, tb = torch.tensor([1, 5]), rand_boxes(g, 2)
    ref = sum(scalar_extraction_loss([lg[m].tolist()], [bx[m].tolist()], [t], [b], lam=1.0)
              for m, t, b in zip(masked.tolist(), tt.tolist(), tb.tolist()))
    assert mdm_loss(lg, bx, masked, tt, tb).item() == pytest.approx(ref, abs=1e-10)
    text_only = mdm_loss(lg, bx, masked, tt, None).item()
    assert text_only == pytest.approx(sum(torch.nn.functional.cross_entropy(lg[masked], tt, reduction="none").tolist()))


@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 8))
def test_losses_nonnegative_and_permutation_invariant(seed, n):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(n, 4, generator=g, dtype=D64)
    target = torch.randint(0, 4, (n,), generator=g)
    pb, tb = rand_boxes(g, n), rand_boxes(g, n)
    perm = torch.randperm(n, generator=g)
    a = entity_extraction_loss(logits, pb, target, tb)
    b = entity_extraction_loss(logits[perm], pb[perm], target[perm], tb[perm])
    assert a.item() >= 0
    assert a.item() == pytest.approx(b.item(), rel=1e-12)
    L = (torch.rand(n, generator=g) < 0.5).to(D64)
    Lh = torch.rand(n, generator=g, dtype=D64)
    l1 = entity_linking_loss(L, Lh, torch.zeros(0, 0, dtype=D64), torch.zeros(0, 0, dtype=D64))
    l2 = entity_linking_loss(L[perm], Lh[perm], torch.zeros(0, 0, dtype=D64), torch.zeros(0, 0, dtype=D64))
    assert l1.item() >= 0
    assert l1.item() == pytest.approx(l2.item(), rel=1e-12)
