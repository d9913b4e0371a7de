"""Entity-extraction, entity-linking and masked-detection objectives.

All functions take per-document tensors (no batch axis) unless noted; the
batched helpers at the bottom sum/average them over a padded batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import box_cxcywh_to_xyxy

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
_DIV_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    box: float = 1.0        # weight of the box term inside the extraction loss
    l1: float = 5.0
    giou: float = 2.0
    link: float = 1.0       # weight of the link-matrix BCE inside the linking loss
    ee: float = 5.0
    el: float = 1.0

    def __post_init__(self):
        for name in ("box", "l1", "giou", "link", "ee", "el"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def giou_pairwise(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Element-wise GIoU of center-size boxes ``(..., 4)``."""
    a, b = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / union.clamp(min=_DIV_EPS)
    lt = torch.minimum(a[..., :2], b[..., :2])
    rb = torch.maximum(a[..., 2:], b[..., 2:])
    hull = (rb - lt).clamp(min=0).prod(-1)
    return iou - (hull - union) / hull.clamp(min=_DIV_EPS)


def bbox_loss(target: torch.Tensor, pred: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    """``l1 * |b - b_hat|_1 + giou * (1 - GIoU)`` per box, center-size inputs."""
    return (w.l1 * (target - pred).abs().sum(-1)
            + w.giou * (1.0 - giou_pairwise(target, pred)))


def entity_extraction_loss(class_logits: torch.Tensor, boxes: torch.Tensor,
                           target_class: torch.Tensor, target_boxes: torch.Tensor,
                           w: LossWeights = LossWeights()) -> torch.Tensor:
    """Token cross-entropy (empty class included) plus box loss on anchor tokens.

    ``class_logits (N, K)``, ``boxes (N, 4)``, ``target_class (N,)``,
    ``target_boxes (N, 4)``; summed over tokens.
    """
    K = class_logits.shape[-1]
    if target_class.numel() and (target_class.min() < 0 or target_class.max() >= K):
        raise ValueError(f"class index out of range for {K} classes")
    ce = F.cross_entropy(class_logits, target_class, reduction="sum")
    anchor = target_class > 0
    if not anchor.any() or w.box == 0:
        return ce
    return ce + w.box * bbox_loss(target_boxes[anchor], boxes[anchor], w).sum()


def bce(target: torch.Tensor, prob: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities clamped to ``[eps, 1 - eps]``."""
    if target.shape != prob.shape:
        raise ValueError(f"shape mismatch {tuple(target.shape)} vs {tuple(prob.shape)}")
    if target.numel() == 0:
        return prob.sum() * 0.0
    p = prob.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()


def entity_linking_loss(primary: torch.Tensor, primary_prob: torch.Tensor,
                        links: torch.Tensor, link_prob: torch.Tensor,
                        w: LossWeights = LossWeights()) -> torch.Tensor:
    return bce(primary, primary_prob) + w.link * bce(links, link_prob)


def mdm_loss(token_logits: torch.Tensor, boxes: torch.Tensor, masked: torch.Tensor,
             text_targets: torch.Tensor, box_targets: torch.Tensor | None,
             w: LossWeights = LossWeights()) -> torch.Tensor:
    """Masked text classification plus (when ``box_targets`` given) masked box regression.

    ``masked`` holds token positions; targets are aligned with it.  Summed
    over masked positions, like the extraction loss.
    """
    if masked.numel() == 0:
        log.debug("mdm_loss called with no masked positions")
        return token_logits.sum() * 0.0
    loss = F.cross_entropy(token_logits[masked], text_targets, reduction="sum")
    if box_targets is not None and w.box > 0:
        loss = loss + w.box * bbox_loss(box_targets, boxes[masked], w).sum()
    return loss


# ---------------------------------------------------------------------------
# batched helpers (padded batch from train.collate)

def batch_extraction_loss(out, batch, w: LossWeights) -> torch.Tensor:
    total = out.class_logits.sum() * 0.0
    for b, n in enumerate(batch.lengths):
        total = total + entity_extraction_loss(out.class_logits[b, :n], out.boxes[b, :n],
                                               batch.head_class[b, :n], batch.target_boxes[b, :n], w)
    return total / max(len(batch.lengths), 1)


def batch_linking_loss(out, batch, w: LossWeights) -> torch.Tensor:
    total = out.primary_logits.sum() * 0.0
    for b, n in enumerate(batch.lengths):
        prim, sec = batch.primary_tokens[b], batch.secondary_tokens[b]
        m_hat = torch.sigmoid(out.emb_p[b, prim] @ out.emb_s[b, sec].T)
        total = total + entity_linking_loss(batch.is_primary[b, :n],
                                            torch.sigmoid(out.primary_logits[b, :n]),
                                            batch.link_matrix[b], m_hat, w)
    return total / max(len(batch.lengths), 1)


def batch_mdm_loss(out, batch, w: LossWeights, with_boxes: bool) -> torch.Tensor:
    total = out.token_logits.sum() * 0.0
    for b in range(len(batch.lengths)):
        total = total + mdm_loss(out.token_logits[b], out.boxes[b], batch.masked[b],
                                 batch.text_targets[b],
                                 batch.box_targets[b] if with_boxes else None, w)
    return total / max(len(batch.lengths), 1)
