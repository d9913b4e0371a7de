"""Masked pre-training: MDM (text + box), MVLM (text, boxes kept) and MLM (text only).

Masking is pure replacement at a fixed per-token rate; the visual grid is
always rendered from the unmasked document.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .core import BBox, DocumentAnnotation, OcrSequence, OcrWord
from .data import render_visual_grid
from .losses import LossWeights, batch_mdm_loss
from .model import MASK_ID, MASK_TOKEN, DocTr, ModelConfig, box_xyxy_to_cxcywh, encode_ocr
from .train import Batch, MetricsLog, OptimConfig, make_optimizer, run_model

log = logging.getLogger(__name__)

MASK_MODES = ("mlm", "mvlm", "mdm")


@dataclass(frozen=True)
class MaskingConfig:
    mode: str = "mdm"
    mask_rate: float = 0.15
    seed: int = 0
    mask_token: int = MASK_ID
    zero_box: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "mode", self.mode.lower())
        if self.mode not in MASK_MODES:
            raise ValueError(f"mode must be one of {MASK_MODES}, got {self.mode!r}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in [0, 1]")

    @property
    def use_layout(self) -> bool:
        return self.mode != "mlm"


@dataclass
class MaskedBatch:
    """One masked document ready for the model.

    ``input_ids``/``input_boxes`` are what the model sees; targets are
    aligned with ``masked_positions``.  ``box_targets`` (corner form) is
    empty unless the mode is MDM.
    """
    masked_ocr: OcrSequence
    masked_positions: np.ndarray
    text_targets: np.ndarray
    box_targets: np.ndarray
    grid: np.ndarray
    mode: str
    use_layout: bool
    input_ids: np.ndarray
    input_boxes: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return len(self.input_ids)


def sample_mask(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(rate) selection; returns the selected positions."""
    return np.flatnonzero(rng.random(n) < rate)


def apply_masking(doc: DocumentAnnotation | OcrSequence, cfg: MaskingConfig,
                  model_cfg: ModelConfig | None = None,
                  rng: np.random.Generator | None = None) -> MaskedBatch:
    model_cfg = model_cfg or ModelConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    ocr = doc.ocr if isinstance(doc, DocumentAnnotation) else doc
    ids, boxes, pos = encode_ocr(ocr, model_cfg)
    grid = render_visual_grid(ocr, model_cfg.grid_size).features
    picked = sample_mask(len(ocr), cfg.mask_rate, rng)
    chosen = set(picked.tolist())

    zero = BBox.from_corners(*cfg.zero_box)
    words = []
    for w in ocr:
        text = MASK_TOKEN if w.index in chosen else w.text
        if cfg.mode == "mlm" or (cfg.mode == "mdm" and w.index in chosen):
            box = zero
        else:
            box = w.box
        words.append(OcrWord(w.index, text, box))

    input_ids = ids.copy()
    input_ids[picked] = cfg.mask_token
    input_boxes = boxes.copy()
    if cfg.mode == "mlm":
        input_boxes[:] = cfg.zero_box
    elif cfg.mode == "mdm":
        input_boxes[picked] = cfg.zero_box
    box_targets = boxes[picked] if cfg.mode == "mdm" else np.zeros((0, 4))
    return MaskedBatch(OcrSequence(tuple(words), ocr.order_mode), picked, ids[picked], box_targets,
                       grid, cfg.mode, cfg.use_layout, input_ids, input_boxes, pos)


def collate_masked(items: Sequence[MaskedBatch], dtype=torch.float32) -> Batch:
    B = len(items)
    L = max((len(m) for m in items), default=0)
    ids = torch.zeros(B, L, dtype=torch.long)
    boxes = torch.zeros(B, L, 4, dtype=dtype)
    pos = torch.zeros(B, L, dtype=torch.long)
    pad = torch.ones(B, L, dtype=torch.bool)
    for b, m in enumerate(items):
        n = len(m)
        ids[b, :n] = torch.from_numpy(m.input_ids)
        boxes[b, :n] = torch.from_numpy(m.input_boxes).to(dtype)
        pos[b, :n] = torch.from_numpy(m.positions)
        pad[b, :n] = False
    grid = torch.from_numpy(np.stack([m.grid for m in items])).to(dtype)
    batch = Batch(ids, boxes, pos, grid, pad, [len(m) for m in items])
    for m in items:
        batch.masked.append(torch.from_numpy(m.masked_positions).long())
        batch.text_targets.append(torch.from_numpy(m.text_targets).long())
        tb = torch.from_numpy(np.asarray(m.box_targets, dtype=np.float64).reshape(-1, 4)).to(dtype)
        batch.box_targets.append(box_xyxy_to_cxcywh(tb))
    return batch


def masked_loss(model: DocTr, batch: Batch, mode: str, w: LossWeights) -> torch.Tensor:
    out = run_model(model, batch)
    return batch_mdm_loss(out, batch, w, with_boxes=(mode == "mdm"))


def pretrain_step(model: DocTr, batch: MaskedBatch | Sequence[MaskedBatch],
                  w: LossWeights = LossWeights()) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Forward on the masked inputs, backward, and return ``(loss, gradients)``.

    Existing ``.grad`` buffers are cleared first; the optimizer (if any) is
    left to the caller.
    """
    items = [batch] if isinstance(batch, MaskedBatch) else list(batch)
    modes = {m.mode for m in items}
    if len(modes) != 1:
        raise ValueError(f"mixed masking modes in one batch: {sorted(modes)}")
    model.zero_grad(set_to_none=False)
    dtype = model.query.weight.dtype
    loss = masked_loss(model, collate_masked(items, dtype), modes.pop(), w)
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in model.named_parameters()}
    return loss.detach(), grads


def step_rng(seed: int, step: int) -> np.random.Generator:
    # independent stream per step, so any batch can be regenerated in isolation
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def pretrain(model: DocTr, docs: Sequence[DocumentAnnotation], mcfg: MaskingConfig,
             opt: OptimConfig, w: LossWeights = LossWeights(), metrics: MetricsLog | None = None,
             callback: Callable[[int, DocTr], bool] | None = None, log_every: int = 50) -> int:
    """Masked pre-training loop with fresh masks every step."""
    if not docs:
        raise ValueError("empty pre-training corpus")
    torch.manual_seed(opt.seed)
    order_rng = np.random.default_rng(opt.seed)
    optim, sched = make_optimizer(model, opt)
    model.train()
    t0 = time.time()
    step = 0
    perm, cursor = order_rng.permutation(len(docs)), 0
    for step in range(1, opt.steps + 1):
        if cursor >= len(docs):
            perm, cursor = order_rng.permutation(len(docs)), 0
        idx = perm[cursor:cursor + opt.batch_size]
        cursor += opt.batch_size
        rng = step_rng(mcfg.seed, step)
        items = [apply_masking(docs[i], mcfg, model.cfg, rng) for i in idx]
        optim.zero_grad()
        loss = masked_loss(model, collate_masked(items, model.query.weight.dtype), mcfg.mode, w)
        loss.backward()
        if opt.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        optim.step()
        sched.step()
        if metrics is not None and (step % log_every == 0 or step == 1):
            metrics.write(step=step, loss=loss.item(), mode=mcfg.mode, lr=sched.get_last_lr()[0],
                          elapsed=round(time.time() - t0, 2))
        if callback is not None and callback(step, model):
            break
    model.eval()
    return step


@torch.no_grad()
def masked_box_error(model: DocTr, docs: Sequence[DocumentAnnotation], mcfg: MaskingConfig,
                     batch_size: int = 16) -> float:
    """Mean absolute coordinate error (center-size form) of boxes predicted at masked positions."""
    if mcfg.mode != "mdm":
        raise ValueError("box error is only defined for MDM masking")
    model.eval()
    rng = np.random.default_rng(mcfg.seed)
    items = [apply_masking(d, mcfg, model.cfg, rng) for d in docs]
    total, count = 0.0, 0
    for i in range(0, len(items), batch_size):
        batch = collate_masked(items[i:i + batch_size], model.query.weight.dtype)
        out = run_model(model, batch)
        for b, pos in enumerate(batch.masked):
            if len(pos):
                total += (out.boxes[b, pos] - batch.box_targets[b]).abs().sum().item()
                count += 4 * len(pos)
    return total / count if count else 0.0
