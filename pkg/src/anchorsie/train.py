"""Batching, supervised fine-tuning and evaluation loops."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .baseline_iob import decode_bioes, encode_bioes, iob_linking_adapter, tag_set
from .codec import (AnchorConfig, AnchorTargets, EMPTY, ParseResult, decode_predictions,
                    encode_targets, entity_token_labels, parse_links, target_links)
from .core import DocumentAnnotation, serialize
from .data import render_visual_grid
from .losses import LossWeights, batch_extraction_loss, batch_linking_loss
from .metrics import ScoreReport, combine, labeling_f1, linking_f1, parsing_f1
from .model import DocTr, ModelConfig, encode_ocr

log = logging.getLogger(__name__)

HEADS = ("anchor", "bioes")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-4
    lang_lr: float = 5e-4
    weight_decay: float = 1e-4
    steps: int = 2000
    # learning rates are multiplied by ``lr_gamma`` once, at this step
    lr_drop: int = 1600
    lr_gamma: float = 0.1
    batch_size: int = 8
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class Example:
    doc: DocumentAnnotation
    ids: np.ndarray
    boxes: np.ndarray
    pos: np.ndarray
    grid: np.ndarray
    targets: AnchorTargets | None = None
    tags: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Batch:
    token_ids: torch.Tensor
    boxes: torch.Tensor
    position_ids: torch.Tensor
    grid: torch.Tensor
    pad_mask: torch.Tensor
    lengths: list[int]
    head_class: torch.Tensor | None = None
    target_boxes: torch.Tensor | None = None
    is_primary: torch.Tensor | None = None
    primary_tokens: list = field(default_factory=list)
    secondary_tokens: list = field(default_factory=list)
    link_matrix: list = field(default_factory=list)
    masked: list = field(default_factory=list)
    text_targets: list = field(default_factory=list)
    box_targets: list = field(default_factory=list)


def model_class_count(anchor: AnchorConfig, head: str = "anchor") -> int:
    if head == "bioes":
        return len(tag_set(anchor.labels))
    return anchor.num_head_classes


def prepare(docs: Sequence[DocumentAnnotation], model_cfg: ModelConfig,
            anchor: AnchorConfig | None = None, order: str = "raster_scan",
            head: str = "anchor") -> list[Example]:
    """Serialize, tokenize, render and (when ``anchor`` is given) encode targets."""
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    out = []
    for doc in docs:
        doc = serialize(doc, order)
        ids, boxes, pos = encode_ocr(doc.ocr, model_cfg)
        grid = render_visual_grid(doc, model_cfg.grid_size).features
        ex = Example(doc, ids, boxes, pos, grid)
        if anchor is not None:
            if head == "anchor":
                ex.targets = encode_targets(doc, anchor)
            else:
                # linking supervision sits on the first word, i.e. the B/S token
                ex.targets = encode_targets(doc, AnchorConfig(**{**asdict(anchor), "anchor_mode": "first"}))
                index = {t: i for i, t in enumerate(tag_set(anchor.labels))}
                ex.tags = np.array([index[t] for t in encode_bioes(doc).tags], dtype=np.int64)
        out.append(ex)
    return out


def collate(examples: Sequence[Example], dtype=torch.float32, with_targets: bool = True) -> Batch:
    B = len(examples)
    L = max((len(e) for e in examples), default=0)
    G, _, C = examples[0].grid.shape
    ids = torch.zeros(B, L, dtype=torch.long)
    boxes = torch.zeros(B, L, 4, dtype=dtype)
    pos = torch.zeros(B, L, dtype=torch.long)
    pad = torch.ones(B, L, dtype=torch.bool)
    grid = torch.from_numpy(np.stack([e.grid for e in examples])).to(dtype)
    lengths = []
    for b, e in enumerate(examples):
        n = len(e)
        lengths.append(n)
        ids[b, :n] = torch.from_numpy(e.ids)
        boxes[b, :n] = torch.from_numpy(e.boxes)
        pos[b, :n] = torch.from_numpy(e.pos)
        pad[b, :n] = False
    batch = Batch(ids, boxes, pos, grid, pad, lengths)
    if not with_targets or examples[0].targets is None:
        return batch
    batch.head_class = torch.zeros(B, L, dtype=torch.long)
    batch.target_boxes = torch.zeros(B, L, 4, dtype=dtype)
    batch.is_primary = torch.zeros(B, L, dtype=dtype)
    for b, e in enumerate(examples):
        n, t = len(e), e.targets
        cls = e.tags if e.tags is not None else t.head_class
        batch.head_class[b, :n] = torch.from_numpy(cls)
        batch.target_boxes[b, :n] = torch.from_numpy(t.boxes).to(dtype)
        batch.is_primary[b, :n] = torch.from_numpy(t.is_primary).to(dtype)
        batch.primary_tokens.append(torch.from_numpy(t.primary_tokens))
        batch.secondary_tokens.append(torch.from_numpy(t.secondary_tokens))
        batch.link_matrix.append(torch.from_numpy(t.link_matrix).to(dtype))
    return batch


def run_model(model: DocTr, batch: Batch, return_attention: bool = False):
    return model(batch.token_ids, batch.boxes, batch.position_ids, batch.grid,
                 batch.pad_mask, return_attention=return_attention)


def supervised_loss(model: DocTr, batch: Batch, w: LossWeights, head: str = "anchor"):
    """``w.ee * L_EE + w.el * L_EL``; returns the total and its parts."""
    out = run_model(model, batch)
    if head == "bioes":
        # tag head: cross-entropy only, no box term
        ee = batch_extraction_loss(out, batch, LossWeights(**{**asdict(w), "box": 0.0}))
    else:
        ee = batch_extraction_loss(out, batch, w)
    el = batch_linking_loss(out, batch, w)
    return w.ee * ee + w.el * el, {"ee": ee.item(), "el": el.item()}


def make_optimizer(model: DocTr, opt: OptimConfig):
    lang, rest = model.param_groups()
    optim = torch.optim.AdamW([{"params": rest, "lr": opt.lr},
                               {"params": lang, "lr": opt.lang_lr}],
                              weight_decay=opt.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(optim, step_size=max(opt.lr_drop, 1), gamma=opt.lr_gamma)
    return optim, sched


def config_hash(*parts) -> str:
    blob = json.dumps([p if isinstance(p, (dict, list, str, int, float)) else asdict(p) for p in parts],
                      sort_keys=True, default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


class MetricsLog:
    """Machine-readable JSON-lines metrics stream."""

    def __init__(self, path=None, **static):
        self.fh = open(path, "w") if path else None
        self.static = static
        self.records: list[dict] = []

    def write(self, **record):
        record = {**record, **self.static}
        self.records.append(record)
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def fit(model: DocTr, examples: Sequence[Example], opt: OptimConfig, w: LossWeights,
        head: str = "anchor", metrics: MetricsLog | None = None,
        callback: Callable[[int, DocTr], bool] | None = None, log_every: int = 50) -> int:
    """Optimize the supervised objective; returns the number of steps taken.

    ``callback(step, model)`` runs after every step and may return True to stop.
    """
    torch.manual_seed(opt.seed)
    rng = np.random.default_rng(opt.seed)
    dtype = model.query.weight.dtype
    optim, sched = make_optimizer(model, opt)
    stream = batches(len(examples), opt.batch_size, rng)
    model.train()
    t0 = time.time()
    step = 0
    for step in range(1, opt.steps + 1):
        idx = next(stream)
        batch = collate([examples[i] for i in idx], dtype)
        loss, parts = supervised_loss(model, batch, w, head)
        optim.zero_grad()
        loss.backward()
        if opt.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        optim.step()
        sched.step()
        if metrics is not None and (step % log_every == 0 or step == 1):
            metrics.write(step=step, loss=loss.item(), **parts, lr=sched.get_last_lr()[0],
                          elapsed=round(time.time() - t0, 2))
        if callback is not None and callback(step, model):
            break
    model.eval()
    return step


def decode_example(ex: Example, out, b: int, anchor: AnchorConfig, head: str) -> ParseResult:
    preds = out.predictions(b)
    if head == "bioes":
        names = tag_set(anchor.labels)
        tags = [names[i] for i in preds.class_probs.argmax(axis=1)]
        return iob_linking_adapter(decode_bioes(tags, ex.doc.ocr), preds, anchor)
    return decode_predictions(preds, ex.doc.ocr, anchor)


@torch.no_grad()
def predict(model: DocTr, examples: Sequence[Example], anchor: AnchorConfig,
            head: str = "anchor", batch_size: int = 16) -> list[ParseResult]:
    model.eval()
    dtype = model.query.weight.dtype
    results = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        out = run_model(model, collate(chunk, dtype, with_targets=False))
        results.extend(decode_example(ex, out, b, anchor, head) for b, ex in enumerate(chunk))
    return results


def score(examples: Sequence[Example], results: Sequence[ParseResult], anchor: AnchorConfig,
          kv_mode: str = "pair") -> dict[str, ScoreReport]:
    parsing, labeling, linking = [], [], []
    for ex, res in zip(examples, results):
        n = len(ex)
        parsing.append(parsing_f1(res, ex.doc, anchor.key_label, kv_mode))
        labeling.append(labeling_f1(entity_token_labels(res.entities, n),
                                    entity_token_labels(ex.doc.entities, n)))
        gt_links = target_links(ex.targets) if ex.targets is not None else set()
        linking.append(linking_f1(parse_links(res), gt_links))
    return {"parsing": combine(parsing), "labeling": combine(labeling), "linking": combine(linking)}


def evaluate(model: DocTr, examples: Sequence[Example], anchor: AnchorConfig,
             head: str = "anchor", kv_mode: str = "pair") -> dict[str, ScoreReport]:
    return score(examples, predict(model, examples, anchor, head), anchor, kv_mode)
