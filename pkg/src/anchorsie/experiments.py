"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance suite.

Each driver builds its own synthetic corpus from a seed, trains from scratch
(or from a given state) and returns plain numbers, so callers only decide
thresholds and reporting.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import torch

from .codec import AnchorConfig
from .core import DocumentAnnotation
from .data import SynthConfig, synth_generate
from .losses import LossWeights
from .model import DocTr, ModelConfig, trunk_state
from .pretrain import MaskingConfig, masked_box_error, pretrain
from .train import Example, OptimConfig, evaluate, fit, model_class_count, prepare, run_model, collate

log = logging.getLogger(__name__)

# linking weighted up: L_EE is a per-document sum, L_EL a mean
RECEIPT_WEIGHTS = LossWeights(ee=5.0, el=10.0)


@dataclass(frozen=True)
class Thresholds:
    parsing: float = 0.85
    labeling: float = 0.90
    linking: float = 0.85

    def met(self, scores: dict[str, float]) -> bool:
        return (scores["parsing"] >= self.parsing and scores["labeling"] >= self.labeling
                and scores["linking"] >= self.linking)


@dataclass
class TrainTrace:
    """Evaluation history of one run: ``(step, {metric: f1})`` pairs."""
    history: list[tuple[int, dict[str, float]]] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0
    hit_step: int | None = None

    @property
    def final(self) -> dict[str, float]:
        return self.history[-1][1] if self.history else {}


def f1s(model: DocTr, examples: Sequence[Example], anchor: AnchorConfig, head: str = "anchor") -> dict[str, float]:
    return {k: r.f1 for k, r in evaluate(model, examples, anchor, head).items()}


def train_until(model: DocTr, train: Sequence[Example], held: Sequence[Example], anchor: AnchorConfig,
                opt: OptimConfig, w: LossWeights = RECEIPT_WEIGHTS, target: Thresholds | None = None,
                every: int = 250, head: str = "anchor") -> TrainTrace:
    """Train, scoring ``held`` every ``every`` steps; stop at the first evaluation meeting ``target``."""
    trace = TrainTrace()
    t0 = time.time()

    def callback(step: int, m: DocTr) -> bool:
        if step % every and step != opt.steps:
            return False
        scores = f1s(m, held, anchor, head)
        m.train()
        trace.history.append((step, scores))
        log.info("step %d %s", step, {k: round(v, 4) for k, v in scores.items()})
        if target is not None and target.met(scores):
            trace.hit_step = step
            return True
        return False

    trace.steps = fit(model, train, opt, w, head=head, callback=callback)
    trace.seconds = time.time() - t0
    return trace


def receipt_split(seed: int = 7, n_train: int = 200, n_eval: int = 50,
                  **synth) -> tuple[list[DocumentAnnotation], list[DocumentAnnotation]]:
    docs = synth_generate(SynthConfig(n_docs=n_train + n_eval, seed=seed, **synth))
    return docs[:n_train], docs[n_train:]


def receipt_model(anchor: AnchorConfig, head: str = "anchor", **cfg) -> DocTr:
    return DocTr(ModelConfig(class_count=model_class_count(anchor, head), **cfg))


def generalization(anchor: AnchorConfig = AnchorConfig(), steps: int = 3000, seed: int = 7,
                   target: Thresholds | None = Thresholds(), every: int = 250,
                   init_state: dict | None = None) -> tuple[DocTr, TrainTrace]:
    """Train on 200 receipts, score 50 held-out ones."""
    train_docs, held_docs = receipt_split(seed)
    model = receipt_model(anchor)
    if init_state is not None:
        # pre-trained trunk only; heads start from their initialization
        model.load_state_dict(trunk_state(init_state), strict=False)
    train = prepare(train_docs, model.cfg, anchor)
    held = prepare(held_docs, model.cfg, anchor)
    opt = OptimConfig(steps=steps, lr_drop=int(steps * 0.8))
    return model, train_until(model, train, held, anchor, opt, target=target, every=every)


def overfit(anchor: AnchorConfig = AnchorConfig(anchor_mode="first_last"), n_docs: int = 8, seed: int = 1,
            steps: int = 2000, every: int = 100) -> tuple[DocTr, list[Example], TrainTrace]:
    """Fit a handful of receipts and report when parsing F1 on them reaches 1."""
    docs = synth_generate(SynthConfig(n_docs=n_docs, seed=seed))
    model = receipt_model(anchor)
    examples = prepare(docs, model.cfg, anchor)
    opt = OptimConfig(steps=steps, lr_drop=int(steps * 0.8))
    trace = train_until(model, examples, examples, anchor, opt, target=Thresholds(1.0, 0.0, 0.0), every=every)
    return model, examples, trace


@torch.no_grad()
def attention_diagonal(model: DocTr, examples: Sequence[Example]) -> tuple[float, float, float]:
    """Mean diagonal weight, mean off-diagonal row mass and mean off-diagonal weight.

    Averaged over decoder layers, documents and query positions of the
    language-conditioned attention.
    """
    model.eval()
    diag, off_mass, off_entry = [], [], []
    out = run_model(model, collate(examples, with_targets=False), return_attention=True)
    for attn in out.lc_attention:
        for b, ex in enumerate(examples):
            n = len(ex)
            a = attn[b, :n, :n].double()
            d = a.diagonal()
            diag.append(d.mean().item())
            off_mass.append((a.sum(-1) - d).mean().item())
            if n > 1:
                off_entry.append(((a.sum() - d.sum()) / (n * n - n)).item())
    mean = lambda xs: sum(xs) / max(len(xs), 1)  # noqa: E731
    return mean(diag), mean(off_mass), mean(off_entry)


def serialization(steps: int = 1500, wrap_prob: float = 0.9, seed: int = 5, n_train: int = 150,
                  n_eval: int = 50, anchor: AnchorConfig = AnchorConfig()) -> dict[tuple[str, str], dict[str, float]]:
    """Parsing/labeling/linking F1 for both heads under raster and oracle order."""
    train_docs, held_docs = receipt_split(seed, n_train, n_eval, wrap_prob=wrap_prob)
    scores = {}
    for head in ("anchor", "bioes"):
        for order in ("oracle", "raster_scan"):
            model = receipt_model(anchor, head)
            train = prepare(train_docs, model.cfg, anchor, order, head)
            held = prepare(held_docs, model.cfg, anchor, order, head)
            fit(model, train, OptimConfig(steps=steps, lr_drop=int(steps * 0.8)), RECEIPT_WEIGHTS, head=head)
            scores[head, order] = f1s(model, held, anchor, head)
            log.info("%s/%s %s", head, order, scores[head, order])
    return scores


def serialization_drop(scores: dict[tuple[str, str], dict[str, float]], head: str,
                       metric: str = "parsing") -> float:
    return scores[head, "oracle"][metric] - scores[head, "raster_scan"][metric]


def mdm_pretrain(anchor: AnchorConfig = AnchorConfig(), steps: int = 2000, n_docs: int = 1000,
                 seed: int = 99, mode: str = "mdm") -> tuple[DocTr, float, float]:
    """Masked pre-training on an unlabeled synthetic corpus.

    Returns the model with the held-out masked-box error before and after.
    """
    docs = synth_generate(SynthConfig(n_docs=n_docs, seed=seed))
    train_docs, held = docs[:-50], docs[-50:]
    mcfg = MaskingConfig(mode=mode, seed=3)
    model = receipt_model(anchor)
    before = masked_box_error(model, held, replace(mcfg, mode="mdm"))
    pretrain(model, train_docs, mcfg, OptimConfig(steps=steps, lr_drop=int(steps * 0.8)))
    after = masked_box_error(model, held, replace(mcfg, mode="mdm"))
    return model, before, after
