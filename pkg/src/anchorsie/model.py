"""Toy-scale document transformer.

A language encoder over OCR words, a grid vision encoder, and a decoder
whose queries are bound one-to-one to OCR tokens through a shared position
embedding.  Each decoder layer splits queries into a vision half and a
language half (see ``VLDecoderLayer``).
"""
from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import Predictions
from .core import OcrSequence

PAD_ID, MASK_ID, UNK_ID = 0, 1, 2
N_SPECIAL = 3
MASK_TOKEN = "[MASK]"

CHECKPOINT_FORMAT = "anchorsie-ckpt"
CHECKPOINT_VERSION = "1"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_lang_layers: int = 2
    n_vis_layers: int = 2
    n_dec_layers: int = 3
    vocab_size: int = 1024
    max_seq_len: int = 128
    link_dim: int = 32
    grid_size: int = 16
    grid_channels: int = 8
    class_count: int = 27
    n_bins: int = 128
    ffn_mult: int = 2
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name not in ("seed", "dropout") and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.d_model % 2:
            raise ValueError("d_model must be even")
        if (self.d_model // 2) % self.n_heads:
            raise ValueError("d_model / 2 must be divisible by n_heads")
        if self.vocab_size <= N_SPECIAL:
            raise ValueError("vocab_size too small")

    @property
    def d(self) -> int:
        """Per-branch width inside the decoder."""
        return self.d_model // 2

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        return cls(**data)


_DIGIT = re.compile(r"\d")


def token_id(text: str, vocab_size: int) -> int:
    """Hashing word-level tokenizer; empty strings map to the OOV id.

    Digits are folded to ``0`` first, so "$12.50" and "$98.25" share an id:
    amounts carry their shape, not a per-value random code.
    """
    if not text:
        return UNK_ID
    if text == MASK_TOKEN:
        return MASK_ID
    key = _DIGIT.sub("0", text)
    return N_SPECIAL + zlib.crc32(key.encode("utf-8")) % (vocab_size - N_SPECIAL)


def encode_ocr(ocr: OcrSequence, cfg: ModelConfig):
    """Token ids, corner boxes and 1D positions for one document."""
    n = len(ocr)
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence of {n} words exceeds max_seq_len={cfg.max_seq_len}")
    ids = np.array([token_id(w.text, cfg.vocab_size) for w in ocr], dtype=np.int64)
    boxes = np.array([w.box.corners for w in ocr], dtype=np.float64).reshape(n, 4)
    return ids, np.clip(boxes, 0.0, 1.0), np.arange(n, dtype=np.int64)


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def box_xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


def sine_position_embedding(grid_size: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2D sine embedding, ``(grid_size**2, dim)``; y features then x features.

    Positions are ``index / grid_size * 2pi``, so cell (0, 0) starts with
    the pair ``(sin 0, cos 0)``.
    """
    if dim % 4:
        raise ValueError("sine embedding width must be divisible by 4")
    npf = dim // 2
    pos = torch.arange(grid_size, dtype=torch.float64) / grid_size * 2 * math.pi
    dim_t = temperature ** (2 * (torch.arange(npf, dtype=torch.float64) // 2) / npf)
    p = pos[:, None] / dim_t
    p = torch.stack([p[:, 0::2].sin(), p[:, 1::2].cos()], dim=2).flatten(1)
    py = p[:, None, :].expand(grid_size, grid_size, npf)
    px = p[None, :, :].expand(grid_size, grid_size, npf)
    return torch.cat([py, px], dim=-1).reshape(grid_size * grid_size, dim).float()


def lc_cross_attention(q: torch.Tensor, v: torch.Tensor, p: torch.Tensor,
                       key_padding_mask: torch.Tensor | None = None):
    """Language-conditioned cross-attention.

    ``softmax((q + p)(v + p)^T / sqrt(d)) v`` with the same ``p`` on both
    sides, so query ``i`` is drawn toward token ``i``.  Works on ``(L, d)``
    or batched ``(B, L, d)`` inputs; returns ``(output, attention)``.
    """
    if q.shape != v.shape or q.shape != p.shape:
        raise ValueError(f"shape mismatch: q{tuple(q.shape)} v{tuple(v.shape)} p{tuple(p.shape)}")
    if q.shape[-1] == 0:
        raise ValueError("attention width must be positive")
    for name, t in (("q", q), ("v", v), ("p", p)):
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite values in {name}")
    scores = (q + p) @ (v + p).transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_padding_mask is not None:
        scores = scores.masked_fill(key_padding_mask.unsqueeze(-2), float("-inf"))
    attn = scores.softmax(dim=-1)
    # fully padded rows (padding queries of an empty document) produce NaN
    attn = torch.nan_to_num(attn, nan=0.0)
    return attn @ v, attn


def _encoder_layer(width: int, heads: int, ffn_mult: int, dropout: float) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(width, heads, width * ffn_mult, dropout=dropout,
                                      activation="gelu", batch_first=True, norm_first=True)


class LanguageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.d_model
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, D)
        self.pos = nn.Embedding(cfg.max_seq_len, D)
        self.x_emb = nn.Embedding(cfg.n_bins, D)
        self.y_emb = nn.Embedding(cfg.n_bins, D)
        self.w_emb = nn.Embedding(cfg.n_bins, D)
        self.h_emb = nn.Embedding(cfg.n_bins, D)
        self.ln_in = nn.LayerNorm(D)
        self.layers = nn.ModuleList(_encoder_layer(D, cfg.n_heads, cfg.ffn_mult, cfg.dropout)
                                    for _ in range(cfg.n_lang_layers))
        self.ln_out = nn.LayerNorm(D)

    def layout_embedding(self, boxes: torch.Tensor) -> torch.Tensor:
        q = (boxes.clamp(0, 1) * (self.cfg.n_bins - 1)).round().long()
        x0, y0, x1, y1 = q.unbind(-1)
        w = (x1 - x0).clamp(min=0)
        h = (y1 - y0).clamp(min=0)
        return (self.x_emb(x0) + self.x_emb(x1) + self.y_emb(y0) + self.y_emb(y1)
                + self.w_emb(w) + self.h_emb(h))

    def forward(self, token_ids, boxes, position_ids, pad_mask):
        P = self.pos(position_ids)
        x = self.ln_in(self.tok(token_ids) + P + self.layout_embedding(boxes))
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=pad_mask)
        return self.ln_out(x), P


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.grid_channels, cfg.d)
        self.register_buffer("pos", sine_position_embedding(cfg.grid_size, cfg.d), persistent=False)
        self.layers = nn.ModuleList(_encoder_layer(cfg.d, cfg.n_heads, cfg.ffn_mult, cfg.dropout)
                                    for _ in range(cfg.n_vis_layers))
        self.ln_out = nn.LayerNorm(cfg.d)

    def forward(self, grid: torch.Tensor):
        G, C = self.cfg.grid_size, self.cfg.grid_channels
        if grid.shape[-3:] != (G, G, C):
            raise ValueError(f"grid shape {tuple(grid.shape)} does not match ({G}, {G}, {C})")
        pos = self.pos.to(grid.dtype)
        x = self.proj(grid.reshape(grid.shape[0], G * G, C)) + pos
        for layer in self.layers:
            x = layer(x)
        return self.ln_out(x), pos


class VLDecoderLayer(nn.Module):
    """Split-query decoder layer (pre-norm, residual around every block).

    Queries ``(B, L, D)`` are viewed as ``(B, 2L, D/2)`` for self-attention,
    then split into a vision half that attends to grid tokens and a language
    half that uses ``lc_cross_attention``.  The halves are concatenated and
    fused by a linear layer, followed by a feed-forward block.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D, d, H = cfg.d_model, cfg.d, cfg.n_heads
        self.branch = nn.Parameter(torch.zeros(2, d))
        self.sa_pos = nn.Linear(D, d)
        self.ln_sa = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)
        self.sa = nn.MultiheadAttention(d, H, batch_first=True)
        self.ln_v = nn.LayerNorm(d)
        self.ca_v = nn.MultiheadAttention(d, H, batch_first=True)
        self.ln_l = nn.LayerNorm(d)
        self.lc_value = nn.Linear(D, d)
        self.lc_pos = nn.Linear(D, d)
        self.lc_out = nn.Linear(d, d)
        self.ln_fuse = nn.LayerNorm(D)
        self.fuse = nn.Linear(D, D)
        self.ln_ffn = nn.LayerNorm(D)
        self.ffn = nn.Sequential(nn.Linear(D, D * cfg.ffn_mult), nn.GELU(),
                                 nn.Linear(D * cfg.ffn_mult, D))
        nn.init.normal_(self.branch, std=0.02)

    def forward(self, queries, vis, vis_pos, lang, P, pad_mask=None):
        B, L, D = queries.shape
        d = D // 2
        if vis.shape[-1] != d or lang.shape[:2] != (B, L) or P.shape != lang.shape:
            raise ValueError("decoder inputs do not match the query shape")
        x = queries.reshape(B, 2 * L, d)
        pos_d = self.sa_pos(P)
        pos2 = (pos_d.unsqueeze(2) + self.branch).reshape(B, 2 * L, d)
        mask2 = None if pad_mask is None else pad_mask.repeat_interleave(2, dim=1)
        h = self.ln_sa(x)
        x = x + self.drop(self.sa(h + pos2, h + pos2, h, key_padding_mask=mask2, need_weights=False)[0])

        halves = x.reshape(B, L, 2, d)
        qv, ql = halves[:, :, 0], halves[:, :, 1]
        h = self.ln_v(qv)
        qv = qv + self.drop(self.ca_v(h + pos_d, vis + vis_pos.expand_as(vis), vis, need_weights=False)[0])
        h = self.ln_l(ql)
        lc, attn = lc_cross_attention(h, self.lc_value(lang), self.lc_pos(P), pad_mask)
        ql = ql + self.drop(self.lc_out(lc))

        x = torch.cat([qv, ql], dim=-1)
        x = x + self.drop(self.fuse(self.ln_fuse(x)))
        x = x + self.drop(self.ffn(self.ln_ffn(x)))
        return x, attn


@dataclass
class ModelOutput:
    class_logits: torch.Tensor     # (B, L, K)
    boxes: torch.Tensor            # (B, L, 4) center-size in [0, 1]
    primary_logits: torch.Tensor   # (B, L)
    emb_p: torch.Tensor            # (B, L, h)
    emb_s: torch.Tensor            # (B, L, h)
    token_logits: torch.Tensor     # (B, L, vocab)
    pad_mask: torch.Tensor         # (B, L) True at padding
    lc_attention: list | None = None

    def predictions(self, b: int = 0) -> Predictions:
        n = int((~self.pad_mask[b]).sum())
        with torch.no_grad():
            probs = self.class_logits[b, :n].double().softmax(-1).numpy()
            boxes = self.boxes[b, :n].double().numpy()
            prim = torch.sigmoid(self.primary_logits[b, :n].double()).numpy()
            aff = affinity(self.emb_p[b, :n].double(), self.emb_s[b, :n].double()).numpy()
        return Predictions(probs, boxes, prim, aff)


def affinity(emb_p: torch.Tensor, emb_s: torch.Tensor) -> torch.Tensor:
    """``sigmoid(E_p E_s^T)``: primary rows by secondary columns."""
    if emb_p.shape[-1] != emb_s.shape[-1]:
        raise ValueError("embedding widths differ")
    return torch.sigmoid(emb_p @ emb_s.transpose(-1, -2))


# used as the box reference for masked (zero) input boxes
_FALLBACK_REF = (0.5, 0.5, 0.1, 0.03)


class DocTr(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        D = cfg.d_model
        self.language = LanguageEncoder(cfg)
        self.vision = VisionEncoder(cfg)
        self.query = nn.Embedding(cfg.max_seq_len, D)
        # shared by queries and language keys in the decoder; unit-scale rows
        # are close to orthogonal, so the one-to-one mapping holds from init
        self.dec_pos = nn.Embedding(cfg.max_seq_len, D)
        self.decoder = nn.ModuleList(VLDecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.ln_out = nn.LayerNorm(D)
        self.class_head = nn.Linear(D, cfg.class_count)
        self.box_head = nn.Sequential(nn.Linear(D, D), nn.GELU(), nn.Linear(D, 4))
        self.primary_head = nn.Linear(D, 1)
        self.p_head = nn.Linear(D, cfg.link_dim)
        self.s_head = nn.Linear(D, cfg.link_dim)
        self.token_head = nn.Linear(D, cfg.vocab_size)
        self._init(g)

    def _init(self, g: torch.Generator):
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                if name == "dec_pos.weight":
                    std = 1.0
                else:
                    std = 0.02 if "emb" in name or name.endswith(("tok.weight", "pos.weight", "query.weight")) \
                        else 1.0 / math.sqrt(p.shape[1])
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=g) * std)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
        nn.init.zeros_(self.box_head[-1].weight)
        nn.init.zeros_(self.box_head[-1].bias)

    def param_groups(self):
        lang = [p for n, p in self.named_parameters() if n.startswith("language.")]
        rest = [p for n, p in self.named_parameters() if not n.startswith("language.")]
        return lang, rest

    def forward(self, token_ids, boxes, position_ids, grid, pad_mask=None,
                return_attention: bool = False) -> ModelOutput:
        B, L = token_ids.shape
        if pad_mask is None:
            pad_mask = torch.zeros(B, L, dtype=torch.bool)
        dtype = self.query.weight.dtype
        if L == 0:
            return self._empty_output(B, dtype, pad_mask)
        boxes = boxes.to(dtype)
        grid = grid.to(dtype)
        V, _ = self.language(token_ids, boxes, position_ids, pad_mask)
        P = self.dec_pos(position_ids)
        vis, vis_pos = self.vision(grid)
        x = self.query(position_ids)
        attns = []
        for layer in self.decoder:
            x, attn = layer(x, vis, vis_pos, V, P, pad_mask)
            attns.append(attn)
        x = self.ln_out(x)

        ref = box_xyxy_to_cxcywh(boxes)
        empty = (ref[..., 2] <= 0) & (ref[..., 3] <= 0)
        fallback = torch.tensor(_FALLBACK_REF, dtype=dtype).expand_as(ref)
        ref = torch.where(empty.unsqueeze(-1), fallback, ref)
        out_boxes = torch.sigmoid(self.box_head(x) + inverse_sigmoid(ref))
        return ModelOutput(self.class_head(x), out_boxes, self.primary_head(x).squeeze(-1),
                           self.p_head(x), self.s_head(x), self.token_head(x), pad_mask,
                           attns if return_attention else None)

    def _empty_output(self, B: int, dtype, pad_mask) -> ModelOutput:
        c = self.cfg

        def z(*shape):
            return torch.zeros(B, 0, *shape, dtype=dtype)

        return ModelOutput(z(c.class_count), z(4), z(), z(c.link_dim), z(c.link_dim),
                           z(c.vocab_size), pad_mask, [])

    def forward_ocr(self, ocr: OcrSequence, grid: np.ndarray, return_attention: bool = False) -> ModelOutput:
        ids, boxes, pos = encode_ocr(ocr, self.cfg)
        return self(torch.from_numpy(ids)[None], torch.from_numpy(boxes)[None],
                    torch.from_numpy(pos)[None], torch.as_tensor(grid)[None],
                    return_attention=return_attention)


# ---------------------------------------------------------------------------
# checkpoints

class CheckpointError(ValueError):
    pass


def save_checkpoint(model: DocTr, path: str | Path, extra: dict | None = None) -> None:
    from safetensors.torch import save_file

    tensors = {k: v.detach().float().contiguous() for k, v in model.state_dict().items()}
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "model_config": json.dumps(model.cfg.to_json(), sort_keys=True),
            "extra": json.dumps(extra or {}, sort_keys=True)}
    save_file(tensors, str(path), metadata=meta)


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict, dict]:
    from safetensors import safe_open
    from safetensors.torch import load_file

    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
    except Exception as exc:  # safetensors raises several unrelated types
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format tag {meta.get('format')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {meta.get('version')!r}")
    cfg = ModelConfig.from_json(json.loads(meta["model_config"]))
    return cfg, load_file(str(path)), json.loads(meta.get("extra", "{}"))


# output stage: re-initialized when fine-tuning starts from a pre-trained trunk
HEAD_PREFIXES = ("ln_out.", "class_head.", "box_head.", "primary_head.", "p_head.", "s_head.", "token_head.")


def trunk_state(state: dict) -> dict:
    """``state`` without the output stage (final norm and every task head)."""
    return {k: v for k, v in state.items() if not k.startswith(HEAD_PREFIXES)}


def load_into(model: DocTr, state: dict, strict_heads: bool = True) -> list[str]:
    """Copy checkpoint tensors into ``model``; returns names left untouched.

    Shape mismatches raise ``CheckpointError`` listing every offender, except
    for the task heads when ``strict_heads`` is false (pretrained trunks are
    loaded under a different class head).
    """
    own = model.state_dict()
    bad, skipped = [], []
    for name, t in state.items():
        if name not in own:
            bad.append(f"{name}: unexpected")
        elif own[name].shape != t.shape:
            if not strict_heads and name.startswith("class_head."):
                skipped.append(name)
                continue
            bad.append(f"{name}: checkpoint {tuple(t.shape)} vs model {tuple(own[name].shape)}")
    if bad:
        raise CheckpointError("incompatible checkpoint:\n  " + "\n  ".join(bad))
    keep = {k: v for k, v in state.items() if k not in skipped}
    missing = [k for k in own if k not in keep]
    model.load_state_dict(keep, strict=False)
    return missing + skipped
