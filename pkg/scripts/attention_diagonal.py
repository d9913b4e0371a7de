"""Overfit a few receipts and measure how diagonal the language-conditioned attention is.

    python3 scripts/attention_diagonal.py --docs 8
"""
import argparse
import json

import torch

from anchorsie.codec import AnchorConfig
from anchorsie.experiments import attention_diagonal, overfit
from anchorsie.model import lc_cross_attention


def limit_curve(L: int = 8, d: int = 16, scales=(1.0, 3.0, 10.0, 30.0, 100.0)) -> dict[float, float]:
    """Mean diagonal weight for Q = V = 0 and orthogonal position rows of norm ``s``."""
    basis = torch.linalg.qr(torch.randn(d, d, dtype=torch.float64, generator=torch.Generator().manual_seed(0)))[0]
    zeros = torch.zeros(L, d, dtype=torch.float64)
    return {s: lc_cross_attention(zeros, zeros, s * basis[:L])[1].diagonal().mean().item() for s in scales}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--docs", type=int, default=8)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--anchor-mode", default="first_last", choices=("first", "last", "first_last"))
    args = ap.parse_args()

    print("limit:", json.dumps(limit_curve()))
    model, examples, trace = overfit(AnchorConfig(anchor_mode=args.anchor_mode), args.docs, steps=args.steps)
    diag, off_mass, off_entry = attention_diagonal(model, examples)
    print(json.dumps({"fit_step": trace.hit_step, "final": trace.final, "diagonal": diag,
                      "off_diagonal_row_mass": off_mass, "off_diagonal_weight": off_entry}, indent=2))


if __name__ == "__main__":
    main()
