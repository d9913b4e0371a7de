"""Train on 200 synthetic receipts and score 50 held-out ones.

    python3 scripts/generalization.py --steps 3000 --out runs/generalization.json
"""
import argparse
import json
import logging
from pathlib import Path

from anchorsie.codec import AnchorConfig
from anchorsie.experiments import Thresholds, generalization
from anchorsie.model import save_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=7, help="corpus seed")
    ap.add_argument("--anchor-mode", default="first", choices=("first", "last", "first_last"))
    ap.add_argument("--every", type=int, default=250)
    ap.add_argument("--full", action="store_true", help="train all steps instead of stopping at the thresholds")
    ap.add_argument("--out", default="runs/generalization.json")
    ap.add_argument("--checkpoint", help="save the trained model here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    model, trace = generalization(AnchorConfig(anchor_mode=args.anchor_mode), args.steps, args.seed,
                                  None if args.full else Thresholds(), args.every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"history": trace.history, "hit_step": trace.hit_step,
                               "steps": trace.steps, "seconds": trace.seconds}, indent=2))
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    print(json.dumps(trace.final, indent=2))


if __name__ == "__main__":
    main()
