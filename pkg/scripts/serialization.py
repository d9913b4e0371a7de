"""Serialization sensitivity: anchor head vs BIOES head under raster and oracle order.

The corpus wraps most multi-word item names onto a second row, so raster
order interleaves them with the count/price of the row above.

    python3 scripts/serialization.py --steps 1500 --wrap 0.9
"""
import argparse
import json
import logging
from pathlib import Path

from anchorsie.experiments import serialization, serialization_drop


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--wrap", type=float, default=0.9, help="probability that an item name wraps")
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--out", default="runs/serialization.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    scores = serialization(args.steps, args.wrap, args.seed)
    print(f"{'head':<8}{'order':<13}{'parsing':>9}{'labeling':>10}{'linking':>9}")
    for (head, order), s in scores.items():
        print(f"{head:<8}{order:<13}{s['parsing']:9.4f}{s['labeling']:10.4f}{s['linking']:9.4f}")
    drops = {h: serialization_drop(scores, h) for h in ("anchor", "bioes")}
    print("raster-vs-oracle parsing drop:", {h: round(d, 4) for h, d in drops.items()})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"scores": {f"{h}/{o}": s for (h, o), s in scores.items()},
                               "drop": drops}, indent=2))


if __name__ == "__main__":
    main()
