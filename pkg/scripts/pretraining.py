"""Masked pre-training, then fine-tuning on the 200/50 receipt split.

Compares how many steps fine-tuning needs to reach the generalization
thresholds with and without pre-training, for one or more masking modes.

    python3 scripts/pretraining.py --modes mdm mvlm --pretrain-steps 2000
"""
import argparse
import json
import logging
from pathlib import Path

from anchorsie.experiments import generalization, mdm_pretrain


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--modes", nargs="+", default=["mdm"], choices=("mlm", "mvlm", "mdm"))
    ap.add_argument("--pretrain-steps", type=int, default=2000)
    ap.add_argument("--finetune-steps", type=int, default=3000)
    ap.add_argument("--skip-scratch", action="store_true")
    ap.add_argument("--out", default="runs/pretraining.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    report = {}
    if not args.skip_scratch:
        _, trace = generalization(steps=args.finetune_steps)
        report["scratch"] = {"hit_step": trace.hit_step, "final": trace.final}
        print("scratch", report["scratch"])
    for mode in args.modes:
        model, before, after = mdm_pretrain(steps=args.pretrain_steps, mode=mode)
        _, trace = generalization(steps=args.finetune_steps, init_state=model.state_dict())
        report[mode] = {"hit_step": trace.hit_step, "final": trace.final,
                        "masked_box_error": {"untrained": before, "pretrained": after}}
        print(mode, report[mode])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
