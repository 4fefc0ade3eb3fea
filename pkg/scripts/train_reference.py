"""Train the reference configuration and report AP@0.5 on the held-out scenes.

    python scripts/train_reference.py [--seeds 0 1 2] [--out runs/reference]

Each seed writes run.jsonl, checkpoint.bin and timing.json under OUT/seed<k>.
"""
import argparse
import json
import statistics
import sys
from pathlib import Path

from iouesa import cli

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "reference.cfg")
    parser.add_argument("--out", type=Path, default=Path("runs/reference"))
    args = parser.parse_args()
    aps = []
    for seed in args.seeds:
        out = args.out / f"seed{seed}"
        code = cli.main(["train", "--config", str(args.config), "--seed", str(seed), "--out", str(out)])
        if code:
            return code
        records = [json.loads(line) for line in (out / "run.jsonl").read_text().splitlines()]
        aps.append(next(r["ap50"] for r in records if r["type"] == "eval"))
    for seed, ap in zip(args.seeds, aps):
        print(f"seed {seed}: AP@0.5 {ap:.4f}")
    if len(aps) > 1:
        print(f"median {statistics.median(aps):.4f}  min {min(aps):.4f}  max {max(aps):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
