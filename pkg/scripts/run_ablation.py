"""Attention x DCW ablation on high-overlap scenes; writes ablation.csv/.txt under --out.

    python scripts/run_ablation.py [--jobs 4] [--out runs/ablation] [--set ablate_seeds=5]
"""
import sys

from iouesa import cli

if __name__ == "__main__":
    argv = sys.argv[1:]
    if "--out" not in argv:
        argv += ["--out", "runs/ablation"]
    sys.exit(cli.main(["ablate", *argv]))
