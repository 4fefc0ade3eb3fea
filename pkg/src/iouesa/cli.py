"""``iouesa`` command line: selftest | gradcheck | train | eval | ablate | bench.

Exit codes: 0 success, 1 assertion or numeric failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import checks, runs
from .errors import ContractError, DimensionError, DomainError, ModeError, NumericError, SpecError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key, value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iouesa", description="IoU-enhanced attention cascade detector, desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--attn-mode", choices=["full", "none", "iou", "iou-esa"])
        sp.add_argument("--dcw", choices=["on", "off"])
        sp.add_argument("--scenes", type=int, help="held-out evaluation scenes")
        if out:
            sp.add_argument("--out", type=Path, default=Path("runs"))

    sub.add_parser("selftest", help="per-module invariant checks")
    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("scope", help="primitives | modules | full")
    common(sub.add_parser("train", help="train on streamed synthetic scenes"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", type=Path)
    ab = sub.add_parser("ablate", help="attention x DCW ablation grid")
    common(ab)
    ab.add_argument("--jobs", type=int, default=1)
    common(sub.add_parser("bench", help="time one training step"), out=False)
    return p


def effective_config(args) -> runs.RunConfig:
    pairs = list(args.overrides)
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("attn_mode", "attn_mode"), ("dcw", "dcw"),
                      ("scenes", "eval_scenes")):
        value = getattr(args, flag, None)
        if value is not None:
            pairs.append((key, str(value)))
    return runs.load_config(args.config, pairs)


def _header(cfg: runs.RunConfig, command: str) -> str:
    return f"# iouesa {command}\n# effective config:\n" + "\n".join(
        "#   " + line for line in runs.format_config(cfg).splitlines())


def cmd_selftest(args) -> int:
    start = time.perf_counter()
    results = checks.run_selftest()
    print(checks.format_selftest(results, time.perf_counter() - start))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    if args.scope not in checks.GRADCHECK_SCOPES:
        print(f"unknown scope {args.scope!r}; expected one of {', '.join(checks.GRADCHECK_SCOPES)}",
              file=sys.stderr)
        return EXIT_USAGE
    errors, tol, seconds = checks.run_gradcheck(args.scope)
    ok = True
    for name, err in errors:
        flag = "ok" if err < tol else "FAIL"
        ok &= err < tol
        print(f"{name:<24}{err:12.3e}  {flag}")
    print(f"scope {args.scope}: worst {max(e for _, e in errors):.3e} (tolerance {tol:g}) in {seconds:.1f}s")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(args) -> int:
    cfg = effective_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    print(_header(cfg, "train"))
    res = runs.train(cfg)
    runs.write_jsonl(args.out / "run.jsonl", res.records)
    runs.save_model(args.out / "checkpoint.bin", res.state)
    # wall time lives beside the records so the records stay byte-reproducible
    (args.out / "timing.json").write_text(json.dumps({"seconds": res.seconds}) + "\n", encoding="utf-8")
    for rec in res.records:
        if rec["type"] == "step":
            print(f"step {rec['step']:>6}  loss {rec['mean_loss']:.4f}")
    print(f"AP@0.5 {res.ap50:.4f} on {cfg.eval_scenes} held-out scenes; {res.seconds:.1f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    ckpt = args.checkpoint or args.out / "checkpoint.bin"
    print(_header(cfg, "eval"))
    state = runs.load_model(ckpt, cfg)
    ap = runs.evaluate(state, cfg)
    print(f"AP@0.5 {ap:.4f} on {cfg.eval_scenes} held-out scenes")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    cells = runs.parse_grid(cfg.ablate_modes, cfg.ablate_seeds)
    rows = runs.run_grid(cfg, cells, args.jobs)
    order = list(dict.fromkeys((c.attn_mode, c.dcw) for c in cells))
    summary = runs.summarise(rows, order)
    dirs = runs.direction_checks(summary)
    header = _header(cfg, "ablate")
    (args.out / "ablation.csv").write_text(header + "\n" + runs.ablation_csv(summary), encoding="utf-8")
    text = header + "\n" + runs.ablation_text(summary, dirs)
    (args.out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    runs.write_jsonl(args.out / "ablation_cells.jsonl", rows)
    print(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .pipeline import ModelState, train_step
    from .synth_data import generate_scene

    cfg = effective_config(args)
    det = cfg.detector()
    state, opt = ModelState.init(det, cfg.seed), cfg.optimizer_state()
    scenes = [generate_scene(cfg.scene_spec(runs.train_scene_seed(cfg.seed, k))) for k in range(20)]
    train_step(scenes[0], state, det, opt)
    start = time.perf_counter()
    for sc in scenes:
        train_step(sc, state, det, opt)
    per = (time.perf_counter() - start) / len(scenes)
    print(_header(cfg, "bench"))
    print(f"train step {per * 1e3:.1f} ms; {cfg.steps} steps ~ {per * cfg.steps:.0f}s")
    return EXIT_OK


COMMANDS = {"selftest": cmd_selftest, "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ContractError, SpecError, ModeError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DomainError, DimensionError, AssertionError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
