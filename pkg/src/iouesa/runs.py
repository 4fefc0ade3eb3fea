"""Run configuration, training/evaluation loops and the ablation grid.

Configs are flat ``key = value`` text files.  Precedence is built-in
defaults < config file < ``--set`` overrides < dedicated CLI flags.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable

from . import tensor as T
from .attention import AttnMode
from .errors import ContractError
from .pipeline import DetectorConfig, ModelState, OptimizerState, lr_at, predict, train_step
from .synth_data import SceneSpec, evaluate_ap, generate_scene

TRAIN_SEED_BASE = 1_000
EVAL_SEED_BASE = 1_000_000


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 2000
    eval_scenes: int = 200
    log_every: int = 50
    batch_size: int = 1
    # optimiser
    optimizer: str = "adamw"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    # detector
    attn_mode: str = "iou-esa"
    dcw: bool = True
    num_queries: int = 10
    d_model: int = 32
    heads: int = 4
    num_stages: int = 2
    pool_size: int = 7
    samples_per_bin: int = 2
    box_init: str = "grid"
    dynamic_width: int = 32
    # scenes
    image_size: int = 128
    objects_min: int = 2
    objects_max: int = 6
    overlap_bias: float = 0.5
    size_min: int = 24
    size_max: int = 56
    channels: int = 32
    stride: float = 8.0
    noise_sigma: float = 0.05
    part_strength: float = 3.0
    # ablation grid
    ablate_modes: str = "none:off,iou:off,full:off,iou-esa:on"
    ablate_seeds: int = 5
    ablate_steps: int = 1000
    ablate_eval_scenes: int = 100
    ablate_overlap: float = 0.9

    def __post_init__(self):
        AttnMode.parse(self.attn_mode)
        if self.steps < 0 or self.eval_scenes < 0 or self.log_every < 1 or self.batch_size < 1:
            raise ContractError("steps and eval_scenes must be >= 0; log_every and batch_size >= 1")
        self.detector()
        self.scene_spec(0)
        self.optimizer_state()

    def detector(self) -> DetectorConfig:
        return DetectorConfig(num_queries=self.num_queries, d_model=self.d_model, heads=self.heads,
                              num_stages=self.num_stages, attn_mode=self.attn_mode, dcw_enabled=self.dcw,
                              disentangle_mode="dcw" if self.dcw else "entangled", pool_size=self.pool_size,
                              samples_per_bin=self.samples_per_bin, in_channels=self.channels,
                              box_init=self.box_init, dynamic_width=self.dynamic_width)

    def scene_spec(self, seed: int, overlap_bias: float | None = None) -> SceneSpec:
        return SceneSpec(seed=seed, image_w=self.image_size, image_h=self.image_size,
                         num_objects=(self.objects_min, self.objects_max),
                         overlap_bias=self.overlap_bias if overlap_bias is None else overlap_bias,
                         size_range=(self.size_min, self.size_max), channels=self.channels, stride=self.stride,
                         noise_sigma=self.noise_sigma, part_strength=self.part_strength)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                              clip_norm=self.clip_norm, kind=self.optimizer)

    def as_dict(self) -> dict:
        return asdict(self)


_BOOL = {"on": True, "true": True, "1": True, "yes": True, "off": False, "false": False, "0": False, "no": False}


def _coerce(key: str, raw: str, kind):
    text = raw.strip()
    try:
        if kind is bool or kind == "bool":
            return _BOOL[text.lower()]
        if kind is int or kind == "int":
            return int(text, 0)
        if kind is float or kind == "float":
            return float(text)
    except (KeyError, ValueError) as exc:
        raise ContractError(f"bad value for {key}: {raw!r}") from exc
    return text


def apply_overrides(cfg: RunConfig, pairs: Iterable[tuple[str, str]]) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in types:
            raise ContractError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw, types[key])
    return replace(cfg, **updates)


def parse_config_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides: Iterable[tuple[str, str]] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text(encoding="utf-8")))
    return apply_overrides(cfg, overrides)


def format_config(cfg: RunConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in cfg.as_dict().items())


# ---------------------------------------------------------------------------
# training and evaluation


def train_scene_seed(run_seed: int, index: int) -> int:
    return TRAIN_SEED_BASE + run_seed * 10_000_000 + index


def eval_scene_seeds(count: int) -> list[int]:
    """Held-out scenes: a fixed block disjoint from every training stream."""
    return [EVAL_SEED_BASE + i for i in range(count)]


def evaluate(state: ModelState, cfg: RunConfig, count: int | None = None,
             overlap_bias: float | None = None) -> float:
    det = cfg.detector()
    scenes = [generate_scene(cfg.scene_spec(s, overlap_bias)) for s in
              eval_scene_seeds(cfg.eval_scenes if count is None else count)]
    preds = [predict(sc, state, det) for sc in scenes]
    return evaluate_ap(preds, [sc.targets for sc in scenes])


@dataclass
class TrainResult:
    state: ModelState
    records: list[dict]
    ap50: float
    seconds: float


def train(cfg: RunConfig, eval_count: int | None = None, overlap_bias: float | None = None,
          steps: int | None = None) -> TrainResult:
    """Stream seeded scenes through ``train_step``; records hold no wall-clock data."""
    steps = cfg.steps if steps is None else steps
    det = cfg.detector()
    state = ModelState.init(det, cfg.seed)
    opt = cfg.optimizer_state()
    records: list[dict] = [{"type": "config", "config": cfg.as_dict()}]
    start = time.perf_counter()
    window: list[float] = []
    for k in range(steps):
        batch = [generate_scene(cfg.scene_spec(train_scene_seed(cfg.seed, k * cfg.batch_size + j), overlap_bias))
                 for j in range(cfg.batch_size)]
        res = train_step(batch, state, det, opt, lr_at(k, steps, cfg.lr))
        window.append(res.loss)
        if (k + 1) % cfg.log_every == 0 or k + 1 == steps:
            records.append({"type": "step", "step": k + 1, "loss": res.loss, "mean_loss": sum(window) / len(window),
                            "stage_losses": res.stage_losses, "grad_norm": res.grad_norm})
            window = []
    ap = evaluate(state, cfg, eval_count, overlap_bias)
    records.append({"type": "eval", "step": steps, "ap50": ap,
                    "scenes": cfg.eval_scenes if eval_count is None else eval_count})
    return TrainResult(state, records, ap, time.perf_counter() - start)


def write_jsonl(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def save_model(path, state: ModelState) -> None:
    T.save_checkpoint(path, state.state_dict())


def load_model(path, cfg: RunConfig) -> ModelState:
    state = ModelState.init(cfg.detector(), cfg.seed)
    state.load_state_dict(T.load_checkpoint(path))
    return state


# ---------------------------------------------------------------------------
# ablation grid


@dataclass(frozen=True)
class Cell:
    attn_mode: str
    dcw: bool
    seed: int

    @property
    def label(self) -> str:
        return f"{self.attn_mode}{'+dcw' if self.dcw else ''}"


def parse_grid(spec: str, seeds: int) -> list[Cell]:
    """``"full:off,iou-esa:on"`` times ``range(seeds)``; duplicate cells are an error."""
    cells = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        mode, _, flag = item.partition(":")
        mode = AttnMode.parse(mode).value
        dcw = _coerce("ablate_modes", flag or "off", bool)
        cells.extend(Cell(mode, dcw, s) for s in range(seeds))
    if len(set(cells)) != len(cells):
        raise ContractError(f"duplicate cells in ablation grid {spec!r}")
    if not cells:
        raise ContractError("empty ablation grid")
    return cells


def run_cell(cfg: RunConfig, cell: Cell) -> dict:
    sub = replace(cfg, attn_mode=cell.attn_mode, dcw=cell.dcw, seed=cell.seed)
    res = train(sub, eval_count=cfg.ablate_eval_scenes, overlap_bias=cfg.ablate_overlap, steps=cfg.ablate_steps)
    return {"attn_mode": cell.attn_mode, "dcw": cell.dcw, "seed": cell.seed, "ap50": res.ap50}


def _cell_worker(args):
    return run_cell(*args)


def run_grid(cfg: RunConfig, cells: list[Cell], jobs: int = 1) -> list[dict]:
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_cell_worker, [(cfg, c) for c in cells]))
    else:
        rows = [run_cell(cfg, c) for c in cells]
    return sorted(rows, key=lambda r: (r["attn_mode"], r["dcw"], r["seed"]))


def summarise(rows: list[dict], order: list[tuple[str, bool]]) -> list[dict]:
    out = []
    for mode, dcw in order:
        aps = [r["ap50"] for r in rows if r["attn_mode"] == mode and r["dcw"] == dcw]
        out.append({"attn_mode": mode, "dcw": dcw, "seeds": len(aps), "median_ap50": statistics.median(aps),
                    "aps": aps})
    return out


def direction_checks(summary: list[dict]) -> list[tuple[str, bool | None]]:
    """Orderings from the published ablations; ``None`` when a cell is missing."""
    med = {(s["attn_mode"], s["dcw"]): s["median_ap50"] for s in summary}

    def le(a, b):
        return None if a not in med or b not in med else med[a] <= med[b]

    return [
        ("median AP none <= iou", le(("none", False), ("iou", False))),
        ("median AP iou <= full", le(("iou", False), ("full", False))),
        ("median AP full <= iou-esa+dcw", le(("full", False), ("iou-esa", True))),
    ]


def ablation_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attn_mode", "dcw", "seeds", "median_ap50", "aps"])
    for s in summary:
        w.writerow([s["attn_mode"], "on" if s["dcw"] else "off", s["seeds"], f"{s['median_ap50']:.6f}",
                    " ".join(f"{a:.6f}" for a in s["aps"])])
    return buf.getvalue()


def ablation_text(summary: list[dict], checks: list[tuple[str, bool | None]]) -> str:
    lines = [f"{'cell':<16}{'seeds':>6}{'median AP@0.5':>16}"]
    for s in summary:
        label = s["attn_mode"] + ("+dcw" if s["dcw"] else "")
        lines.append(f"{label:<16}{s['seeds']:>6}{s['median_ap50']:>16.4f}")
    lines.append("")
    lines.append("direction checks (reported, not gating):")
    for name, ok in checks:
        lines.append(f"  {'n/a ' if ok is None else ('pass' if ok else 'FAIL')}  {name}")
    return "\n".join(lines)
