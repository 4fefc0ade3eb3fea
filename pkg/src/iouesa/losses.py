"""Bipartite matching and the composite set-prediction loss.

Each stage is matched to the targets independently with the Hungarian
algorithm on ``lambda_cls*cls + lambda_l1*L1 + lambda_giou*(1 - GIoU)``, then
the same three terms are applied to the matched pairs.  Unmatched
predictions only contribute the classification term, as negatives.  Every
term is divided by ``max(1, M)`` where ``M`` is the number of targets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .geometry import Box, BoxSet, giou, giou_tensor, pairwise_giou
from .tensor import Tensor


@dataclass(frozen=True)
class CostConfig:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_l1, self.lambda_giou) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Targets:
    boxes: BoxSet
    classes: list[int]

    def __post_init__(self):
        self.classes = [int(c) for c in self.classes]
        if len(self.classes) != len(self.boxes):
            raise ContractError(f"{len(self.boxes)} target boxes but {len(self.classes)} class ids")

    def __len__(self) -> int:
        return len(self.classes)


@dataclass
class MatchResult:
    assignment: list[tuple[int, int]]
    total_cost: float

    @property
    def pred_indices(self) -> list[int]:
        return [p for p, _ in self.assignment]

    @property
    def target_indices(self) -> list[int]:
        return [t for _, t in self.assignment]


# ---------------------------------------------------------------------------
# per-term losses


def focal_loss_tensor(logits: Tensor, labels, cfg: CostConfig) -> Tensor:
    """Elementwise sigmoid focal loss; ``labels`` is a 0/1 array shaped like ``logits``.

    Uses ``-log p = softplus(-x)`` and ``-log(1-p) = softplus(x)`` so that
    large logits never produce ``log(0)``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    sp_pos = T.softplus(logits)        # -log(1 - p)
    sp_neg = T.softplus(-logits)       # -log p
    pos = a * T.exp(-g * sp_pos) * sp_neg
    neg = (1.0 - a) * T.exp(-g * sp_neg) * sp_pos
    return labels * pos + (1.0 - labels) * neg


def focal_loss(logit: float, is_positive: bool, cfg: CostConfig = CostConfig()) -> float:
    out = focal_loss_tensor(Tensor(np.array([float(logit)])), np.array([1.0 if is_positive else 0.0]), cfg)
    return float(out.data[0])


def _focal_cost(logits: np.ndarray, cfg: CostConfig) -> np.ndarray:
    """Positive minus negative focal term for every (prediction, class)."""
    a, g = cfg.focal_alpha, cfg.focal_gamma
    sp_pos = np.logaddexp(0.0, logits)
    sp_neg = np.logaddexp(0.0, -logits)
    pos = a * np.exp(-g * sp_pos) * sp_neg
    neg = (1.0 - a) * np.exp(-g * sp_neg) * sp_pos
    return pos - neg


def l1_box_loss(pred: Box, gt: Box, image_w: float, image_h: float) -> float:
    scale = np.array([image_w, image_h, image_w, image_h])
    return float(np.abs(pred.as_array() / scale - gt.as_array() / scale).sum())


def giou_loss(pred: Box, gt: Box) -> float:
    return 1.0 - giou(pred, gt)


# ---------------------------------------------------------------------------
# matching


def _box_array(boxes) -> np.ndarray:
    if isinstance(boxes, BoxSet):
        return boxes.xyxy
    if isinstance(boxes, Tensor):
        return boxes.data
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def cost_matrix(preds, targets: Targets, cfg: CostConfig) -> Tensor:
    """``(N, M)`` matching cost; ``preds`` needs ``class_logits``, ``boxes``, ``image_w``, ``image_h``."""
    logits = preds.class_logits.data if isinstance(preds.class_logits, Tensor) else np.asarray(preds.class_logits)
    pb = _box_array(preds.boxes)
    n = pb.shape[0]
    m = len(targets)
    if m == 0:
        return Tensor(np.zeros((n, 0)))
    scale = np.array([preds.image_w, preds.image_h, preds.image_w, preds.image_h])
    tb = targets.boxes.xyxy
    cls = _focal_cost(logits, cfg)[:, targets.classes]
    l1 = np.abs((pb / scale)[:, None, :] - (tb / scale)[None, :, :]).sum(axis=-1)
    gl = 1.0 - pairwise_giou(pb, tb)
    return Tensor(cfg.lambda_cls * cls + cfg.lambda_l1 * l1 + cfg.lambda_giou * gl)


def _solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path assignment for ``rows <= cols``.

    Returns ``(col_of_row, u, v)`` where ``u, v`` are optimal duals
    (``cost[i, j] - u[i] - v[j] >= 0``, zero on the assignment, ``v`` zero on
    unassigned columns).
    """
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)     # row (1-based) owning column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    padded = np.zeros((n + 1, m + 1))
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _subcost(c: np.ndarray, rows: list[int], cols: list[int]) -> tuple[float, list[int]]:
    if not rows:
        return 0.0, []
    sub = c[np.ix_(rows, cols)]
    sol, _, _ = _solve(sub)
    picked = [cols[k] for k in sol]
    return float(sum(c[r, p] for r, p in zip(rows, picked))), picked


def hungarian(cost) -> MatchResult:
    """Minimum-cost injective map from targets (columns) to predictions (rows).

    ``cost`` is ``(N, M)`` with ``N >= M``.  Among optimal assignments the one
    whose target-to-prediction vector is lexicographically smallest is
    returned, so ties resolve deterministically.
    """
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {c.shape}")
    n, m = c.shape
    if m == 0:
        return MatchResult([], 0.0)
    if n < m:
        raise ContractError(f"need at least as many predictions as targets, got {n} < {m}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    ct = np.ascontiguousarray(c.T)               # rows: targets, cols: predictions
    current, u, v = _solve(ct)
    current = [int(x) for x in current]
    tol = 1e-9 * max(1.0, float(np.abs(ct).max()) * m)

    used: set[int] = set()
    for j in range(m):
        reduced = ct[j] - u[j] - v
        cands = [i for i in range(n) if i < current[j] and i not in used and reduced[i] <= tol]
        if cands:
            rest_rows = list(range(j + 1, m))
            cur_val = float(sum(ct[r, current[r]] for r in range(j, m)))
            for i in cands:
                cols = [k for k in range(n) if k not in used and k != i]
                val, picked = _subcost(ct, rest_rows, cols)
                if ct[j, i] + val <= cur_val + tol:
                    current[j] = i
                    current[j + 1:] = picked
                    break
        used.add(current[j])

    pairs = [(current[j], j) for j in range(m)]
    total = float(sum(c[p, t] for p, t in pairs))
    return MatchResult(pairs, total)


# ---------------------------------------------------------------------------
# set loss


@dataclass
class StageLoss:
    total: Tensor
    cls: float
    l1: float
    giou: float
    match: MatchResult


def stage_loss(out, targets: Targets, cfg: CostConfig, match: MatchResult | None = None) -> StageLoss:
    """Loss of one stage; ``match`` overrides the Hungarian assignment when given."""
    logits = out.class_logits
    n, num_classes = logits.shape
    m = len(targets)
    norm = 1.0 / max(1, m)
    labels = np.zeros((n, num_classes))
    if m == 0:
        match = MatchResult([], 0.0)
    elif match is None:
        match = hungarian(cost_matrix(out, targets, cfg))
    preds = np.array(match.pred_indices, dtype=np.int64)
    tgts = np.array(match.target_indices, dtype=np.int64)
    if m:
        labels[preds, np.asarray(targets.classes)[tgts]] = 1.0
    cls = T.tsum(focal_loss_tensor(logits, labels, cfg)) * norm
    total = cfg.lambda_cls * cls
    l1_val = giou_val = 0.0
    if m:
        scale = np.array([out.image_w, out.image_h, out.image_w, out.image_h])
        matched = out.boxes[preds]
        gt = targets.boxes.xyxy[tgts]
        l1 = T.tsum(T.tabs(matched * (1.0 / scale) - gt / scale)) * norm
        gl = T.tsum(1.0 - giou_tensor(matched, gt)) * norm
        total = total + cfg.lambda_l1 * l1 + cfg.lambda_giou * gl
        l1_val, giou_val = l1.item(), gl.item()
    return StageLoss(total, cls.item(), l1_val, giou_val, match)


def set_loss(all_stage_outputs: Sequence, targets: Targets, cfg: CostConfig,
             matches: Sequence[MatchResult] | None = None, return_stages: bool = False):
    """Sum of per-stage losses, each stage matched on its own predictions."""
    stages = [stage_loss(out, targets, cfg, None if matches is None else matches[k])
              for k, out in enumerate(all_stage_outputs)]
    total = stages[0].total
    for st in stages[1:]:
        total = total + st.total
    return (total, stages) if return_stages else total
