"""RoI align on a single-level feature map.

Grid convention: cell ``(i, j)`` has its centre at image point
``((j + 0.5) * stride, (i + 0.5) * stride)``, so image coordinate ``x`` maps
to grid coordinate ``x / stride - 0.5``.  Samples outside the grid are
clamped to the border cells.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import BoxSet
from .tensor import Tensor, as_tensor

DEFAULT_POOL = 7
DEFAULT_SAMPLES = 2


@dataclass
class FeatureMap:
    """``(d, H_f, W_f)`` features; ``stride`` image pixels per cell."""

    data: Tensor
    stride: float = 8.0

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.data.ndim != 3 or min(self.data.shape[1:]) < 1:
            raise ValueError(f"feature map must be (d, H, W) with H, W >= 1, got {self.data.shape}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _corners(gx: np.ndarray, gy: np.ndarray, h: int, w: int):
    """Flat cell indices and bilinear weights of the four cells around each point."""
    gx = np.clip(gx, 0.0, w - 1)
    gy = np.clip(gy, 0.0, h - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    lx = gx - x0
    ly = gy - y0
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    wts = np.stack([(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx], axis=-1)
    return idx, wts


def bilinear_sample(fm: FeatureMap, x: float, y: float) -> np.ndarray:
    """Interpolated ``d``-vector at grid coordinates ``(x, y)``."""
    idx, wts = _corners(np.array([x], dtype=np.float64), np.array([y], dtype=np.float64),
                        fm.height, fm.width)
    flat = fm.data.data.reshape(fm.channels, -1)
    return flat[:, idx[0]] @ wts[0]


def sampling_matrix(fm: FeatureMap, boxes, s: int, samples_per_bin: int) -> sp.csr_matrix:
    """Sparse ``(N*s*s, H*W)`` operator mapping flattened cells to pooled bins."""
    xy = boxes.xyxy if isinstance(boxes, BoxSet) else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = xy.shape[0]
    k = samples_per_bin
    # fractional positions of the samples inside the box along one axis: (s*k,)
    frac = ((np.arange(s)[:, None] + (np.arange(k)[None, :] + 0.5) / k) / s).reshape(-1)
    px = xy[:, 0:1] + frac[None, :] * (xy[:, 2:3] - xy[:, 0:1])     # (N, s*k)
    py = xy[:, 1:2] + frac[None, :] * (xy[:, 3:4] - xy[:, 1:2])
    gx = px / fm.stride - 0.5
    gy = py / fm.stride - 0.5
    gxx = np.broadcast_to(gx[:, None, :], (n, s * k, s * k))
    gyy = np.broadcast_to(gy[:, :, None], (n, s * k, s * k))
    idx, wts = _corners(gxx, gyy, fm.height, fm.width)              # (N, s*k, s*k, 4)
    # output row of each sample: box n, bin (row // k, col // k)
    bins = np.arange(s * k) // k
    row_bin = bins[:, None] * s + bins[None, :]                     # (s*k, s*k)
    rows = np.arange(n)[:, None, None] * (s * s) + row_bin[None, :, :]
    rows = np.broadcast_to(rows[..., None], idx.shape)
    mat = sp.coo_matrix((wts.reshape(-1) / (k * k), (rows.reshape(-1), idx.reshape(-1))),
                        shape=(n * s * s, fm.height * fm.width))
    return mat.tocsr()


def roi_align(fm: FeatureMap, boxes, s: int = DEFAULT_POOL, samples_per_bin: int = DEFAULT_SAMPLES) -> Tensor:
    """Pool every box to ``(s*s, d)``; output ``(N, s*s, d)``, bins row-major.

    Differentiable with respect to the feature map only; box coordinates are
    treated as constants.
    """
    if s < 1 or samples_per_bin < 1:
        raise ValueError(f"s and samples_per_bin must be >= 1, got {s}, {samples_per_bin}")
    n = len(boxes) if isinstance(boxes, BoxSet) else np.asarray(boxes).reshape(-1, 4).shape[0]
    d, h, w = fm.data.shape
    mat = sampling_matrix(fm, boxes, s, samples_per_bin)
    cells = fm.data.data.reshape(d, h * w).T                        # (H*W, d)
    out = np.asarray(mat @ cells).reshape(n, s * s, d)

    def _back(g):
        gcells = np.asarray(mat.T @ g.reshape(n * s * s, d))        # (H*W, d)
        return (gcells.T.reshape(d, h, w),)

    return Tensor.from_op(out, (fm.data,), _back)
