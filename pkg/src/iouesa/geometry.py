"""Axis-aligned box algebra in corner form ``(x1, y1, x2, y2)``.

Scalar helpers work on :class:`Box`; the vectorised ones take ``(N, 4)``
arrays or Tensors.  Box regression uses the centre-size delta form
``(dx, dy, dw, dh)``: ``cx' = cx + dx*w``, ``w' = w*exp(dw)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DELTA_CLAMP = 4.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def normalized(self) -> "Box":
        return Box(min(self.x1, self.x2), min(self.y1, self.y2),
                   max(self.x1, self.x2), max(self.y1, self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass
class BoxSet:
    """``N`` boxes on an ``image_w x image_h`` canvas, stored as an (N, 4) array."""

    xyxy: np.ndarray
    image_w: float
    image_h: float

    def __post_init__(self):
        self.xyxy = np.asarray(self.xyxy, dtype=np.float64).reshape(-1, 4)
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError(f"image size must be positive, got {self.image_w}x{self.image_h}")

    @classmethod
    def from_boxes(cls, boxes: Iterable[Box], image_w: float, image_h: float) -> "BoxSet":
        return cls(np.array([b.as_array() for b in boxes]).reshape(-1, 4), image_w, image_h)

    def __len__(self) -> int:
        return self.xyxy.shape[0]

    def __getitem__(self, i: int) -> Box:
        return Box(*map(float, self.xyxy[i]))

    @property
    def boxes(self) -> list[Box]:
        return [self[i] for i in range(len(self))]

    def clamped(self) -> "BoxSet":
        lim = np.array([self.image_w, self.image_h, self.image_w, self.image_h])
        xy = np.clip(self.xyxy, 0.0, lim)
        lo = np.minimum(xy[:, :2], xy[:, 2:])
        hi = np.maximum(xy[:, :2], xy[:, 2:])
        return BoxSet(np.concatenate([lo, hi], axis=1), self.image_w, self.image_h)

    def normalized_coords(self) -> np.ndarray:
        return self.xyxy / np.array([self.image_w, self.image_h, self.image_w, self.image_h])


def _inter_union(ax1, ay1, ax2, ay2, bx1, by1, bx2, by2):
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter, union


def iou(a: Box, b: Box) -> float:
    inter, union = _inter_union(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2)
    if union <= 0.0 or inter <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    inter, union = _inter_union(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2)
    if union <= 0.0:
        return 0.0
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclose - union) / enclose


def pairwise_iou(boxes) -> Tensor:
    """``(N, N)`` IoU matrix; same arithmetic as :func:`iou`, so results agree exactly."""
    xy = boxes.xyxy if isinstance(boxes, BoxSet) else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1, y1, x2, y2 = (xy[:, k] for k in range(4))
    iw = np.maximum(0.0, np.minimum(x2[:, None], x2[None, :]) - np.maximum(x1[:, None], x1[None, :]))
    ih = np.maximum(0.0, np.minimum(y2[:, None], y2[None, :]) - np.maximum(y1[:, None], y1[None, :]))
    inter = iw * ih
    area = (x2 - x1) * (y2 - y1)
    union = area[:, None] + area[None, :] - inter
    ok = (union > 0.0) & (inter > 0.0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=ok)
    return Tensor(out)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(N, M)`` GIoU between two box arrays (no gradient)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    ih = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    cw = np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0])
    ch = np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])
    enclose = cw * ch
    safe_union = np.where(union > 0, union, 1.0)
    safe_enclose = np.where(enclose > 0, enclose, 1.0)
    out = inter / safe_union - (enclose - union) / safe_enclose
    return np.where(union > 0, out, 0.0)


def giou_tensor(pred: Tensor, gt: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Row-wise GIoU between predicted ``(K, 4)`` boxes and constant targets."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    px1, py1, px2, py2 = (pred[:, k] for k in range(4))
    gx1, gy1, gx2, gy2 = (gt[:, k] for k in range(4))
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    union = T.maximum(union, eps)
    enclose = (T.maximum(px2, gx2) - T.minimum(px1, gx1)) * (T.maximum(py2, gy2) - T.minimum(py1, gy1))
    enclose = T.maximum(enclose, eps)
    return inter / union - (enclose - union) / enclose


def decode_boxes(boxes: Tensor, deltas: Tensor, image_w: float, image_h: float,
                 min_size: float = 0.0) -> Tensor:
    """Apply centre-size deltas to ``(N, 4)`` corner boxes and clamp to the image.

    ``dw`` and ``dh`` are clamped to +-4 before exponentiation.  ``min_size``
    floors the source width/height so a collapsed box can still grow.
    """
    boxes, deltas = T.as_tensor(boxes), T.as_tensor(deltas)
    x1, y1, x2, y2 = (boxes[:, k] for k in range(4))
    w = x2 - x1
    h = y2 - y1
    if min_size > 0.0:
        w = T.maximum(w, min_size)
        h = T.maximum(h, min_size)
    cx = x1 + 0.5 * (x2 - x1)
    cy = y1 + 0.5 * (y2 - y1)
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = T.clip(deltas[:, 2], -DELTA_CLAMP, DELTA_CLAMP)
    dh = T.clip(deltas[:, 3], -DELTA_CLAMP, DELTA_CLAMP)
    ncx = cx + dx * w
    ncy = cy + dy * h
    half_w = 0.5 * (w * T.exp(dw))
    half_h = 0.5 * (h * T.exp(dh))
    out = T.stack([
        T.clip(ncx - half_w, 0.0, image_w),
        T.clip(ncy - half_h, 0.0, image_h),
        T.clip(ncx + half_w, 0.0, image_w),
        T.clip(ncy + half_h, 0.0, image_h),
    ], axis=1)
    return out


def apply_deltas(b: Box, deltas: Sequence[float], image_w: float, image_h: float) -> Box:
    out = decode_boxes(Tensor(b.as_array()[None, :]), Tensor(np.asarray(deltas, dtype=np.float64)[None, :]),
                       image_w, image_h)
    return Box(*map(float, out.data[0])).normalized()


def encode_deltas(src: Box, dst: Box) -> np.ndarray:
    """Deltas that :func:`apply_deltas` maps ``src`` onto ``dst`` (no clamping)."""
    w, h = src.width, src.height
    cx, cy = src.x1 + 0.5 * w, src.y1 + 0.5 * h
    tw, th = dst.width, dst.height
    tcx, tcy = dst.x1 + 0.5 * tw, dst.y1 + 0.5 * th
    return np.array([(tcx - cx) / w, (tcy - cy) / h, math.log(tw / w), math.log(th / h)])


# ---------------------------------------------------------------------------
# CSV: header "x1,y1,x2,y2,class_id"; the class column is optional on read.

CSV_HEADER = ["x1", "y1", "x2", "y2", "class_id"]


def write_boxes_csv(path, boxes: BoxSet, classes: Sequence[int] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER if classes is not None else CSV_HEADER[:4])
        for i, row in enumerate(boxes.xyxy):
            vals = [repr(float(v)) for v in row]
            if classes is not None:
                vals.append(str(int(classes[i])))
            writer.writerow(vals)


def read_boxes_csv(path, image_w: float, image_h: float) -> tuple[BoxSet, list[int] | None]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_class = len(header) >= 5
        rows, classes = [], []
        for rec in reader:
            if not rec:
                continue
            rows.append([float(v) for v in rec[:4]])
            if has_class:
                classes.append(int(rec[4]))
    return BoxSet(np.array(rows).reshape(-1, 4), image_w, image_h), (classes if has_class else None)
