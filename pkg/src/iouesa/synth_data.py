"""Seeded synthetic detection scenes: crowded rectangles on a feature map.

All randomness comes from :class:`SplitMix64`, a 64-bit generator defined
entirely by integer arithmetic::

    state = (state + 0x9E3779B97F4A7C15) mod 2**64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    return z ^ (z >> 31)

Box geometry is sampled with integer operations only, so target boxes are
identical on every platform.  Uniform floats are ``(z >> 11) * 2**-53``;
normals use Box-Muller on pairs of uniforms.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SpecError
from .geometry import BoxSet, pairwise_iou, read_boxes_csv, write_boxes_csv
from .losses import Targets
from .roi_align import FeatureMap

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
PROTOTYPE_SEED = 0x5EED_C1A55
PART_SEED = 0x5EED_9A27


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi]`` via the multiply-shift range reduction."""
        span = hi - lo + 1
        if span <= 0:
            raise SpecError(f"empty integer range [{lo}, {hi}]")
        return lo + ((self.next_u64() * span) >> 64)

    def bernoulli(self, p: float) -> bool:
        return self.next_u64() < int(p * (1 << 64))

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def _block(self, count: int) -> np.ndarray:
        """The next ``count`` outputs as a uint64 array (same values as repeated ``next_u64``)."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, count + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * GOLDEN) & MASK64
        return z

    def uniforms(self, count: int) -> np.ndarray:
        return (self._block(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normals(self, count: int) -> np.ndarray:
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs)
        u1 = 1.0 - u[0::2]                 # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[:count]


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_w: int = 128
    image_h: int = 128
    num_objects: tuple[int, int] = (2, 6)
    overlap_bias: float = 0.5
    size_range: tuple[int, int] = (24, 56)
    channels: int = 32
    stride: float = 8.0
    noise_sigma: float = 0.05
    num_classes: int = 1
    signature_jitter: float = 0.25
    part_strength: float = 0.0

    def validate(self) -> None:
        lo, hi = self.num_objects
        smin, smax = self.size_range
        if lo < 0 or hi < lo:
            raise SpecError(f"bad object-count range {self.num_objects}")
        if smin < 2 or smax < smin:
            raise SpecError(f"bad size range {self.size_range}; sizes must be >= 2 px")
        if smin > min(self.image_w, self.image_h):
            raise SpecError(f"minimum object size {smin} exceeds the image {self.image_w}x{self.image_h}")
        if not 0.0 <= self.overlap_bias <= 1.0:
            raise SpecError(f"overlap_bias must lie in [0, 1], got {self.overlap_bias}")
        if self.channels < 4:
            raise SpecError(f"need at least 4 feature channels, got {self.channels}")
        if self.num_classes < 1:
            raise SpecError("need at least one class")
        if not 0.0 <= self.signature_jitter < 1.0:
            raise SpecError(f"signature_jitter must lie in [0, 1), got {self.signature_jitter}")
        if self.part_strength < 0.0:
            raise SpecError(f"part_strength must be >= 0, got {self.part_strength}")


@dataclass
class Scene:
    targets: Targets
    feature_map: FeatureMap
    spec: SceneSpec = field(default_factory=SceneSpec)

    @property
    def image_w(self) -> float:
        return float(self.spec.image_w)

    @property
    def image_h(self) -> float:
        return float(self.spec.image_h)


def _sample_boxes(rng: SplitMix64, spec: SceneSpec) -> tuple[list[list[int]], list[int]]:
    count = rng.randint(*spec.num_objects)
    smax = min(spec.size_range[1], spec.image_w, spec.image_h)
    boxes: list[list[int]] = []
    classes: list[int] = []
    for _ in range(count):
        w = rng.randint(spec.size_range[0], min(smax, spec.image_w))
        h = rng.randint(spec.size_range[0], min(smax, spec.image_h))
        if boxes and rng.bernoulli(spec.overlap_bias):
            ax1, ay1, ax2, ay2 = boxes[rng.randint(0, len(boxes) - 1)]
            # centre within about half an anchor-size of the anchor's centre
            jx, jy = max(1, (ax2 - ax1) // 2), max(1, (ay2 - ay1) // 2)
            cx = (ax1 + ax2) // 2 + rng.randint(-jx, jx)
            cy = (ay1 + ay2) // 2 + rng.randint(-jy, jy)
            x1 = min(max(cx - w // 2, 0), spec.image_w - w)
            y1 = min(max(cy - h // 2, 0), spec.image_h - h)
        else:
            x1 = rng.randint(0, spec.image_w - w)
            y1 = rng.randint(0, spec.image_h - h)
        boxes.append([x1, y1, x1 + w, y1 + h])
        classes.append(rng.randint(0, spec.num_classes - 1))
    return boxes, classes


def class_prototypes(num_classes: int, channels: int) -> np.ndarray:
    """Fixed per-class channel profiles in [0.5, 1.5], shared by all scenes."""
    return 0.5 + SplitMix64(PROTOTYPE_SEED).uniforms(num_classes * channels).reshape(num_classes, channels)


def part_directions(channels: int) -> np.ndarray:
    """Two fixed standard-normal channel directions for the horizontal and vertical part code."""
    return SplitMix64(PART_SEED).normals(2 * channels).reshape(2, channels)


def render_features(targets: Targets, d: int, stride: float, rng: SplitMix64 | None = None,
                    noise_sigma: float = 0.05, image_w: float | None = None,
                    image_h: float | None = None, num_classes: int | None = None,
                    signature_jitter: float = 0.25, part_strength: float = 0.0) -> FeatureMap:
    """Stamp each object as a separable triangular bump times a channel signature.

    The signature is the object's class prototype scaled per channel by a
    factor in ``[1 - signature_jitter, 1 + signature_jitter]`` drawn from ``rng``; Gaussian noise of standard
    deviation ``noise_sigma`` is added everywhere.

    With ``part_strength > 0`` each object also stamps ``bump * (u * a + v * b)``
    scaled by ``part_strength``, where ``u, v`` in ``[-1, 1]`` is the position
    relative to the box centre and ``a, b`` come from ``part_directions``.  A
    backbone feature differs between the left and right edge of an object;
    without this term every position on an object points the same way in
    channel space and only the amplitude carries the extent.
    """
    if d < 4:
        raise SpecError(f"need at least 4 feature channels, got {d}")
    rng = rng if rng is not None else SplitMix64(0)
    image_w = targets.boxes.image_w if image_w is None else image_w
    image_h = targets.boxes.image_h if image_h is None else image_h
    hf = max(1, int(math.ceil(image_h / stride)))
    wf = max(1, int(math.ceil(image_w / stride)))
    ncls = num_classes if num_classes is not None else max(targets.classes, default=0) + 1
    protos = class_prototypes(ncls, d)
    dir_u, dir_v = part_directions(d)
    xs = (np.arange(wf) + 0.5) * stride
    ys = (np.arange(hf) + 0.5) * stride
    fmap = np.zeros((d, hf, wf))
    for (x1, y1, x2, y2), cls in zip(targets.boxes.xyxy, targets.classes):
        half_w, half_h = 0.5 * (x2 - x1), 0.5 * (y2 - y1)
        u = (xs - (x1 + half_w)) / half_w
        v = (ys - (y1 + half_h)) / half_h
        bump = np.maximum(0.0, 1.0 - np.abs(v))[:, None] * np.maximum(0.0, 1.0 - np.abs(u))[None, :]
        signature = protos[cls] * (1.0 - signature_jitter + 2.0 * signature_jitter * rng.uniforms(d))
        fmap += signature[:, None, None] * bump[None]
        if part_strength:
            fmap += part_strength * (dir_u[:, None, None] * (bump * u[None, :])[None]
                                     + dir_v[:, None, None] * (bump * v[:, None])[None])
    fmap += noise_sigma * rng.normals(fmap.size).reshape(fmap.shape)
    return FeatureMap(fmap, stride)


def generate_scene(spec: SceneSpec) -> Scene:
    spec.validate()
    rng = SplitMix64(spec.seed)
    boxes, classes = _sample_boxes(rng, spec)
    targets = Targets(BoxSet(np.array(boxes, dtype=np.float64).reshape(-1, 4), spec.image_w, spec.image_h),
                      classes)
    fm = render_features(targets, spec.channels, spec.stride, rng, spec.noise_sigma,
                         spec.image_w, spec.image_h, spec.num_classes, spec.signature_jitter,
                         spec.part_strength)
    return Scene(targets, fm, spec)


def mean_pairwise_iou(targets: Targets) -> float:
    n = len(targets)
    if n < 2:
        return 0.0
    mat = pairwise_iou(targets.boxes).data
    return float(mat[np.triu_indices(n, k=1)].mean())


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Detections:
    """Scored boxes for one scene."""

    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.classes is None:
            self.classes = np.zeros(len(self.scores), dtype=np.int64)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)


def _ap_single_class(preds: list[tuple[float, int, tuple]], gts: dict[int, np.ndarray], threshold: float,
                     total: int) -> float:
    # sort key is content-based so the input order of predictions never matters
    preds = sorted(preds, key=lambda p: (-p[0], p[1], p[2]))
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(preds))
    for rank, (_, scene, box) in enumerate(preds):
        cand = gts.get(scene)
        if cand is None or len(cand) == 0:
            continue
        ious = pairwise_iou(np.vstack([np.array(box)[None, :], cand])).data[0, 1:]
        ious[taken[scene]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            taken[scene][best] = True
            tp[rank] = 1.0
    if not preds:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / total
    precision = ctp / np.arange(1, len(preds) + 1)
    # all-point interpolation: precision envelope integrated over recall steps
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_ap(predictions: Sequence[Detections], targets: Sequence[Targets],
                iou_threshold: float = 0.5) -> float:
    """Mean over classes of single-threshold AP; ``nan`` if there are no targets at all."""
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} prediction sets for {len(targets)} scenes")
    classes = sorted({c for t in targets for c in t.classes})
    if not classes:
        return math.nan
    aps = []
    for cls in classes:
        gts = {}
        total = 0
        for k, t in enumerate(targets):
            sel = [i for i, c in enumerate(t.classes) if c == cls]
            gts[k] = t.boxes.xyxy[sel]
            total += len(sel)
        preds = []
        for k, det in enumerate(predictions):
            for box, score, c in zip(det.boxes, det.scores, det.classes):
                if c == cls:
                    preds.append((float(score), k, tuple(float(v) for v in box)))
        aps.append(_ap_single_class(preds, gts, iou_threshold, total))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# scene files: <stem>.csv for targets, <stem>.fmap for the feature map.
# .fmap layout (little-endian): b"IESAFMAP", u32 ndim, ndim x u64 dims,
# f64 stride, then the row-major f64 values.

FMAP_MAGIC = b"IESAFMAP"


def write_feature_map(path, fm: FeatureMap) -> None:
    arr = np.ascontiguousarray(fm.data.data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<d", float(fm.stride)))
        fh.write(arr.tobytes())


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FMAP_MAGIC:
        raise ValueError(f"{path} is not a feature-map file")
    (ndim,) = struct.unpack_from("<I", blob, 8)
    shape = struct.unpack_from(f"<{ndim}Q", blob, 12)
    pos = 12 + 8 * ndim
    (stride,) = struct.unpack_from("<d", blob, pos)
    pos += 8
    data = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=pos).astype(np.float64)
    return FeatureMap(data.reshape(shape), stride)


def export_scene(scene: Scene, stem) -> None:
    stem = str(stem)
    write_boxes_csv(stem + ".csv", scene.targets.boxes, scene.targets.classes)
    write_feature_map(stem + ".fmap", scene.feature_map)


def import_scene(stem, spec: SceneSpec | None = None) -> Scene:
    stem = str(stem)
    spec = spec or SceneSpec()
    boxes, classes = read_boxes_csv(stem + ".csv", spec.image_w, spec.image_h)
    classes = classes if classes is not None else [0] * len(boxes)
    return Scene(Targets(boxes, classes), read_feature_map(stem + ".fmap"), spec)
