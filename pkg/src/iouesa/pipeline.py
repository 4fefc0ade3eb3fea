"""The cascade detector: stages of attention, RoI pooling and the dynamic head.

One stage maps queries ``q (N, d)`` and boxes ``b (N, 4)`` to class logits,
refined boxes and next-stage queries:

1. IoU matrix of the input boxes (data, no gradient);
2. self attention per ``attn_mode`` with residual and layer norm
   (skipped entirely for ``NO_MSA``);
3. RoI align over the input boxes;
4. dynamic conv with weights generated from the attended queries;
5. feature split for the two heads, per ``disentangle_mode``;
6. class logits from the classification embedding, box deltas from the
   regression embedding, decoded onto the input boxes;
7. query update from the two embeddings.

Between stages the boxes are detached; queries keep their gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttnConfig, AttnMode, MhsaParams, self_attention
from .dynamic_head import (ChannelMaskHeads, DynamicConv, ObjectEmbeddings, apply_dcw, dcw_masks,
                           flatten_rois, project_embeddings, update_query)
from .errors import ContractError, NumericError
from .geometry import BoxSet, decode_boxes, pairwise_iou
from .layers import FFN, LayerNorm, Linear
from .losses import CostConfig, Targets, set_loss
from .roi_align import FeatureMap, roi_align
from .synth_data import Detections, Scene
from .tensor import Parameter, Tensor

DISENTANGLE_MODES = ("entangled", "half_dim", "full_dim", "dcw")
FULL_SCALE_NUM_STAGES = 6
MIN_BOX_SIZE = 1.0
CLS_PRIOR = 0.01


@dataclass(frozen=True)
class DetectorConfig:
    num_queries: int = 10
    d_model: int = 32
    heads: int = 4
    num_stages: int = 2
    attn_mode: AttnMode = AttnMode.IOU_ESA
    dcw_enabled: bool = True
    disentangle_mode: str = "dcw"
    cost: CostConfig = field(default_factory=CostConfig)
    pool_size: int = 7
    samples_per_bin: int = 2
    num_classes: int = 1
    in_channels: int = 32
    box_init: str = "full"
    cls_layers: int = 0
    reg_layers: int = 0
    dynamic_width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "attn_mode", AttnMode.parse(self.attn_mode))
        if self.num_stages < 1:
            raise ContractError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.disentangle_mode not in DISENTANGLE_MODES:
            raise ContractError(f"disentangle_mode must be one of {DISENTANGLE_MODES}")
        if self.dcw_enabled != (self.disentangle_mode == "dcw"):
            raise ContractError("dcw_enabled and disentangle_mode='dcw' must agree")
        if self.d_model % 8:
            raise ContractError(f"d_model must be a multiple of 8, got {self.d_model}")
        if self.dynamic_width is not None and self.dynamic_width < 1:
            raise ContractError(f"dynamic_width must be >= 1, got {self.dynamic_width}")
        if self.cls_layers < 0 or self.reg_layers < 0:
            raise ContractError("head depths must be >= 0")
        if self.box_init not in ("full", "grid"):
            raise ContractError(f"box_init must be 'full' or 'grid', got {self.box_init!r}")
        AttnConfig(self.d_model, self.heads)

    @property
    def attn(self) -> AttnConfig:
        return AttnConfig(self.d_model, self.heads)

    @property
    def d_k(self) -> int:
        return self.dynamic_width if self.dynamic_width is not None else self.d_model // 4

    @property
    def d_b(self) -> int:
        return self.d_model // 4

    def with_mode(self, attn_mode=None, dcw: bool | None = None) -> "DetectorConfig":
        cfg = self
        if attn_mode is not None:
            cfg = replace(cfg, attn_mode=AttnMode.parse(attn_mode))
        if dcw is not None:
            cfg = replace(cfg, dcw_enabled=dcw, disentangle_mode="dcw" if dcw else "entangled")
        return cfg


@dataclass
class StageParams:
    attn: MhsaParams
    attn_norm: LayerNorm
    convs: list[DynamicConv]           # one for dcw/entangled, two (cls, reg) for split modes
    masks: ChannelMaskHeads | None
    proj_c: Linear
    proj_r: Linear | None              # None when the two heads share one embedding
    cls_norm: LayerNorm
    cls_out: Linear
    reg_norm: LayerNorm
    reg_out: Linear
    ffn: FFN
    ffn_norm: LayerNorm
    cls_tower: list[tuple[Linear, LayerNorm]] = field(default_factory=list)
    reg_tower: list[tuple[Linear, LayerNorm]] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        out = self.attn.parameters() + self.attn_norm.parameters()
        for conv in self.convs:
            out += conv.parameters()
        if self.masks is not None:
            out += self.masks.parameters()
        out += self.proj_c.parameters()
        if self.proj_r is not None:
            out += self.proj_r.parameters()
        for part in (self.cls_norm, self.cls_out, self.reg_norm, self.reg_out, self.ffn, self.ffn_norm):
            out += part.parameters()
        for lin, norm in self.cls_tower + self.reg_tower:
            out += lin.parameters() + norm.parameters()
        return out


def init_stage(cfg: DetectorConfig, rng: np.random.Generator, k: int) -> StageParams:
    d, s2, c_in = cfg.d_model, cfg.pool_size ** 2, cfg.in_channels
    name = f"stage{k}"
    mode = cfg.disentangle_mode
    if mode in ("dcw", "entangled"):
        convs = [DynamicConv.init(d, c_in, cfg.d_k, d, rng, f"{name}.dyn")]
        branch_in = d
    else:
        half = d // 2
        convs = [DynamicConv.init(half, c_in, cfg.d_k // 2, half, rng, f"{name}.dyn_cls"),
                 DynamicConv.init(half, c_in, cfg.d_k // 2, half, rng, f"{name}.dyn_reg")]
        branch_in = half
    emb = d // 2 if mode == "half_dim" else d
    masks = ChannelMaskHeads.init(d, cfg.d_b, rng, f"{name}.dcw") if mode == "dcw" else None
    proj_c = Linear.init(s2 * branch_in, emb, rng, f"{name}.proj_cls")
    proj_r = None if mode == "entangled" else Linear.init(s2 * branch_in, emb, rng, f"{name}.proj_reg")
    bias = -math.log((1.0 - CLS_PRIOR) / CLS_PRIOR)
    return StageParams(
        attn=MhsaParams.init(cfg.attn, rng, f"{name}.attn"),
        attn_norm=LayerNorm.init(d, f"{name}.attn_norm"),
        convs=convs,
        masks=masks,
        proj_c=proj_c,
        proj_r=proj_r,
        cls_norm=LayerNorm.init(emb, f"{name}.cls_norm"),
        cls_out=Linear.init(emb, cfg.num_classes, rng, f"{name}.cls_out", bias=bias),
        reg_norm=LayerNorm.init(emb, f"{name}.reg_norm"),
        reg_out=Linear.init(emb, 4, rng, f"{name}.reg_out", scale=1e-3),
        ffn=FFN.init(d, 2 * d, rng, f"{name}.ffn"),
        ffn_norm=LayerNorm.init(d, f"{name}.ffn_norm"),
        cls_tower=[(Linear.init(emb, emb, rng, f"{name}.cls{j}"), LayerNorm.init(emb, f"{name}.cls{j}_norm"))
                   for j in range(cfg.cls_layers)],
        reg_tower=[(Linear.init(emb, emb, rng, f"{name}.reg{j}"), LayerNorm.init(emb, f"{name}.reg{j}_norm"))
                   for j in range(cfg.reg_layers)],
    )


def grid_proposals(n: int) -> np.ndarray:
    """``n`` normalised (cx, cy, w, h) boxes tiling the image in near-equal rows.

    Row ``r`` of ``round(sqrt(n))`` rows holds ``n // rows`` boxes, plus one for
    the first ``n % rows`` rows; each box spans one row/column pitch.
    """
    rows = max(1, int(round(math.sqrt(n))))
    counts = [n // rows + (r < n % rows) for r in range(rows)]
    out = []
    for r, k in enumerate(counts):
        cy = (r + 0.5) / rows
        for c in range(k):
            out.append([(c + 0.5) / k, cy, min(0.98, 1.0 / k), min(0.98, 1.0 / rows)])
    return np.array(out)


def _logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class ModelState:
    q0: Parameter
    b0: Parameter                      # raw; sigmoid gives normalised (cx, cy, w, h)
    stages: list[StageParams]

    @classmethod
    def init(cls, cfg: DetectorConfig, seed: int = 0) -> "ModelState":
        rng = np.random.default_rng(seed)
        n = cfg.num_queries
        q0 = Parameter(rng.normal(0.0, 1.0, (n, cfg.d_model)), "q0")
        if cfg.box_init == "full":
            # every proposal starts as (almost) the whole image
            raw = np.tile(_logit(np.array([0.5, 0.5, 0.98, 0.98])), (n, 1))
        else:
            raw = _logit(grid_proposals(n))
        b0 = Parameter(raw, "b0")
        return cls(q0, b0, [init_stage(cfg, rng, k) for k in range(cfg.num_stages)])

    def parameters(self) -> list[Parameter]:
        params = [self.q0, self.b0]
        for st in self.stages:
            params += st.parameters()
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names in model")
        return params

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for p in self.parameters():
            yield p.name, p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in values:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint shape {arr.shape} for {name!r}, model expects {p.shape}")
            p.data = arr.copy()


@dataclass
class StageOutput:
    class_logits: Tensor
    boxes: Tensor                      # (N, 4) decoded, clamped, pixel corners
    queries_out: Tensor
    image_w: float
    image_h: float

    @property
    def box_set(self) -> BoxSet:
        return BoxSet(self.boxes.data.copy(), self.image_w, self.image_h)


def initial_boxes(state: ModelState, image_w: float, image_h: float) -> Tensor:
    """Sigmoid of ``b0`` as normalised centre-size, converted to pixel corners."""
    cxcywh = T.sigmoid(state.b0)
    cx, cy, w, h = (cxcywh[:, k] for k in range(4))
    return T.stack([
        T.clip((cx - 0.5 * w) * image_w, 0.0, image_w),
        T.clip((cy - 0.5 * h) * image_h, 0.0, image_h),
        T.clip((cx + 0.5 * w) * image_w, 0.0, image_w),
        T.clip((cy + 0.5 * h) * image_h, 0.0, image_h),
    ], axis=1)


def _finite(t: Tensor, stage: int, step: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in stage {stage} at step '{step}'")
    return t


def _tower(x: Tensor, layers: list[tuple[Linear, LayerNorm]]) -> Tensor:
    for lin, norm in layers:
        x = T.relu(norm(lin(x)))
    return x


def _head_features(q: Tensor, r: Tensor, p: StageParams, cfg: DetectorConfig,
                   force_masks_one: bool = False) -> tuple[ObjectEmbeddings, Tensor]:
    """Embeddings for the two heads and the ``q_sum`` input of the query update."""
    mode = cfg.disentangle_mode
    if mode == "dcw":
        feats = p.convs[0](q, r)
        if force_masks_one:
            r_c = r_r = feats
        else:
            m_c, m_r = dcw_masks(q, p.masks)
            r_c, r_r = apply_dcw(feats, m_c), apply_dcw(feats, m_r)
        o = project_embeddings(r_c, r_r, p.proj_c, p.proj_r)
    elif mode == "entangled":
        shared = p.proj_c(flatten_rois(p.convs[0](q, r)))
        o = ObjectEmbeddings(shared, shared)
    else:
        half = cfg.d_model // 2
        f_c = p.convs[0](q[:, :half], r)
        f_r = p.convs[1](q[:, half:], r)
        o = project_embeddings(f_c, f_r, p.proj_c, p.proj_r)
    return o


def forward_stage(q: Tensor, boxes: Tensor, fm: FeatureMap, p: StageParams, cfg: DetectorConfig,
                  image_w: float, image_h: float, stage: int = 0,
                  force_masks_one: bool = False, sample_boxes: np.ndarray | None = None) -> StageOutput:
    """One cascade stage.

    ``sample_boxes`` overrides the geometry used for the IoU matrix and RoI
    pooling (default: the values of ``boxes``); decoding always starts from
    ``boxes``.  Gradient checks use it to freeze the non-differentiated paths.
    """
    boxes = T.as_tensor(boxes)
    box_data = boxes.data if sample_boxes is None else np.asarray(sample_boxes, dtype=np.float64)
    if cfg.attn_mode is not AttnMode.NO_MSA:
        iou = pairwise_iou(box_data)
        q = p.attn_norm(q + self_attention(q, iou, p.attn, cfg.attn, cfg.attn_mode))
        _finite(q, stage, "attention")
    r = roi_align(fm, box_data, cfg.pool_size, cfg.samples_per_bin)
    o = _head_features(q, r, p, cfg, force_masks_one)
    _finite(o.o_c, stage, "embeddings")
    logits = _finite(p.cls_out(_tower(T.relu(p.cls_norm(o.o_c)), p.cls_tower)), stage, "class head")
    deltas = _finite(p.reg_out(_tower(T.relu(p.reg_norm(o.o_r)), p.reg_tower)), stage, "box head")
    new_boxes = _finite(decode_boxes(boxes, deltas, image_w, image_h, MIN_BOX_SIZE), stage, "box decode")
    if cfg.disentangle_mode == "half_dim":
        q_sum = T.concat([o.o_c, o.o_r], axis=1)
        q_next = p.ffn_norm(q_sum + p.ffn(q_sum))
    elif cfg.disentangle_mode == "entangled":
        q_next = p.ffn_norm(o.o_c + p.ffn(o.o_c))
    else:
        q_next = update_query(o, p.ffn, p.ffn_norm)
    _finite(q_next, stage, "query update")
    return StageOutput(logits, new_boxes, q_next, float(image_w), float(image_h))


def forward(fm: FeatureMap, state: ModelState, cfg: DetectorConfig, image_w: float,
            image_h: float) -> list[StageOutput]:
    q = state.q0
    boxes = initial_boxes(state, image_w, image_h)
    outputs = []
    for k, p in enumerate(state.stages[:cfg.num_stages]):
        out = forward_stage(q, boxes, fm, p, cfg, image_w, image_h, stage=k)
        outputs.append(out)
        boxes = out.boxes.detach()
        q = out.queries_out
    return outputs


def predict(scene: Scene, state: ModelState, cfg: DetectorConfig) -> Detections:
    """Last-stage boxes scored by their best class probability."""
    last = forward(scene.feature_map, state, cfg, scene.image_w, scene.image_h)[-1]
    probs = 1.0 / (1.0 + np.exp(-last.class_logits.data))
    return Detections(last.boxes.data.copy(), probs.max(axis=1), probs.argmax(axis=1))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    """Gradient descent with decoupled weight decay and global-norm clipping.

    ``kind="sgd"`` is heavy-ball momentum; ``kind="adamw"`` uses bias-corrected
    first and second moments (``momentum`` is beta1, ``beta2`` the second).
    """

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    kind: str = "sgd"
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ContractError(f"optimizer kind must be 'sgd' or 'adamw', got {self.kind!r}")

    def step(self, params: list[Parameter], lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        scale = self.clip_norm / norm if self.clip_norm > 0 and norm > self.clip_norm else 1.0
        self.t += 1
        for p, g in zip(params, grads):
            g = g * scale
            buf = self.buffers.get(p.name)
            if self.kind == "sgd":
                buf = g if buf is None else self.momentum * buf + g
                update = buf
            else:
                sq = self.second.get(p.name)
                buf = (1 - self.momentum) * g if buf is None else self.momentum * buf + (1 - self.momentum) * g
                sq = (1 - self.beta2) * g * g if sq is None else self.beta2 * sq + (1 - self.beta2) * g * g
                self.second[p.name] = sq
                m_hat = buf / (1 - self.momentum ** self.t)
                v_hat = sq / (1 - self.beta2 ** self.t)
                update = m_hat / (np.sqrt(v_hat) + self.eps)
            self.buffers[p.name] = buf
            p.data = p.data - lr * self.weight_decay * p.data - lr * update
        return norm


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Base rate, dropped by 10x after 75% of the run."""
    return base_lr * (0.1 if total_steps > 0 and step >= int(0.75 * total_steps) else 1.0)


@dataclass
class StepResult:
    loss: float
    stage_losses: list[float]
    grad_norm: float


def train_step(scenes: Scene | list[Scene], state: ModelState, cfg: DetectorConfig, opt: OptimizerState,
               lr: float | None = None) -> StepResult:
    """One optimizer step on the mean set loss over a mini-batch of scenes."""
    batch = [scenes] if isinstance(scenes, Scene) else list(scenes)
    if not batch:
        raise ContractError("train_step needs at least one scene")
    params = state.parameters()
    T.zero_grad(params)
    totals, per_stage = [], np.zeros(cfg.num_stages)
    for scene in batch:
        outputs = forward(scene.feature_map, state, cfg, scene.image_w, scene.image_h)
        total, stages = set_loss(outputs, scene.targets, cfg.cost, return_stages=True)
        if not math.isfinite(total.item()):
            dump = "; ".join(f"stage {k}: cls={s.cls:.4g} l1={s.l1:.4g} giou={s.giou:.4g}"
                             for k, s in enumerate(stages))
            raise NumericError(f"non-finite loss ({dump})")
        # backward per scene keeps only one graph alive at a time
        T.backward(total * (1.0 / len(batch)))
        totals.append(total.item())
        per_stage += [s.total.item() for s in stages]
    norm = opt.step(params, lr)
    return StepResult(float(np.mean(totals)), list(per_stage / len(batch)), norm)


def config_fields() -> list[str]:
    return [f.name for f in fields(DetectorConfig)]
