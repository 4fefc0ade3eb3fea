"""Multi-head self attention over object queries, with IoU-weighted routing.

Row-vector convention throughout: queries are ``(N, d)`` and a projection is
``x @ W + b``.  Per head the logits are ``Q_h K_h^T / sqrt(d_h)``.

Modes:

* ``FULL_MSA``     softmax over the logits.
* ``IOU_ESA``      ``exp(logit_ij) * IoU_ij`` normalised per row; one IoU
                   matrix shared by every head.
* ``IOU_AS_ATTN``  the row-normalised IoU matrix replaces the attention
                   weights entirely (values and ``W_o`` still apply).
* ``NO_MSA``       no attention; callers skip the block.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ModeError
from .tensor import Parameter, Tensor


class AttnMode(enum.Enum):
    FULL_MSA = "full"
    NO_MSA = "none"
    IOU_AS_ATTN = "iou"
    IOU_ESA = "iou-esa"

    @classmethod
    def parse(cls, value) -> "AttnMode":
        if isinstance(value, cls):
            return value
        text = str(value).strip()
        for mode in cls:
            if text == mode.value or text.upper() == mode.name:
                return mode
        raise ModeError(f"unknown attention mode {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class AttnConfig:
    d_model: int
    heads: int

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise DimensionError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class MhsaParams:
    W_qkv: Parameter
    b_qkv: Parameter
    W_o: Parameter
    b_o: Parameter

    @classmethod
    def init(cls, cfg: AttnConfig, rng: np.random.Generator, prefix: str = "attn") -> "MhsaParams":
        d = cfg.d_model
        scale = 1.0 / math.sqrt(d)
        return cls(
            W_qkv=Parameter(rng.uniform(-scale, scale, (d, 3 * d)), f"{prefix}.W_qkv"),
            b_qkv=Parameter(np.zeros(3 * d), f"{prefix}.b_qkv"),
            W_o=Parameter(rng.uniform(-scale, scale, (d, d)), f"{prefix}.W_o"),
            b_o=Parameter(np.zeros(d), f"{prefix}.b_o"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.W_qkv, self.b_qkv, self.W_o, self.b_o]


def _check(q: Tensor, params: MhsaParams, cfg: AttnConfig) -> None:
    d = cfg.d_model
    if q.ndim != 2 or q.shape[1] != d:
        raise DimensionError(f"queries must be (N, {d}), got {q.shape}")
    if params.W_qkv.shape != (d, 3 * d) or params.W_o.shape != (d, d):
        raise DimensionError(
            f"attention params {params.W_qkv.shape}, {params.W_o.shape} do not match d_model={d}")


def split_heads(q: Tensor, params: MhsaParams, cfg: AttnConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Fused QKV projection, returned as three ``(H, N, d_h)`` tensors."""
    _check(q, params, cfg)
    n, d, h = q.shape[0], cfg.d_model, cfg.heads
    qkv = q @ params.W_qkv + params.b_qkv
    heads = T.transpose(T.reshape(qkv, (n, 3, h, cfg.d_head)), (1, 2, 0, 3))
    return heads[0], heads[1], heads[2]


def attention_logits(qh: Tensor, kh: Tensor, cfg: AttnConfig) -> Tensor:
    return (qh @ T.swapaxes(kh, 1, 2)) * (1.0 / math.sqrt(cfg.d_head))


def prepare_iou(iou, n: int) -> np.ndarray:
    """Copy of the IoU matrix with its diagonal forced to 1."""
    mat = np.array(iou.data if isinstance(iou, Tensor) else iou, dtype=np.float64)
    if mat.shape != (n, n):
        raise DimensionError(f"iou matrix must be ({n}, {n}), got {mat.shape}")
    np.fill_diagonal(mat, 1.0)
    if not np.all(mat.sum(axis=1) > 0.0):
        raise ContractError("iou row sums to zero after diagonal enforcement")
    return mat


def _weights(qh: Tensor, kh: Tensor, iou, cfg: AttnConfig, mode: AttnMode) -> Tensor:
    n = qh.shape[1]
    if mode is AttnMode.FULL_MSA:
        return T.softmax_rows(attention_logits(qh, kh, cfg))
    if mode is AttnMode.IOU_ESA:
        return T.softmax_rows(attention_logits(qh, kh, cfg), prior=prepare_iou(iou, n)[None, :, :])
    if mode is AttnMode.IOU_AS_ATTN:
        mat = prepare_iou(iou, n)
        mat = mat / mat.sum(axis=1, keepdims=True)
        return Tensor(np.broadcast_to(mat, (cfg.heads, n, n)).copy())
    raise ModeError("NO_MSA has no attention weights; skip the attention block instead")


def attention_weights(q: Tensor, iou, params: MhsaParams, cfg: AttnConfig, mode) -> Tensor:
    """``(H, N, N)`` row-stochastic routing weights for ``mode``."""
    mode = AttnMode.parse(mode)
    if mode is AttnMode.NO_MSA:
        raise ModeError("NO_MSA has no attention weights; skip the attention block instead")
    qh, kh, _ = split_heads(q, params, cfg)
    return _weights(qh, kh, iou, cfg, mode)


def _route(weights: Tensor, vh: Tensor, params: MhsaParams, cfg: AttnConfig) -> Tensor:
    mixed = weights @ vh                              # (H, N, d_h)
    n = vh.shape[1]
    merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, cfg.d_model))
    return merged @ params.W_o + params.b_o


def self_attention(q: Tensor, iou, params: MhsaParams, cfg: AttnConfig, mode) -> Tensor:
    """Attention output (no residual) for any mode except ``NO_MSA``."""
    mode = AttnMode.parse(mode)
    if mode is AttnMode.NO_MSA:
        raise ModeError("NO_MSA has no attention output; skip the attention block instead")
    qh, kh, vh = split_heads(q, params, cfg)
    return _route(_weights(qh, kh, iou, cfg, mode), vh, params, cfg)


def standard_msa(q: Tensor, params: MhsaParams, cfg: AttnConfig) -> Tensor:
    return self_attention(q, None, params, cfg, AttnMode.FULL_MSA)


def iou_esa(q: Tensor, iou, params: MhsaParams, cfg: AttnConfig) -> Tensor:
    return self_attention(q, iou, params, cfg, AttnMode.IOU_ESA)
