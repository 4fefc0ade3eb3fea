"""Query-conditioned interaction head: dynamic convs, channel masks, embeddings.

Shapes: ``q`` is ``(N, d)``, pooled RoI features are ``(N, s*s, d)``.  The
dynamic conv is a per-position (1x1) channel mixer whose two weight
matrices are generated from each query.  The channel masks gate the conv
output per query and channel, shared over all ``s*s`` positions, to give
separate classification and regression features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import FFN, LayerNorm, Linear
from .tensor import Parameter, Tensor


@dataclass
class DynamicParamsGen:
    """Linear map from a query to the flattened ``(d_in x d_k, d_k x d_out)`` blocks."""

    proj: Linear
    d_in: int
    d_k: int
    d_out: int

    @classmethod
    def init(cls, d_query: int, d_in: int, d_k: int, d_out: int, rng: np.random.Generator,
             name: str) -> "DynamicParamsGen":
        return cls(Linear.init(d_query, d_in * d_k + d_k * d_out, rng, name), d_in, d_k, d_out)

    def parameters(self) -> list[Parameter]:
        return self.proj.parameters()


def generate_dynamic_params(q: Tensor, gen: DynamicParamsGen) -> tuple[Tensor, Tensor]:
    """Per-query ``P1: (N, d_in, d_k)`` and ``P2: (N, d_k, d_out)``."""
    if q.ndim != 2 or q.shape[1] != gen.proj.W.shape[0]:
        raise DimensionError(f"queries {q.shape} do not fit generator input {gen.proj.W.shape[0]}")
    n = q.shape[0]
    flat = gen.proj(q)
    split = gen.d_in * gen.d_k
    p1 = T.reshape(flat[:, :split], (n, gen.d_in, gen.d_k))
    p2 = T.reshape(flat[:, split:], (n, gen.d_k, gen.d_out))
    return p1, p2


def dynamic_conv(r: Tensor, p1: Tensor, p2: Tensor,
                 norm1: LayerNorm | None = None, norm2: LayerNorm | None = None) -> Tensor:
    """``relu(LN(relu(LN(r @ P1)) @ P2))`` for each query's own ``P1, P2``."""
    if r.ndim != 3 or r.shape[0] != p1.shape[0] or r.shape[2] != p1.shape[1]:
        raise DimensionError(f"RoI features {r.shape} do not match dynamic params {p1.shape}")
    hidden = r @ p1
    hidden = T.relu(norm1(hidden) if norm1 is not None else T.layer_norm(hidden))
    out = hidden @ p2
    return T.relu(norm2(out) if norm2 is not None else T.layer_norm(out))


@dataclass
class DynamicConv:
    gen: DynamicParamsGen
    norm1: LayerNorm
    norm2: LayerNorm

    @classmethod
    def init(cls, d_query: int, d_in: int, d_k: int, d_out: int, rng: np.random.Generator,
             name: str) -> "DynamicConv":
        return cls(DynamicParamsGen.init(d_query, d_in, d_k, d_out, rng, f"{name}.gen"),
                   LayerNorm.init(d_k, f"{name}.norm1"), LayerNorm.init(d_out, f"{name}.norm2"))

    def __call__(self, q: Tensor, r: Tensor) -> Tensor:
        p1, p2 = generate_dynamic_params(q, self.gen)
        return dynamic_conv(r, p1, p2, self.norm1, self.norm2)

    def parameters(self) -> list[Parameter]:
        return self.gen.parameters() + self.norm1.parameters() + self.norm2.parameters()


@dataclass
class MaskBottleneck:
    """``d -> d_b -> d`` with a relu in the middle; sigmoid is applied by the caller."""

    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, d: int, d_b: int, rng: np.random.Generator, name: str) -> "MaskBottleneck":
        return cls(Linear.init(d, d_b, rng, f"{name}.fc1"), Linear.init(d_b, d, rng, f"{name}.fc2"))

    def __call__(self, q: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(q)))

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()


@dataclass
class ChannelMaskHeads:
    cls_head: MaskBottleneck
    reg_head: MaskBottleneck

    @classmethod
    def init(cls, d: int, d_b: int, rng: np.random.Generator, name: str) -> "ChannelMaskHeads":
        return cls(MaskBottleneck.init(d, d_b, rng, f"{name}.cls"),
                   MaskBottleneck.init(d, d_b, rng, f"{name}.reg"))

    def parameters(self) -> list[Parameter]:
        return self.cls_head.parameters() + self.reg_head.parameters()


def dcw_masks(q: Tensor, heads: ChannelMaskHeads) -> tuple[Tensor, Tensor]:
    """Classification and regression channel masks, each ``(N, d)`` in (0, 1)."""
    return T.sigmoid(heads.cls_head(q)), T.sigmoid(heads.reg_head(q))


def apply_dcw(r: Tensor, mask: Tensor) -> Tensor:
    """``r[i, p, c] * mask[i, c]`` for every position ``p``."""
    if mask.ndim != 2 or r.ndim != 3 or mask.shape != (r.shape[0], r.shape[2]):
        raise DimensionError(f"mask {mask.shape} does not broadcast over features {r.shape}")
    return r * T.reshape(mask, (mask.shape[0], 1, mask.shape[1]))


@dataclass
class ObjectEmbeddings:
    o_c: Tensor
    o_r: Tensor


def flatten_rois(r: Tensor) -> Tensor:
    return T.reshape(r, (r.shape[0], r.shape[1] * r.shape[2]))


def project_embeddings(r_c: Tensor, r_r: Tensor, W_c: Linear, W_r: Linear) -> ObjectEmbeddings:
    """Flatten each branch to ``(N, s*s*d)`` and project it with its own weights."""
    return ObjectEmbeddings(W_c(flatten_rois(r_c)), W_r(flatten_rois(r_r)))


def update_query(o: ObjectEmbeddings, ffn: FFN, norm: LayerNorm | None = None) -> Tensor:
    """Next-stage queries ``LN(s + ffn(s))`` with ``s = o_c + o_r``."""
    q_sum = o.o_c + o.o_r
    out = q_sum + ffn(q_sum)
    return norm(out) if norm is not None else T.layer_norm(out)
