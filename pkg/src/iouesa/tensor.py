"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks that graph in reverse topological order.  Data is a
C-contiguous ``numpy.float64`` array, i.e. a flat row-major buffer plus a
shape.

Broadcasting follows numpy's rules; the backward pass sums a gradient back
down to the operand's shape (see :func:`unbroadcast`).
"""
from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

LAYER_NORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make ndarray (op) Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Build the output of a recorded op.

        ``backward(g)`` must return one gradient (or None) per parent.
        """
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """A named leaf tensor that always tracks gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b),
                          lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def _back(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return Tensor.from_op(out, (a, b), _back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor.from_op(ad ** exponent, (a,),
                          lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor.from_op(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return Tensor.from_op(out, (a,), lambda g: (g * _sigmoid(ad),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(out, (a, b),
                          lambda g: (unbroadcast(g * pick_a, sa), unbroadcast(g * ~pick_a, sb)))


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(out, (a, b),
                          lambda g: (unbroadcast(g * pick_a, sa), unbroadcast(g * ~pick_a, sb)))


def clip(a, lo, hi) -> Tensor:
    """Clamp to ``[lo, hi]``; zero gradient where the clamp is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return Tensor.from_op(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), _back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor.from_op(out, (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]

    def _back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(out, dtype=np.float64), (a,), _back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes (if any) are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def _back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return Tensor.from_op(out, (a, b), _back)


def softmax_rows(x, prior=None) -> Tensor:
    """Softmax over the last axis, optionally reweighted after exponentiation.

    With ``prior`` the row weights are ``exp(x_ij) * prior_ij`` normalised
    over ``j``.  ``prior`` is data (no gradient) and must give every row a
    positive total.  The row max over entries with positive prior is
    subtracted before ``exp``; the result is invariant to that shift, so it is
    treated as a constant in backward.
    """
    x = as_tensor(x)
    xd = x.data
    if prior is None:
        e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    else:
        pr = np.broadcast_to(np.asarray(prior.data if isinstance(prior, Tensor) else prior, dtype=np.float64),
                             xd.shape)
        # a large logit on a zero-prior entry must not underflow the rest of the row
        shift = np.where(pr > 0, xd, -np.inf).max(axis=-1, keepdims=True)
        e = np.exp(np.minimum(xd - shift, 0.0)) * pr
        e = np.where(pr > 0, e, 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), _back)


def layer_norm(x, gamma=None, beta=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply optional scale and shift."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    parents = [x]
    out = xhat
    gd = bd = None
    if gamma is not None:
        gamma = as_tensor(gamma)
        gd = gamma.data
        out = out * gd
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        bd = beta.data
        out = out + bd
        parents.append(beta)

    def _back(g):
        dxhat = g * gd if gd is not None else g
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gd is not None:
            grads.append(unbroadcast(g * xhat, gd.shape))
        if bd is not None:
            grads.append(unbroadcast(g, bd.shape))
        return tuple(grads)

    return Tensor.from_op(out, parents, _back)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable, x, h: float = 1e-6, coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f(x)`` must return a scalar
    Tensor.  The error per coordinate is ``|analytic - numeric| /
    max(1, |analytic|)``.  ``coords`` limits the check to that many randomly
    chosen coordinates per tensor.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
    saved = [t.grad for t in xs]
    zero_grad(xs)
    out = f(x)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
    for t, g in zip(xs, saved):
        t.grad = g

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ag in zip(xs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = np.sort(rng.choice(flat.size, size=coords, replace=False))
        agf = ag.reshape(-1)
        for i in idx:
            orig = flat[i]
            up, down = orig + h, orig - h
            flat[i] = up
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = down
            fm = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DomainError(f"function is not finite near coordinate {i} of a {t.shape} input")
            # divide by the step actually taken after rounding
            numeric = (fp - fm) / (up - down)
            err = abs(agf[i] - numeric) / max(1.0, abs(agf[i]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
#
# File layout (all little-endian):
#   magic b"IESACKPT", u64 record count, then per record
#   u32 name length, utf-8 name, u32 ndim, ndim x u64 dims, prod(dims) x f64

CHECKPOINT_MAGIC = b"IESACKPT"


def save_checkpoint(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (count,) = struct.unpack_from("<Q", blob, 8)
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    return out
