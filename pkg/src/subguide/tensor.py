"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in contiguous row-major numpy arrays; differentiable ops append
nodes to an explicitly managed :class:`Tape`. A tape is created per forward
pass (``with Tape() as tape: ...``) and consumed by :func:`backward`; code
that needs no gradients simply runs without an active tape and pays nothing.

Gradients are exact reverse-mode derivatives; every op's backward rule is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DomainError

__all__ = [
    "Tensor", "Tape", "backward", "add", "sub", "mul", "div", "exp", "log",
    "sqrt", "sigmoid", "relu", "silu", "max_with_scalar", "matmul",
    "reduce_sum", "reduce_mean", "reduce_max", "softmax", "conv2d",
    "group_norm", "reshape", "transpose", "concat", "upsample_nearest2x",
    "take_rows", "as_tensor",
]


class Tensor:
    """A dense n-d array of float64 values, optionally tracked on a tape.

    Immutable after creation except for gradient accumulation into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional["Tensor"] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # arithmetic sugar; scalars and arrays are promoted via as_tensor
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    """One recorded op: inputs precede the node, output is produced by it."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of the ops of one forward pass.

    Ops record themselves onto the innermost active tape whenever any input
    requires a gradient. The tape is consumed (and cleared) by backward().
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _stack().pop()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward_fn) -> None:
        output.requires_grad = True
        self.nodes.append(TapeNode(op, inputs, output, backward_fn))
        self._output_ids.add(id(output))

    def is_leaf(self, t: Tensor) -> bool:
        return t.requires_grad and id(t) not in self._output_ids

    def clear(self) -> None:
        self.nodes.clear()
        self._output_ids.clear()


_LOCAL = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


def active_tape() -> Optional[Tape]:
    s = _stack()
    return s[-1] if s else None


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          backward_fn) -> Tensor:
    tape = active_tape()
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(root: Tensor, tape: Tape) -> dict[Tensor, Tensor]:
    """Accumulate d(root)/d(leaf) onto every requires_grad leaf of the tape.

    root must be scalar (size 1). Visits each tape node exactly once in
    reverse order, then clears the tape. Returns {leaf: grad} and also
    accumulates into each leaf's .grad.
    """
    if root.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    if tape.is_leaf(root):
        leaves[id(root)] = root
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = g if acc is None else acc + g
            if tape.is_leaf(inp):
                leaves[id(inp)] = inp
    leaf_grads: dict[Tensor, Tensor] = {}
    for tid, leaf in leaves.items():
        if tid in grads:
            _store_leaf(leaf, grads[tid], leaf_grads)
    tape.clear()
    return leaf_grads


def _store_leaf(leaf: Tensor, g: np.ndarray, out: dict[Tensor, Tensor]) -> None:
    gt = Tensor(g.copy())
    if leaf.grad is None:
        leaf.grad = gt
    else:
        leaf.grad = Tensor(leaf.grad.data + g)
    out[leaf] = gt


# ---------------------------------------------------------------------------
# broadcasting helpers (trailing-dimension alignment, numpy semantics)

def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {sa} and {sb} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit("sub", (a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _emit("mul", (a, b), ad * bd, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, sa), _unbroadcast(-g * ad / (bd * bd), sb)

    return _emit("div", (a, b), out, bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow to non-finite values")

    def bw(g):
        return (g * out,)

    return _emit("exp", (a,), out, bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _emit("log", (a,), np.log(ad), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / np.maximum(out, 1e-300),)

    return _emit("sqrt", (a,), out, bw)


def sigmoid(a: Tensor) -> Tensor:
    # overflow-free: exp of a non-positive argument only
    t = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (a,), out, bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bw(g):
        return (g * mask,)

    return _emit("relu", (a,), np.where(mask, a.data, 0.0), bw)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), fused so the hot path records a single node."""
    ad = a.data
    with np.errstate(over="ignore"):  # exp overflow saturates to sigmoid=0
        sig = 1.0 / (1.0 + np.exp(-ad))

    def bw(g):
        return (g * sig * (1.0 + ad * (1.0 - sig)),)

    return _emit("silu", (a,), ad * sig, bw)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Per-sample group normalization with channel affine, fused forward/backward."""
    if x.ndim != 4:
        raise ContractViolation("group_norm expects B x C x H x W")
    B, C, H, W = x.shape
    g_ = min(groups, C)
    if C % g_:
        raise ContractViolation(f"group_norm: {C} channels not divisible by {g_} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ContractViolation("group_norm: gamma/beta must have shape (C,)")
    xg = x.data.reshape(B, g_, (C // g_) * H * W)
    mu = xg.mean(axis=2, keepdims=True)
    xc = (xg - mu).reshape(B, C, H * W)
    var = (xc * xc).reshape(B, g_, -1).mean(axis=2, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).repeat(C // g_, axis=1)  # (B, C, 1)
    gd, bd = gamma.data, beta.data
    out = (xc * (inv * gd[:, None]) + bd[:, None]).reshape(B, C, H, W)

    def bw(g):
        g2 = g.reshape(B, C, H * W)
        y = xc * inv  # normalized, pre-affine
        dgamma = (g2 * y).sum(axis=(0, 2))
        dbeta = g2.sum(axis=(0, 2))
        gh = (g2 * gd[:, None]).reshape(B, g_, (C // g_) * H * W)
        yg = y.reshape(B, g_, (C // g_) * H * W)
        m1 = gh.mean(axis=2, keepdims=True)
        m2 = (gh * yg).mean(axis=2, keepdims=True)
        dx = ((gh - m1 - yg * m2).reshape(B, C, H * W) * inv).reshape(B, C, H, W)
        return dx, dgamma, dbeta

    return _emit("group_norm", (x, gamma, beta), out, bw)


def max_with_scalar(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c); the subgradient at a == c is 0."""
    mask = a.data > c

    def bw(g):
        return (g * mask,)

    return _emit("max_with_scalar", (a,), np.where(mask, a.data, c), bw)


# ---------------------------------------------------------------------------
# matmul (2-d, or stacked with numpy batch broadcasting)

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul batch dims")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), sa)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), sb)
        return ga, gb

    return _emit("matmul", (a, b), np.matmul(ad, bd), bw)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes, ndim: int, op: str) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axes)
    if any(ax < 0 or ax >= ndim for ax in axes) or len(set(axes)) != len(axes):
        raise ContractViolation(f"{op}: invalid axes {axes} for ndim {ndim}")
    return axes


def _check_nonempty(shape, axes, op):
    if any(shape[ax] == 0 for ax in axes):
        raise DomainError(f"{op} over an empty extent")


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim, "sum")
    _check_nonempty(a.shape, axes, "sum")
    sa = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, sa).copy(),)

    return _emit("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims), bw)


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim, "mean")
    _check_nonempty(a.shape, axes, "mean")
    sa = a.shape
    count = 1
    for ax in axes:
        count *= sa[ax]

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, sa).copy(),)

    return _emit("mean", (a,), a.data.mean(axis=axes, keepdims=keepdims), bw)


def reduce_max(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim, "max")
    _check_nonempty(a.shape, axes, "max")
    ad = a.data
    out = ad.max(axis=axes, keepdims=True)
    mask = ad == out  # grad splits evenly among ties
    counts = mask.sum(axis=axes, keepdims=True)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (mask * (g / counts),)

    return _emit("max", (a,), out if keepdims else out.squeeze(axes), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, a.ndim, "softmax")[0]
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax", (a,), out, bw)


# ---------------------------------------------------------------------------
# conv2d: cross-correlation via im2col + GEMM, odd square kernels, zero padding
#
# Patch tensor layout (B, C, k, k, Ho, Wo): the k*k slice copies are
# axis-aligned with the input, and kernel.reshape(Co, C*k*k) @ cols[b] runs
# as one broadcasted batch of GEMMs.

def _im2col(xp: np.ndarray, k: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, _, _ = xp.shape
    cols = np.empty((B, C, k, k, Ho, Wo))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + s * Ho:s, dj:dj + s * Wo:s]
    return cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ContractViolation(f"conv2d expects 4-d input/kernel, got {x.shape}, {kernel.shape}")
    B, Ci, H, W = x.shape
    Co, Ck, kh, kw = kernel.shape
    if Ck != Ci:
        raise ContractViolation(f"conv2d channel mismatch: input {Ci}, kernel {Ck}")
    if kh != kw or kh % 2 == 0:
        raise ContractViolation(f"conv2d kernel must be odd and square, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ContractViolation("conv2d: stride must be >=1 and padding >=0")
    k, s, p = kh, stride, padding
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if Ho < 1 or Wo < 1:
        raise ContractViolation("conv2d output would be empty")
    if k == 1 and s == 1 and p == 0:
        return _conv1x1(x, kernel)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, Ho, Wo).reshape(B, Ci * k * k, Ho * Wo)
    kmat = kernel.data.reshape(Co, Ci * k * k)
    out = np.matmul(kmat, cols).reshape(B, Co, Ho, Wo)

    def bw(g):
        g_mat = g.reshape(B, Co, Ho * Wo)
        gk = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(Co, Ci, k, k)
        gcols = np.matmul(kmat.T, g_mat).reshape(B, Ci, k, k, Ho, Wo)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di:di + s * Ho:s, dj:dj + s * Wo:s] += gcols[:, :, di, dj]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return np.ascontiguousarray(gx), gk

    return _emit("conv2d", (x, kernel), out, bw)


def _conv1x1(x: Tensor, kernel: Tensor) -> Tensor:
    # pure channel mix; no patch extraction needed
    B, Ci, H, W = x.shape
    Co = kernel.shape[0]
    xm = x.data.reshape(B, Ci, H * W)
    km = kernel.data.reshape(Co, Ci)
    out = np.matmul(km, xm).reshape(B, Co, H, W)

    def bw(g):
        gm = g.reshape(B, Co, H * W)
        gk = np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0).reshape(Co, Ci, 1, 1)
        gx = np.matmul(km.T, gm).reshape(B, Ci, H, W)
        return gx, gk

    return _emit("conv2d", (x, kernel), out, bw)


# ---------------------------------------------------------------------------
# shape/movement plumbing

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape {sa} -> {shape} changes element count") from None

    def bw(g):
        return (g.reshape(sa),)

    return _emit("reshape", (a,), out, bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ContractViolation(f"transpose axes {axes} invalid for ndim {a.ndim}")
    inv = np.argsort(axes)

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _emit("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractViolation("concat of no tensors")
    ax = _norm_axes(axis, tensors[0].ndim, "concat")[0]
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _emit("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=ax), bw)


def upsample_nearest2x(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ContractViolation("upsample_nearest2x expects B x C x H x W")
    B, C, H, W = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _emit("upsample2x", (a,), out, bw)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table (embedding lookup)."""
    if table.ndim != 2:
        raise ContractViolation("take_rows expects a 2-d table")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ContractViolation(f"take_rows: bad indices for table of {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("take_rows", (table,), table.data[idx], bw)
