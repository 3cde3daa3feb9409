"""Minimal reverse-mode differentiation on top of numpy.

Every operator records a node with an analytic backward rule. Nodes carry a
global creation sequence number; ``Tensor.backward`` walks the reachable nodes
in exact reverse creation order, so a node's gradient is complete before it is
pushed to its parents.

All data is float64. Binary operators require identical shapes (python scalars
are allowed as constants); the only broadcast is the bias row in ``linear`` and
``conv2d``.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import scipy.sparse as sp

_seq = itertools.count()
_grad_enabled = True
_corrupted: dict[str, float] = {}
OP_NAMES = frozenset(
    {
        "add", "bilinear_sample", "clamp_min", "concat", "conv1x1", "conv2d", "cross_entropy", "div",
        "gather_rows", "grouped_max", "interpolate_rows", "linear", "log", "maximum", "minimum", "mul",
        "neg", "power", "relu", "reshape", "scale_rows", "sigmoid", "smooth_l1", "sum", "take", "tanh",
        "upsample_nearest",
    }
)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the backward output of ``op`` by ``factor``.

    Negative control for the gradient checker only.
    """
    if op not in OP_NAMES:
        raise ValueError(f"unknown operator {op!r}")
    _corrupted[op] = factor
    try:
        yield
    finally:
        _corrupted.pop(op, None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._seq = next(_seq)
        self._consumed = False

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _neg_operand(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.shape), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tsum(self) * (1.0 / max(self.size, 1))

    # backward ---------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor with requires_grad")
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._consumed:
                raise RuntimeError(
                    f"backward() reached an already-consumed {node._op} node; rebuild the graph"
                )
            parent_grads = node._backward(g)
            node._consumed = True
            factor = _corrupted.get(node._op)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._seq = next(_seq)
    out._consumed = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def _as_tensor(x, shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def _neg_operand(x):
    return -x if not isinstance(x, Tensor) else neg(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        if c.ndim and c.shape != a.shape:
            raise ValueError(f"add: shape mismatch {a.shape} vs {c.shape}")
        return _node(a.data + c, (a,), lambda g: (g,), "add")
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        if c.ndim and c.shape != a.shape:
            raise ValueError(f"mul: shape mismatch {a.shape} vs {c.shape}")
        return _node(a.data * c, (a,), lambda g: (g * c,), "mul")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / np.asarray(b, dtype=np.float64))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    ad = a.data
    return _node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # NaN stays NaN so that a diverged step is caught downstream
    return _node(np.where(a.data <= 0, 0.0, a.data), (a,), lambda g: (g * mask,), "relu")


def tanh_act(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # numerically stable in both tails
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = ~(a.data < lo)
    return _node(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def minimum(a: Tensor, c) -> Tensor:
    """Elementwise min against a constant; ties send the gradient to ``a``. NaN propagates."""
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), a.shape)
    mask = ~(a.data > c)
    return _node(np.where(mask, a.data, c), (a,), lambda g: (g * mask,), "minimum")


def maximum(a: Tensor, c) -> Tensor:
    """Elementwise max against a constant; ties send the gradient to ``a``. NaN propagates."""
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), a.shape)
    mask = ~(a.data < c)
    return _node(np.where(mask, a.data, c), (a,), lambda g: (g * mask,), "maximum")


# reductions and shape ------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    out = a.data[index]
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        np.add.at(ga, index, g)
        return (ga,)

    return _node(np.array(out), (a,), backward, "take")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    if a.ndim != b.ndim:
        raise ValueError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = axis % a.ndim
    other_a = a.shape[:ax] + a.shape[ax + 1 :]
    other_b = b.shape[:ax] + b.shape[ax + 1 :]
    if other_a != other_b:
        raise ValueError(f"concat: dimension mismatch {a.shape} vs {b.shape} on axis {axis}")
    split = a.shape[ax]

    def backward(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return _node(np.concatenate([a.data, b.data], axis=ax), (a, b), backward, "concat")


def concat_many(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = concat(out, t, axis=axis)
    return out


# dense layers --------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight (+ bias)`` for x of shape N x Cin and weight Cin x Cout."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd.T
        gw = xd.T @ g
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "linear")


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply each row of ``x`` (N x C) by the scalar ``w[n, 0]`` (w is N x 1)."""
    if x.ndim != 2 or w.shape != (x.shape[0], 1):
        raise ValueError(f"scale_rows: expected weights of shape ({x.shape[0]}, 1), got {w.shape}")
    xd, wd = x.data, w.data
    return _node(xd * wd, (x, w), lambda g: (g * wd, (g * xd).sum(axis=1, keepdims=True)), "scale_rows")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]``; gradient scatters back with accumulation."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        flat = g.reshape(len(idx), -1)
        gx = np.zeros((n, flat.shape[1]))
        np.add.at(gx, idx, flat)
        return (gx.reshape(x.shape),)

    return _node(x.data[idx], (x,), backward, "gather_rows")


def interpolate_rows(x: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """``out[i] = sum_k weights[i, k] * x[idx[i, k]]`` with constant weights."""
    idx = np.asarray(idx, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    m, k = idx.shape
    mat = sp.csr_matrix((weights.ravel(), (np.repeat(np.arange(m), k), idx.ravel())), shape=(m, x.shape[0]))
    return _node(mat @ x.data, (x,), lambda g: (mat.T @ g,), "interpolate_rows")


def grouped_max(x: Tensor) -> Tensor:
    """Max over axis 1 of a G x K x C tensor; first index wins ties."""
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"grouped_max: expected G x K x C with K >= 1, got {x.shape}")
    arg = np.argmax(x.data, axis=1)[:, None, :]
    out = np.take_along_axis(x.data, arg, axis=1)[:, 0, :]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, arg, g[:, None, :], axis=1)
        return (gx,)

    return _node(out, (x,), backward, "grouped_max")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row softmax cross entropy (N x K logits, integer targets) -> N."""
    t = np.asarray(targets, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(t))
    out = logsum - z[rows, t]

    def backward(g):
        soft = np.exp(z - logsum[:, None])
        soft[rows, t] -= 1.0
        return (soft * g[:, None],)

    return _node(out, (logits,), backward, "cross_entropy")


# image operators -----------------------------------------------------------


def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, -1)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 1, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 cross-correlation of a C x H x W input with K x C x 3 x 3 kernels."""
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1:] != (x.shape[0], 3, 3):
        raise ValueError(f"conv2d: kernels {kernels.shape} incompatible with input {x.shape}")
    c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < 3 or wp < 3:
        raise ValueError(f"conv2d: input {x.shape} smaller than 3x3 kernel after padding {padding}")
    ho, wo = (hp - 3) // stride + 1, (wp - 3) // stride + 1
    k = kernels.shape[0]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, stride, ho, wo)
    kmat = kernels.data.reshape(k, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.T.reshape(k, ho, wo)

    def backward(g):
        g2 = g.reshape(k, -1)
        gk = (g2 @ cols).reshape(kernels.shape)
        dcols = (g2.T @ kmat).reshape(ho, wo, c, 3, 3)
        gxp = np.zeros((c, hp, wp))
        for di in range(3):
            for dj in range(3):
                gxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += dcols[:, :, :, di, dj].transpose(2, 0, 1)
        gx = gxp[:, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=1)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _node(out, parents, backward, "conv2d")


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-pixel channel map: C x H x W input, Cout x C weight."""
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ValueError(f"conv1x1: weight {weight.shape} incompatible with input {x.shape}")
    c, h, w = x.shape
    flat = x.data.reshape(c, -1)
    out = weight.data @ flat
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        g2 = g.reshape(weight.shape[0], -1)
        gx = (weight.data.T @ g2).reshape(c, h, w)
        gw = g2 @ flat.T
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out.reshape(-1, h, w), parents, backward, "conv1x1")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel of a C x H x W map into a factor x factor block."""
    if factor <= 0:
        raise ValueError(f"upsample_nearest: factor must be positive, got {factor}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    return _node(out, (x,), lambda g: (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),), "upsample_nearest")


def bilinear_weights(shape_hw: tuple[int, int], coords: np.ndarray, valid: np.ndarray) -> sp.csr_matrix:
    """Sparse N x (H*W) interpolation matrix with zero-padding outside the map.

    ``coords[:, 0]`` is the column (u) and ``coords[:, 1]`` the row (v); pixel
    centers sit on integer coordinates.
    """
    h, w = shape_hw
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    if len(coords) != len(valid):
        raise ValueError(f"bilinear_sample: {len(coords)} coords but {len(valid)} mask entries")
    if np.isnan(coords[valid]).any():
        raise ValueError("bilinear_sample: NaN coordinate for a valid point")
    n = len(coords)
    u = np.where(valid, coords[:, 0], 0.0)
    v = np.where(valid, coords[:, 1], 0.0)
    u0, v0 = np.floor(u), np.floor(v)
    du, dv = u - u0, v - v0
    rows, cols, vals = [], [], []
    for ou, ov, wt in (
        (0, 0, (1 - du) * (1 - dv)),
        (1, 0, du * (1 - dv)),
        (0, 1, (1 - du) * dv),
        (1, 1, du * dv),
    ):
        uu, vv = u0 + ou, v0 + ov
        keep = valid & (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h) & (wt != 0)
        rows.append(np.nonzero(keep)[0])
        cols.append((vv[keep] * w + uu[keep]).astype(np.int64))
        vals.append(wt[keep])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, h * w)
    )


def bilinear_sample(f: Tensor, coords: np.ndarray, valid: np.ndarray) -> Tensor:
    """Sample a C x H x W map at N continuous positions -> N x C.

    Coordinates are constants: no gradient flows to them.
    """
    return sample_with_matrix(f, bilinear_weights(f.shape[1:], coords, valid))


def sample_with_matrix(f: Tensor, mat: sp.csr_matrix) -> Tensor:
    """Apply a precomputed N x (H*W) interpolation matrix to a C x H x W map."""
    c, h, w = f.shape
    if mat.shape[1] != h * w:
        raise ValueError(f"interpolation matrix {mat.shape} does not match map {f.shape}")
    flat = f.data.reshape(c, -1)
    return _node(np.asarray(mat @ flat.T), (f,), lambda g: (np.asarray(mat.T @ g).T.reshape(c, h, w),), "bilinear_sample")
