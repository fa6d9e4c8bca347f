"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (attention, the detection model, the set loss) is
built on the ops in this module.  Design constraints:

- float64 storage; the gradient oracle needs the precision.
- row-major data, mostly 2-D; the conv op handles 3-D feature maps.
- no broadcasting except scalar-tensor; use ``tile`` to expand a row
  vector explicitly.
- ops record their adjoint closures on the output tensor; ``backward``
  replays them in reverse topological order (a Wengert list).
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np


class TensorError(ValueError):
    pass


class ShapeMismatch(TensorError):
    pass


class NonFinite(TensorError):
    pass


class NotScalar(TensorError):
    pass


class NonDeterministicFunction(TensorError):
    pass


# When True every op validates that its output is finite.  Slow; meant for
# debugging and the test suite, not training loops.
_DEBUG_CHECKS = False


def set_debug_checks(flag: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


_ids = itertools.count()


class Tensor:
    """A dense float64 array plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_id")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _grad_fn: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFinite("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._grad_fn = _grad_fn
        self._id = next(_ids)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeMismatch(
                f"gradient shape {g.shape} != data shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience operators used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._grad_fn is not None for t in tensors)


def _make(out_data: np.ndarray, parents, grad_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NonFinite("op produced non-finite values")
    if _needs_grad(*parents):
        t = Tensor.__new__(Tensor)
        t.data = out_data
        t.requires_grad = False
        t.grad = None
        t._parents = tuple(parents)
        t._grad_fn = grad_fn
        t._id = next(_ids)
        return t
    t = Tensor.__new__(Tensor)
    t.data = out_data
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._grad_fn = None
    t._id = next(_ids)
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- backward pass ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Leaves not connected to the loss keep ``grad = None``; callers should
    treat that as an exact zero.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward() needs a scalar, got shape {loss.shape}")

    # Topological order via iterative DFS.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p._id not in seen:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(node._id, None)
        if g is None:
            continue
        if node.requires_grad:
            node.accumulate_grad(g)
        if node._grad_fn is not None:
            for parent, pg in node._grad_fn(g):
                if parent._id in adjoint:
                    adjoint[parent._id] += pg
                else:
                    adjoint[parent._id] = np.array(pg, dtype=np.float64, copy=True)


# -- elementwise and structural ops -----------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: [(a, g)])
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: [(a, g), (b, g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: [(a, g), (b, -g)])


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: [(a, g * c)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: [(a, g * b.data), (b, g * a.data)])


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}")
    inv = 1.0 / b.data
    out = a.data * inv
    return _make(out, (a, b), lambda g: [(a, g * inv), (b, -g * out * inv)])


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"minimum: {a.shape} vs {b.shape}")
    take_a = a.data <= b.data  # ties route the gradient to the first arg
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: [(a, g * take_a), (b, g * ~take_a)],
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"maximum: {a.shape} vs {b.shape}")
    take_a = a.data >= b.data
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: [(a, g * take_a), (b, g * ~take_a)],
    )


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: [(a, g * mask)])


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: [(a, g * out * (1.0 - out))])


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(
        a.data.reshape(shape), (a,), lambda g: [(a, g.reshape(old))]
    )


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects 2-D, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: [(a, g.T.copy())])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return [
            (t, np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i, t in enumerate(tensors)
        ]

    return _make(out, tuple(tensors), grad_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[axis]):
        raise ShapeMismatch(
            f"slice [{start}:{stop}] out of bounds on axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return [(a, full)]

    return _make(a.data[idx].copy(), (a,), grad_fn)


def tile(a: Tensor, reps) -> Tensor:
    """Explicit tiling; the adjoint sums the gradient over the copies."""
    a = as_tensor(a)
    reps = tuple(int(r) for r in reps)
    if len(reps) != a.data.ndim:
        raise ShapeMismatch(f"tile reps {reps} rank != tensor rank {a.data.ndim}")
    out = np.tile(a.data, reps)

    def grad_fn(g):
        acc = g
        for ax, r in enumerate(reps):
            if r > 1:
                n = a.data.shape[ax]
                shape = acc.shape[:ax] + (r, n) + acc.shape[ax + 1 :]
                acc = acc.reshape(shape).sum(axis=ax)
        return [(a, acc)]

    return _make(out, (a,), grad_fn)


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        out = np.array(a.data.sum())
        return _make(out, (a,), lambda g: [(a, np.full_like(a.data, float(g)))])
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        return [(a, np.repeat(np.expand_dims(g, axis), a.data.shape[axis], axis=axis))]

    return _make(out, (a,), grad_fn)


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape[1]} != {b.shape[0]}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: [(a, g @ b.data.T), (b, a.data.T @ g)],
    )


def block_diag_expand(w: Tensor, t: int) -> Tensor:
    """Embed ``w`` (p×q) as a t-fold block-diagonal (tp×tq) matrix.

    Used by the early-aggregation model so that one width-d weight set
    serves all temporal feature blocks; the adjoint sums the diagonal
    blocks.
    """
    w = as_tensor(w)
    if w.data.ndim != 2:
        raise ShapeMismatch(f"block_diag_expand expects 2-D, got {w.shape}")
    p, q = w.shape
    out = np.zeros((t * p, t * q), dtype=np.float64)
    for i in range(t):
        out[i * p : (i + 1) * p, i * q : (i + 1) * q] = w.data

    def grad_fn(g):
        acc = np.zeros_like(w.data)
        for i in range(t):
            acc += g[i * p : (i + 1) * p, i * q : (i + 1) * q]
        return [(w, acc)]

    return _make(out, (w,), grad_fn)


# -- nonlinear rowwise ops ---------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise ShapeMismatch(f"softmax_rows expects r×c with c>=1, got {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NonFinite("softmax_rows: non-finite input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return [(a, out * (g - dot))]

    return _make(out, (a,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer norm with learnable gain and bias (1×d each)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"layer_norm expects 2-D input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeMismatch(
            f"layer_norm params must be 1×{d}, got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = g * gain.data
        # standard LN backward over the row axis
        dxhat_sum = gx.sum(axis=1, keepdims=True)
        dxhat_dot = (gx * xhat).sum(axis=1, keepdims=True)
        dx = inv * (gx - dxhat_sum / d - xhat * dxhat_dot / d)
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        return [(x, dx), (gain, dgain), (bias, dbias)]

    return _make(out, (x, gain, bias), grad_fn)


def cross_entropy_logits(
    logits: Tensor, targets, weights=None
) -> Tensor:
    """Weighted-mean cross entropy from raw logits.

    ``targets`` is an integer class index per row; ``weights`` an optional
    per-row weight (defaults to 1).  Result = sum(w_i * nll_i) / sum(w_i).
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy_logits expects 2-D, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if t.shape != (n,):
        raise ShapeMismatch(f"targets shape {t.shape} != ({n},)")
    if np.any(t < 0) or np.any(t >= c):
        raise ShapeMismatch("target class index out of range")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeMismatch(f"weights shape {w.shape} != ({n},)")
    wsum = w.sum()
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    nll = lse - logits.data[np.arange(n), t]
    out = np.array((w * nll).sum() / wsum)

    def grad_fn(g):
        p = np.exp(logits.data - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return [(logits, float(g) * (w[:, None] / wsum) * p)]

    return _make(out, (logits,), grad_fn)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute elementwise differences (scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l1_distance: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    s = np.sign(diff)
    out = np.array(np.abs(diff).sum())
    return _make(out, (a, b), lambda g: [(a, float(g) * s), (b, -float(g) * s)])


# -- convolution -------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """3×3-style conv on a single C×H×W map via im2col.

    w is (c_out, c_in, kh, kw), b is (c_out,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: x {x.shape}, w {w.shape}")
    c_in, h, wd = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv2d: input channels {c_in} != weight channels {c_in_w}")
    if b.shape != (c_out,):
        raise ShapeMismatch(f"conv2d: bias shape {b.shape} != ({c_out},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    # im2col: (ho*wo, c_in*kh*kw)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride, :, :]  # (c_in, ho, wo, kh, kw)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    wm = w.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ wm.T + b.data).T.reshape(c_out, ho, wo)

    def grad_fn(g):
        gm = g.reshape(c_out, ho * wo)  # (c_out, P)
        dw = (gm @ cols).reshape(w.shape)
        db = gm.sum(axis=1)
        dcols = gm.T @ wm  # (P, c_in*kh*kw)
        dxp = np.zeros_like(xp)
        dcols = dcols.reshape(ho, wo, c_in, kh, kw)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                    dcols[:, :, :, i, j].transpose(2, 0, 1)
                )
        dx = dxp[:, pad : pad + h, pad : pad + wd]
        return [(x, dx), (w, dw), (b, db)]

    return _make(out, (x, w, b), grad_fn)


# -- gradient oracle ---------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Max relative error between backward() and central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    ``f`` must be pure; two forward passes are compared to catch
    nondeterminism.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise TensorError(f"eps {eps} outside [1e-7, 1e-3]")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    y1 = f(leaf)
    y2 = f(leaf)
    if y1.data.shape != y2.data.shape or not np.array_equal(y1.data, y2.data):
        raise NonDeterministicFunction("two forward passes disagree")
    if y1.data.size != 1:
        raise NotScalar("grad_check target must be scalar")
    leaf.zero_grad()
    backward(y1)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = leaf.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(leaf).item()
        flat[i] = orig - eps
        fm = f(leaf).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(leaf.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
