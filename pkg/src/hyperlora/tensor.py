"""Dense tensors with taped reverse-mode differentiation.

Storage is 32-bit by default (64-bit is accepted everywhere and is used by the
gradient-check tooling, where finite differences need the extra headroom).
Reductions — sums, means and the normalisation statistics inside
``layer_norm``/``softmax_lastdim`` — accumulate in float64 before casting back
to the storage dtype, so results do not depend on how numpy happens to block
the loop. Matrix products go straight to BLAS in the storage dtype; with the
thread cap applied at package import they are deterministic run-to-run.

Values produced by the ops here are immutable by convention: no op mutates an
input array, and graphs may therefore share tensors freely across threads.
NaN/Inf anywhere is an error state; set ``HYPERLORA_STRICT_FINITE=1`` to make
every op assert finiteness of its output (too slow to leave on in training
loops, useful when hunting a numeric bug — the training loop instead checks
its scalar loss every step).
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np
from scipy import special as _sp_special

from .errors import NumericError

_STRICT_FINITE = os.environ.get("HYPERLORA_STRICT_FINITE", "0") == "1"

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode differentiation needs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction used internally by ops ---------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out

    # -- niceties -------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, rg={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    # -- reverse pass ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor
        that requires them. Frozen tensors (requires_grad=False) are skipped,
        so they never appear in any gradient map."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _finite_check(arr: np.ndarray) -> np.ndarray:
    if _STRICT_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced by a tensor op")
    return arr


def _accum(target: Tensor, grad: np.ndarray) -> None:
    if target.grad is None:
        target.grad = grad.astype(target.data.dtype, copy=True)
    else:
        target.grad += grad.astype(target.data.dtype, copy=False)


def _make(data, parents, backward_fn) -> Tensor:
    data = _finite_check(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor._from_op(data, [p for p in parents if isinstance(p, Tensor)], backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64).astype(grad.dtype)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64).astype(grad.dtype)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics for leading batch dims.

    Both operands must be at least 2-D; inner extents must agree. Summation
    order is whatever the (single-threaded) BLAS kernel does — fixed for a
    given shape, hence reproducible.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out_data = a.data * a.data.dtype.type(c)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * a.data.dtype.type(c))

    return _make(out_data, (a,), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data + a.data.dtype.type(float(c))

    def backward(g):
        if a.requires_grad:
            _accum(a, g)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _make(out_data, (a,), backward)


def swap_last2(a: Tensor) -> Tensor:
    nd = _as_tensor(a).data.ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))

    return _make(out_data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accum(t, g[tuple(sl)])

    return _make(out_data, tensors, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = np.ascontiguousarray(a.data[sl])

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[sl] = g
            _accum(a, buf)

    return _make(out_data, (a,), backward)


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (embedding lookup). Repeated indices
    scatter-add their gradients."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("index_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError("row index out of range")
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _reduce_sum(data: np.ndarray, axis, keepdims):
    return data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(data.dtype)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = _reduce_sum(a.data, axis, keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    out_data = (a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64) / count).astype(a.data.dtype)
    inv = 1.0 / count

    def backward(g):
        if not a.requires_grad:
            return
        gg = g * a.data.dtype.type(inv)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Piecewise form never exponentiates a large positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    out_data = a.data * s

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(out_data, (a,), backward)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x). (Not the tanh approximation — one
    unambiguous oracle.)"""
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + _sp_special.erf(x / _SQRT2))
    out_data = (x * phi).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x.astype(np.float64) ** 2) * _INV_SQRT_2PI
            _accum(a, g * (phi + x * pdf).astype(x.dtype))

    return _make(out_data, (a,), backward)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Max-subtracted softmax along the last axis; rows sum to 1."""
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp((x - m).astype(np.float64))
    s = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
            _accum(a, s * (g - dot))

    return _make(s, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.data.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    x64 = a.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = (x64 - mu) * inv
    xhat = xhat64.astype(a.data.dtype)
    out_data = (xhat64 * gamma.data + beta.data).astype(a.data.dtype)

    def backward(g):
        if gamma.requires_grad:
            gsum = (g * xhat).sum(axis=tuple(range(g.ndim - 1)), dtype=np.float64)
            _accum(gamma, gsum.astype(gamma.data.dtype))
        if beta.requires_grad:
            bsum = g.sum(axis=tuple(range(g.ndim - 1)), dtype=np.float64)
            _accum(beta, bsum.astype(beta.data.dtype))
        if a.requires_grad:
            dxhat = (g * gamma.data).astype(np.float64)
            t1 = dxhat.mean(axis=-1, keepdims=True)
            t2 = (dxhat * xhat64).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - t1 - xhat64 * t2)
            _accum(a, dx.astype(a.data.dtype))

    return _make(out_data, (a, gamma, beta), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, stable for |z| up to
    ~1e4: max(z,0) - z*y + log1p(exp(-|z|)). Targets are constants in {0,1}."""
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ValueError("targets must match logit shape")
    z = logits.data
    out_data = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).astype(z.dtype)

    def backward(g):
        if logits.requires_grad:
            _accum(logits, g * (_sigmoid_np(z) - y))

    return _make(out_data, (logits,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or p == 0; the mask is
    drawn from `rng`, so callers control reproducibility."""
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    a = _as_tensor(a)
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    factor = 1.0 / (1.0 - p)
    out_data = a.data * keep * a.data.dtype.type(factor)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * keep * a.data.dtype.type(factor))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with a per-entry trainable flag.

    Paths are unique; frozen entries never receive gradients (their tensors
    are built with requires_grad=False) and the optimizer refuses to touch
    them."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, path: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if path in self._entries:
            raise ValueError(f"duplicate parameter path: {path}")
        t = Tensor(np.asarray(value), requires_grad=trainable)
        self._entries[path] = t
        self._trainable[path] = bool(trainable)
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._entries[path]

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def paths(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_trainable(self, path: str) -> bool:
        return self._trainable[path]

    def trainable_paths(self) -> list[str]:
        return [p for p, t in self._trainable.items() if t]

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient map over trainable entries that actually received one."""
        out = {}
        for p in self.trainable_paths():
            g = self._entries[p].grad
            if g is not None:
                out[p] = g
        return out

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def n_params(self, trainable_only: bool = True) -> int:
        return sum(
            t.data.size
            for p, t in self._entries.items()
            if (self._trainable[p] or not trainable_only)
        )
