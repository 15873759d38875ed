"""Dense tensors with reverse-mode automatic differentiation on numpy.

Float32 by default; switch to float64 (``using_dtype``) for gradient
verification. A tensor records the op that produced it plus its parents;
``reverse_accumulate`` walks that tape in reverse creation order.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_TAPE_COUNTER = itertools.count()
_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

# Incremented whenever cosine_similarity_matrix clamps a zero-norm vector.
ZERO_NORM_EVENTS = 0


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    saved = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(saved)


@contextmanager
def no_grad():
    """Disable tape recording (evaluation fast path)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


class Tensor:
    """A dense array plus optional gradient accumulator and tape record.

    Values are immutable after creation as far as ops are concerned; a
    backward pass only ever touches ``grad``.
    """

    __slots__ = ("values", "requires_grad", "grad", "tape_id", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = np.asarray(values, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.tape_id = next(_TAPE_COUNTER)
        self._parents = ()
        self._backward = None

    @classmethod
    def _op(cls, values, parents, backward):
        out = cls.__new__(cls)
        out.values = values
        out.tape_id = next(_TAPE_COUNTER)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.grad = None  # only leaves accumulate into .grad
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out.grad = None
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = self.values
        out.requires_grad = False
        out.grad = None
        out.tape_id = next(_TAPE_COUNTER)
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.values.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
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
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_vals = a.values + b.values

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g, b.shape))

    return Tensor._op(out_vals, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_vals = a.values - b.values

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(-g, b.shape))

    return Tensor._op(out_vals, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_vals = a.values * b.values

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g * a.values, b.shape))

    return Tensor._op(out_vals, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_vals = a.values / b.values

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(-g * a.values / (b.values * b.values), b.shape))

    return Tensor._op(out_vals, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, acc):
        acc(a, -g)

    return Tensor._op(-a.values, (a,), backward)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out_vals = np.exp(a.values)

    def backward(g, acc):
        acc(a, g * out_vals)

    return Tensor._op(out_vals, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g, acc):
        acc(a, g / a.values)

    return Tensor._op(np.log(a.values), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_vals = np.sqrt(a.values)

    def backward(g, acc):
        acc(a, g / (2.0 * out_vals))

    return Tensor._op(out_vals, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    x = a.values
    out_vals = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g, acc):
        acc(a, g * out_vals * (1.0 - out_vals))

    return Tensor._op(out_vals, (a,), backward)


def silu(a: Tensor) -> Tensor:
    x = a.values
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_vals = x * s

    def backward(g, acc):
        acc(a, g * (s + x * s * (1.0 - s)))

    return Tensor._op(out_vals, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.values
    out_vals = np.logaddexp(0.0, x)

    def backward(g, acc):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        acc(a, g * s)

    return Tensor._op(out_vals, (a,), backward)


def maximum(a: Tensor, const: float) -> Tensor:
    """Elementwise max against a constant; gradient is zero where clamped."""
    out_vals = np.maximum(a.values, const)

    def backward(g, acc):
        acc(a, g * (a.values > const))

    return Tensor._op(out_vals, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_vals = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g, a.shape).astype(a.values.dtype, copy=True))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        acc(a, np.broadcast_to(g, a.shape).astype(a.values.dtype, copy=True))

    return Tensor._op(out_vals, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.values.size
    else:
        count = a.values.shape[axis]
    out_vals = a.values.mean(axis=axis, keepdims=keepdims)

    def backward(g, acc):
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        acc(a, np.broadcast_to(gg, a.shape).astype(a.values.dtype, copy=True))

    return Tensor._op(out_vals, (a,), backward)


# ---------------------------------------------------------------------------
# shape / gather ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g, acc):
        acc(a, g.reshape(a.shape))

    return Tensor._op(a.values.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    def backward(g, acc):
        if axes is None:
            acc(a, g.transpose())
        else:
            acc(a, g.transpose(np.argsort(axes)))

    return Tensor._op(a.values.transpose(axes), (a,), backward)


def take(a: Tensor, idx) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    out_vals = a.values[idx]

    def backward(g, acc):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        acc(a, full)

    return Tensor._op(out_vals, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, acc):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                acc(t, g[tuple(sl)])

    return Tensor._op(out_vals, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise ValueError(f"embedding: id {bad} outside table of {table.shape[0]} rows")
    out_vals = table.values[ids]

    def backward(g, acc):
        full = np.zeros_like(table.values)
        np.add.at(full, ids, g)
        acc(table, full)

    return Tensor._op(out_vals, (table,), backward)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim > 2 or b.ndim > 2:
        raise ValueError(f"matmul supports 1D/2D operands, got {a.shape} @ {b.shape}")
    out_vals = a.values @ b.values

    def backward(g, acc):
        av, bv = a.values, b.values
        # promote to 2D so one gradient rule covers all four shape cases
        a2 = av.reshape(1, -1) if av.ndim == 1 else av
        b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        if a.requires_grad:
            acc(a, (g2 @ b2.T).reshape(av.shape))
        if b.requires_grad:
            acc(b, (a2.T @ g2).reshape(bv.shape))

    return Tensor._op(out_vals, (a, b), backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _check_softmax_input(x: np.ndarray, op: str, allow_neg_inf: bool) -> None:
    bad = ~np.isfinite(x)
    if allow_neg_inf:
        bad &= ~np.isneginf(x)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{op}: non-finite input {x[pos]!r} at position {pos}")


def softmax(a: Tensor, axis: int = -1, _allow_neg_inf: bool = False) -> Tensor:
    """Max-subtracted softmax; rejects non-finite input (internal callers
    may permit the -inf mask sentinel)."""
    _check_softmax_input(a.values, "softmax", _allow_neg_inf)
    if axis >= a.ndim or axis < -a.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {a.shape}")
    m = a.values.max(axis=axis, keepdims=True)
    e = np.exp(a.values - m)
    out_vals = e / e.sum(axis=axis, keepdims=True)

    def backward(g, acc):
        dot = (g * out_vals).sum(axis=axis, keepdims=True)
        acc(a, out_vals * (g - dot))

    return Tensor._op(out_vals, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_softmax_input(a.values, "log_softmax", False)
    if axis >= a.ndim or axis < -a.ndim:
        raise ValueError(f"log_softmax: axis {axis} invalid for shape {a.shape}")
    m = a.values.max(axis=axis, keepdims=True)
    shifted = a.values - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_vals = shifted - lse

    def backward(g, acc):
        acc(a, g - np.exp(out_vals) * g.sum(axis=axis, keepdims=True))

    return Tensor._op(out_vals, (a,), backward)


def masked_fill(a: Tensor, allowed: np.ndarray, fill: float) -> Tensor:
    """Replace entries where ``allowed`` is False; their gradient is zero."""
    out_vals = np.where(allowed, a.values, a.values.dtype.type(fill))

    def backward(g, acc):
        acc(a, g * allowed)

    return Tensor._op(out_vals, (a,), backward)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class AttentionMask:
    """Boolean (query, key) visibility matrix.

    Construction rejects any query row with no allowed key, so downstream
    softmax never sees an all -inf row.
    """

    def __init__(self, allowed):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {allowed.shape}")
        dead = ~allowed.any(axis=1)
        if dead.any():
            raise ValueError(f"mask row {int(np.argwhere(dead)[0][0])} allows no keys")
        self.allowed = allowed

    @property
    def rows(self) -> int:
        return self.allowed.shape[0]

    @property
    def cols(self) -> int:
        return self.allowed.shape[1]

    @classmethod
    def full(cls, rows: int, cols: int) -> "AttentionMask":
        return cls(np.ones((rows, cols), dtype=bool))

    def __repr__(self):
        return f"AttentionMask({self.rows}x{self.cols}, allowed={int(self.allowed.sum())})"


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask, heads: int) -> Tensor:
    """Multi-head scaled-dot-product attention under a boolean mask.

    Forbidden (query, key) pairs get exactly zero weight: scores are set to
    -inf pre-softmax and the max-subtraction maps them to exp(-inf) = 0.
    """
    nq, d = q.shape
    nk, dk = k.shape
    if dk != d or v.shape != (nk, d):
        raise ValueError(f"attention dims disagree: q{q.shape} k{k.shape} v{v.shape}")
    if mask.rows != nq or mask.cols != nk:
        raise ValueError(f"mask {mask.rows}x{mask.cols} does not match q{nq} x k{nk}")
    if d % heads != 0:
        raise ValueError(f"heads={heads} must divide model dim {d}")
    hd = d // heads
    scale = 1.0 / math.sqrt(hd)
    outs = []
    for h in range(heads):
        cols = slice(h * hd, (h + 1) * hd)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        scores = mul(matmul(qh, transpose(kh)), scale)
        scores = masked_fill(scores, mask.allowed, -np.inf)
        attn = softmax(scores, axis=1, _allow_neg_inf=True)
        outs.append(matmul(attn, vh))
    return outs[0] if heads == 1 else concat(outs, axis=1)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    normed = div(xc, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def cosine_similarity_matrix(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Pairwise cosine similarities, rows of ``a`` against rows of ``b``.

    Zero-norm rows yield 0 (the clamped denominator leaves the zero
    numerator untouched) and bump ZERO_NORM_EVENTS.
    """
    global ZERO_NORM_EVENTS
    na = np.linalg.norm(a.values, axis=-1)
    nb = np.linalg.norm(b.values, axis=-1)
    if (na < eps).any() or (nb < eps).any():
        ZERO_NORM_EVENTS += 1
    num = matmul(a, transpose(b))
    den_a = maximum(sqrt(tsum(mul(a, a), axis=1, keepdims=True)), eps)
    den_b = maximum(sqrt(tsum(mul(b, b), axis=1, keepdims=True)), eps)
    return div(num, mul(den_a, transpose(den_b)))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def reverse_accumulate(loss: Tensor) -> dict:
    """Backpropagate from a scalar loss.

    Returns {leaf tensor: gradient array} and adds into each leaf's
    ``.grad``; calling again without zeroing accumulates.
    """
    if loss.values.size != 1:
        raise ValueError(f"reverse_accumulate needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    # creation order is a topological order: parents always precede children
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t.tape_id, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaf_grads: dict[Tensor, np.ndarray] = {}

    def acc(t: Tensor, g: np.ndarray):
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, acc)
        else:
            node.grad += g
            leaf_grads[node] = g
    return leaf_grads


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error <= self.tolerance for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} tolerance={self.tolerance:g} step={self.step:g}"]
        for e in sorted(self.entries, key=lambda e: -e.max_rel_error):
            mark = "ok  " if e.max_rel_error <= self.tolerance else "FAIL"
            lines.append(f"  {mark} {e.name}: max_rel_err={e.max_rel_error:.3e}")
        return "\n".join(lines)


def finite_difference_check(f, params: dict, step: float = 1e-5,
                            tolerance: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` takes no arguments, reads the given parameter tensors, and returns
    a scalar Tensor. Requires 64-bit parameters and a deterministic ``f``
    (verified by evaluating twice).
    """
    for name, p in params.items():
        if p.values.dtype != np.float64:
            raise ValueError(f"finite_difference_check requires float64 params; {name!r} is {p.values.dtype}")
        if not p.requires_grad:
            raise ValueError(f"parameter {name!r} does not require grad")

    y1 = f().item()
    y2 = f().item()
    if y1 != y2:
        raise ValueError(f"f is not deterministic: {y1!r} != {y2!r}")

    for p in params.values():
        p.zero_grad()
    reverse_accumulate(f())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    report = GradCheckReport(tolerance=tolerance, step=step)
    for name, p in params.items():
        flat = p.values.reshape(-1)
        g_fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            y_plus = f().item()
            flat[i] = orig - step
            y_minus = f().item()
            flat[i] = orig
            g_fd[i] = (y_plus - y_minus) / (2.0 * step)
        g_ad = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
        rel = np.abs(g_ad - g_fd) / denom
        report.entries.append(GradCheckEntry(name=name, max_rel_error=float(rel.max(initial=0.0))))
    return report
