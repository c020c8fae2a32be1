"""Dense float64 tensors with reverse-mode differentiation.

Small tape-based engine: every operation records its parents and a
backward closure that maps the output gradient to per-parent gradients.
Calling :func:`backward` on a scalar walks the tape in reverse
topological order and accumulates into ``.grad`` of every reachable
tensor that requires gradients. Arrays are always float64 and every
operation is deterministic, so training runs are bit-reproducible for a
fixed seed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
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
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        return (g * c,)

    return _make(a.data * c, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics (operands must be >= 2-D)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), back)


# ---------------------------------------------------------------------------
# shape ops


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), back)


def swap_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        return (g.reshape(a.shape),)

    return _make(np.ascontiguousarray(a.data).reshape(shape), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(data, tuple(tensors), back)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along an axis; backward scatter-adds into the source.

    Repeated indices commonly arrive as contiguous runs (queries sharing
    a sequence slot), so the backward collapses runs with reduceat before
    scattering; add.at only handles whatever duplication remains.
    """
    idx = np.asarray(indices, dtype=np.intp)
    unique = len(np.unique(idx)) == len(idx)

    def back(g):
        full = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        if unique:
            sl[axis] = idx
            full[tuple(sl)] = g
            return (full,)
        if axis == 0 and len(idx) > 1:
            starts = np.flatnonzero(np.diff(idx) != 0) + 1
            starts = np.concatenate(([0], starts))
            reps = idx[starts]
            collapsed = np.add.reduceat(g, starts, axis=0)
            if len(np.unique(reps)) == len(reps):
                full[reps] = collapsed
            else:
                np.add.at(full, reps, collapsed)
            return (full,)
        sl[axis] = idx
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` (bias broadcast over leading axes)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear inner dimensions differ: {x.shape} vs {w.shape}")

    def back(g):
        gx = np.matmul(g, w.data.T)
        lead = tuple(range(g.ndim - 2))
        gw = np.matmul(np.swapaxes(x.data, -1, -2), g)
        if lead:
            gw = gw.sum(axis=lead)
        gb = g.sum(axis=tuple(range(g.ndim - 1)))
        return gx, gw, gb

    return _make(np.matmul(x.data, w.data) + b.data, (x, w, b), back)


def masked_linear(x: Tensor, w: Tensor, b: Tensor, mask: np.ndarray) -> Tensor:
    """``(x @ w + b) * mask`` with a constant 0/1 row mask (..., rows, 1)."""
    m = np.asarray(mask, dtype=np.float64)

    def back(g):
        gm = g * m
        gx = np.matmul(gm, w.data.T)
        gw = np.matmul(np.swapaxes(x.data, -1, -2), gm)
        lead = tuple(range(g.ndim - 2))
        if lead:
            gw = gw.sum(axis=lead)
        gb = gm.sum(axis=tuple(range(g.ndim - 1)))
        return gx, gw, gb

    return _make((np.matmul(x.data, w.data) + b.data) * m, (x, w, b), back)


def add_masked(a: Tensor, b: Tensor, mask: np.ndarray) -> Tensor:
    """``(a + b) * mask`` for same-shape tensors and a constant mask."""
    m = np.asarray(mask, dtype=np.float64)

    def back(g):
        gm = g * m
        return gm, gm

    return _make((a.data + b.data) * m, (a, b), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh formulation."""
    x = a.data
    x2 = x * x
    inner = x * (_GELU_C + (_GELU_C * 0.044715) * x2)
    t = np.tanh(inner)
    half_x = 0.5 * x
    data = half_x + half_x * t

    def back(g):
        d_inner = _GELU_C + (3 * _GELU_C * 0.044715) * x2
        d = 0.5 + 0.5 * t + half_x * ((1.0 - t * t) * d_inner)
        d *= g
        return (d,)

    return _make(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), back)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through interior positions only."""
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi), (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; slices sum to 1 within 1e-12."""
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), back)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (no affine); variance floored by eps."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * data).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - data * gym),)

    return _make(data, (a,), back)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into ``.grad`` of every reachable tensor with
    ``requires_grad``; repeated calls without ``zero_grad`` keep adding.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    staged: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = staged.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.accumulate_grad(g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            prev = staged.get(id(p))
            # never += in place: pg may be a view into another buffer
            staged[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterSet:
    """Named learnable tensors, each carrying its own gradient accumulator."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = _wrap(values)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def load_values(self, other: "ParameterSet") -> None:
        for name, t in self._params.items():
            t.data = other[name].data.copy()

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())


@dataclass
class OptimizerState:
    """Adam first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ParameterSet, state: OptimizerState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 1e-6) -> None:
    """One Adam update with bias correction.

    Weight decay is the coupled form: added to the gradient as an L2 term
    before the moment updates. Parameters without gradients are treated as
    zero-gradient (still decayed).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay != 0.0:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]


def _rel_err(a: float, b: float) -> float:
    m = max(abs(a), abs(b))
    if m < 1e-9:
        return 0.0
    return abs(a - b) / m


def grad_check(fn, inputs: Sequence[Tensor], eps: float = 1e-4,
               tol: float = 1e-3, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(inputs)`` against central
    finite differences.

    ``fn`` must return a scalar Tensor. When ``max_coords`` is given, only
    that many randomly chosen coordinates per input are probed (keeps large
    models affordable); otherwise every coordinate is checked.
    """
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.zero_grad()
    loss = fn(inputs)
    backward(loss)

    if rng is None:
        rng = np.random.default_rng(0)
    entries = []
    for i, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                up = fn(inputs).item()
            flat[c] = orig - eps
            with no_grad():
                down = fn(inputs).item()
            flat[c] = orig
            fd = (up - down) / (2.0 * eps)
            worst = max(worst, _rel_err(analytic[c], fd))
        entries.append(GradCheckEntry(name=f"input{i}", max_rel_error=worst,
                                      passed=worst < tol))
    return GradCheckReport(entries=entries, tol=tol)


def standard_op_checks(rng: np.random.Generator, sizes=(3, 4)) -> list[tuple[str, Callable, list[Tensor]]]:
    """One scalar-valued probe per registered differentiable operation.

    Returns (name, fn, inputs) triples for :func:`grad_check`; inputs are
    random in [-2, 2].
    """
    r, c = sizes

    def u(*shape):
        return Tensor(rng.uniform(-2.0, 2.0, size=shape))

    def u_away(*shape, bounds=(-1.5, 1.5), margin=0.01):
        # keep samples clear of clip kinks so finite differences stay valid
        x = rng.uniform(-2.0, 2.0, size=shape)
        for b in bounds:
            near = np.abs(x - b) < margin
            x = np.where(near, x + 5 * margin, x)
        return Tensor(x)

    def probe(*shape):
        # fixed projection so the scalar output exercises every coordinate
        return Tensor(rng.uniform(-1.0, 1.0, size=shape))

    half = Tensor(np.full((r, c), 0.5))
    p_cr = probe(c, r)
    p_rc = probe(r, c)
    p_r2c = probe(r, 2 * c)
    p_4c = probe(4, c)
    p_6c = probe(6, c)
    p_c = probe(c)
    p_r = probe(r)
    p_rr = probe(r, r)
    m_r1 = (rng.uniform(size=(r, 1)) < 0.7).astype(np.float64)

    checks = [
        ("add", lambda xs: tsum(add(xs[0], xs[1])), [u(r, c), u(r, c)]),
        ("sub", lambda xs: tsum(sub(xs[0], xs[1])), [u(r, c), u(r, c)]),
        ("mul", lambda xs: tsum(mul(xs[0], xs[1])), [u(r, c), u(r, c)]),
        ("div", lambda xs: tsum(div(xs[0], add(mul(xs[1], xs[1]), half))), [u(r, c), u(r, c)]),
        ("scale", lambda xs: tsum(scale(xs[0], 1.7)), [u(r, c)]),
        ("matmul", lambda xs: tsum(matmul(xs[0], xs[1])), [u(r, c), u(c, r)]),
        ("matmul_batched", lambda xs: tsum(matmul(xs[0], xs[1])), [u(2, r, c), u(c, r)]),
        ("transpose", lambda xs: tsum(mul(swap_last2(xs[0]), p_cr)), [u(r, c)]),
        ("reshape", lambda xs: tsum(mul(reshape(xs[0], (c, r)), p_cr)), [u(r, c)]),
        ("concat", lambda xs: tsum(mul(concat([xs[0], xs[1]], axis=1), p_r2c)), [u(r, c), u(r, c)]),
        ("take", lambda xs: tsum(mul(take(xs[0], [0, 2, 2, 1], axis=0), p_4c)), [u(r, c)]),
        ("take_runs", lambda xs: tsum(mul(take(xs[0], [0, 0, 2, 2, 1, 0], axis=0),
                                          p_6c)), [u(r, c)]),
        ("linear", lambda xs: tsum(mul(linear(xs[0], xs[1], xs[2]), p_rr)),
         [u(r, c), u(c, r), u(r)]),
        ("masked_linear",
         lambda xs: tsum(mul(masked_linear(xs[0], xs[1], xs[2], m_r1), p_rr)),
         [u(r, c), u(c, r), u(r)]),
        ("add_masked", lambda xs: tsum(mul(add_masked(xs[0], xs[1], m_r1), p_rc)),
         [u(r, c), u(r, c)]),
        ("sum_axis", lambda xs: tsum(mul(tsum(xs[0], axis=0), p_c)), [u(r, c)]),
        ("mean_axis", lambda xs: tsum(mul(mean(xs[0], axis=1), p_r)), [u(r, c)]),
        ("gelu", lambda xs: tsum(gelu(xs[0])), [u(r, c)]),
        ("sigmoid", lambda xs: tsum(mul(sigmoid(xs[0]), p_rc)), [u(r, c)]),
        ("log", lambda xs: tsum(log(add(mul(xs[0], xs[0]), half))), [u(r, c)]),
        ("clip", lambda xs: tsum(mul(clip(xs[0], -1.5, 1.5), p_rc)), [u_away(r, c)]),
        ("softmax", lambda xs: tsum(mul(softmax(xs[0], axis=-1), p_rc)), [u(r, c)]),
        ("layer_norm", lambda xs: tsum(mul(layer_norm(xs[0]), p_rc)), [u(r, c)]),
        ("composite_softmax_matmul",
         lambda xs: tsum(mul(softmax(matmul(xs[0], xs[1]), axis=-1), p_rr)),
         [u(r, c), u(c, r)]),
    ]
    return checks
