"""Dense-array math with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Primitives applied while a
:class:`Tape` is active append a record with an analytic backward rule;
``Tape.backward`` replays the records in exact reverse application order,
summing contributions from every consumer of a node. Running primitives
with no active tape gives plain (gradient-free) evaluation.

Tests run everything in float64; training builds use float32 via the
trainer config. Nothing here is thread-aware beyond the rule that one
tape is used by one thread; the active tape is thread-local.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

# Large negative additive bias used to disallow attention edges. Finite so
# the post-add array stays finite; exp(x - max) underflows to exactly 0.
NEG_ATTENTION_BIAS = -1e30

GELU_C0 = 0.7978845608
GELU_C1 = 0.044715
LAYERNORM_EPS = 1e-5

_tls = threading.local()

_check_finite = False


def set_check_finite(enabled: bool) -> None:
    """Toggle the per-primitive finiteness assertion (off by default)."""
    global _check_finite
    _check_finite = enabled


class Tensor:
    """A dense array participating in gradient computation."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        self.data = np.asarray(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of primitive applications, replayed in reverse."""

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tls.stack.pop()

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node reachable from loss.

        Returns a map from ``id(tensor)`` to its gradient array. Leaves
        (tensors that are not outputs of a recorded primitive, e.g. the
        parameters) remain in the map after the walk.
        """
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed)
        }
        for out, inputs, bwd in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gt in zip(inputs, bwd(g)):
                if t is None or gt is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gt if acc is None else acc + gt
        return grads


def _tape() -> Tape | None:
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


def _data(x):
    """Unwrap Tensors; keep python scalars as weak scalars (no promotion)."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, (bool, int, float)):
        return x
    return np.asarray(x)


def _finish(op: str, out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if _check_finite and not np.all(np.isfinite(out)):
        raise NumericsError(f"{op}: non-finite value in output")
    t = Tensor(out)
    tape = _tape()
    if tape is not None:
        tracked = tuple(x if isinstance(x, Tensor) else None for x in inputs)
        if any(x is not None for x in tracked):
            tape.record(t, tracked, backward)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    ash, bsh = np.shape(av), np.shape(bv)
    out = av + bv
    return _finish("add", out, (a, b), lambda g: (
        _unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    ash, bsh = np.shape(av), np.shape(bv)
    out = av - bv
    return _finish("sub", out, (a, b), lambda g: (
        _unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    ash, bsh = np.shape(av), np.shape(bv)
    out = av * bv
    return _finish("mul", out, (a, b), lambda g: (
        _unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)))


def matmul(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError("matmul", av.shape, bv.shape)
    out = av @ bv

    def backward(g):
        ga = _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape)
        gb = _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape)
        return ga, gb

    return _finish("matmul", out, (a, b), backward)


def reshape(a, shape) -> Tensor:
    av = _data(a)
    out = av.reshape(shape)
    return _finish("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    av = _data(a)
    out = np.ascontiguousarray(av.swapaxes(ax1, ax2))
    return _finish("swapaxes", out, (a,), lambda g: (g.swapaxes(ax1, ax2),))


def gather(a, idx, unique: bool = False) -> Tensor:
    """Rows of ``a`` along axis 0 selected by an integer index array.

    ``unique=True`` promises the caller that ``idx`` has no repeats, which
    lets the backward use plain assignment instead of ``np.add.at``.
    """
    av = _data(a)
    idx = np.asarray(idx)
    out = av[idx]

    def backward(g):
        gt = np.zeros_like(av)
        if unique:
            gt[idx] = g
        else:
            np.add.at(gt, idx, g)
        return (gt,)

    return _finish("gather", out, (a,), backward)


def scatter_rows(rows, idx, n: int) -> Tensor:
    """Place ``rows`` at positions ``idx`` of a fresh zero array of ``n`` rows.

    ``idx`` must not contain repeats (partitions always satisfy this).
    """
    rv = _data(rows)
    idx = np.asarray(idx)
    out = np.zeros((n,) + rv.shape[1:], dtype=rv.dtype)
    out[idx] = rv
    return _finish("scatter_rows", out, (rows,), lambda g: (g[idx],))


def softmax(a) -> Tensor:
    av = _data(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _finish("softmax", out, (a,), lambda g: (
        out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(a) -> Tensor:
    av = _data(a)
    m = av.max(axis=-1, keepdims=True)
    shifted = av - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _finish("log_softmax", out, (a,), lambda g: (
        g - p * g.sum(axis=-1, keepdims=True),))


def logsumexp(a) -> Tensor:
    av = _data(a)
    m = av.max(axis=-1, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    p = e / s
    return _finish("logsumexp", out, (a,), lambda g: (np.expand_dims(g, -1) * p,))


def layer_norm(a, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    av = _data(a)
    mu = av.mean(axis=-1, keepdims=True)
    var = av.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (av - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gxm) * inv,)

    return _finish("layer_norm", xhat, (a,), backward)


def gelu(a) -> Tensor:
    """GELU, tanh approximation with fixed constants."""
    av = _data(a)
    sq = av * av
    inner = GELU_C0 * (av + GELU_C1 * sq * av)
    th = np.tanh(inner)
    out = 0.5 * av * (1.0 + th)

    def backward(g):
        dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * sq)
        return (g * (0.5 * (1.0 + th) + 0.5 * av * (1.0 - th * th) * dinner),)

    return _finish("gelu", out, (a,), backward)


def _restore_axes(g, src_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, src_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(src_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, src_shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _data(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    return _finish("sum", out, (a,), lambda g: (
        _restore_axes(g, av.shape, axis, keepdims).copy(),))


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _data(a)
    out = av.mean(axis=axis, keepdims=keepdims)
    count = av.size // out.size
    return _finish("mean", out, (a,), lambda g: (
        _restore_axes(g, av.shape, axis, keepdims) / count,))


def square(a) -> Tensor:
    av = _data(a)
    return _finish("square", av * av, (a,), lambda g: (2.0 * av * g,))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def param_grads(gradmap: dict[int, np.ndarray], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Extract named parameter gradients; untouched parameters get zeros."""
    return {
        name: gradmap.get(id(t), np.zeros_like(t.data)) for name, t in params.items()
    }


def gradient_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    param_names: Sequence[str] | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    Returns the max over all parameter scalars of |a - f| / max(1, |a|, |f|).
    ``loss_fn`` must be deterministic and everything must be float64.
    ``param_names`` restricts the sweep (all parameters by default).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for name, t in params.items():
        if t.dtype != np.float64:
            raise NumericsError(f"gradient_check requires float64 params; {name} is {t.dtype}")

    with Tape() as tape:
        loss = loss_fn(params)
    if not np.isfinite(loss.data):
        raise NumericsError("gradient_check: loss not finite at the base point")
    analytic = param_grads(tape.backward(loss), params)

    names = list(param_names) if param_names is not None else list(params)
    max_rel = 0.0
    for name in names:
        flat = params[name].data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn(params).data)
            flat[i] = orig - eps
            lm = float(loss_fn(params).data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericsError(
                    f"gradient_check: non-finite loss perturbing {name}[{i}] by ±{eps}")
            fd = (lp - lm) / (2.0 * eps)
            rel = abs(ga[i] - fd) / max(1.0, abs(ga[i]), abs(fd))
            if rel > max_rel:
                max_rel = rel
    return max_rel
