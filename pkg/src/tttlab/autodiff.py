"""Dense tensors with reverse-mode autodiff that can be applied repeatedly.

Every backward rule is written in terms of the same differentiable ops as the
forward pass, so the gradients returned by :func:`grad` are themselves graph
nodes and can be differentiated again (needed by the TTT outer loop, which
trains through an inner gradient step).

Shapes follow numpy conventions. Matrix products use the last two axes and
broadcast over any leading batch axes.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import erf

_ids = itertools.count()
_default_dtype = np.float64
_check_finite = True

# op name -> backward rule(out, g, needs) -> tuple of parent grads (or None)
BACKWARD: dict[str, Callable] = {}


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype):
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily toggle the per-op non-finite check (benchmarks turn it off)."""
    global _check_finite
    old = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = old


class Tensor:
    """An immutable array plus the graph record that produced it.

    ``op`` and ``parents`` are the graph node fields; leaves have ``op=None``.
    Only nodes with ``requires_grad`` keep references to their parents.
    """

    __slots__ = ("data", "op", "parents", "ctx", "requires_grad", "id", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if _check_finite and not np.isfinite(arr).all():
            raise FloatingPointError(f"tensor {name or ''} built from non-finite values")
        self.data = arr
        self.op = None
        self.parents: tuple = ()
        self.ctx = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad, name=self.name, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], ctx=None) -> Tensor:
    if _check_finite and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.ctx = ctx
    out.id = next(_ids)
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.parents = tuple(parents) if out.requires_grad else ()
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b))


def _add_bw(out, g, needs):
    a, b = out.parents
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b))


def _sub_bw(out, g, needs):
    a, b = out.parents
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b))


def _mul_bw(out, g, needs):
    a, b = out.parents
    return (sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if not np.all(b.data != 0):
        raise ZeroDivisionError("div: zero in denominator")
    return _make("div", a.data / b.data, (a, b))


def _div_bw(out, g, needs):
    a, b = out.parents
    ga = sum_to(div(g, b), a.shape) if needs[0] else None
    gb = sum_to(neg(div(mul(g, out), b)), b.shape) if needs[1] else None
    return ga, gb


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,))


def _neg_bw(out, g, needs):
    return (neg(g),)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (not part of the graph)."""
    a = as_tensor(a)
    return _make("scale", a.data * c, (a,), ctx=c)


def _scale_bw(out, g, needs):
    return (scale(g, out.ctx),)


# -- linear algebra and shape ops ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch extents {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    return _make("matmul", np.matmul(a.data, b.data), (a, b))


def _matmul_bw(out, g, needs):
    a, b = out.parents
    ga = sum_to(matmul(g, transpose(b)), a.shape) if needs[0] else None
    gb = sum_to(matmul(transpose(a), g), b.shape) if needs[1] else None
    return ga, gb


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), ctx=(ax1, ax2))


def _swapaxes_bw(out, g, needs):
    return (swapaxes(g, *out.ctx),)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ValueError(f"transpose: need at least 2-D, got {a.shape}")
    return swapaxes(a, -1, -2)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make("reshape", data, (a,), ctx=a.shape)


def _reshape_bw(out, g, needs):
    return (reshape(g, out.ctx),)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ValueError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _make("broadcast_to", data, (a,))


def _broadcast_to_bw(out, g, needs):
    return (sum_to(g, out.parents[0].shape),)


def _sum_axes(src: tuple, dst: tuple) -> tuple:
    lead = len(src) - len(dst)
    axes = list(range(lead))
    axes += [lead + i for i, n in enumerate(dst) if n == 1 and src[lead + i] != 1]
    return tuple(axes)


def sum_to(a, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    data = a.data.sum(axis=_sum_axes(a.shape, shape), keepdims=False).reshape(shape)
    return _make("sum_to", data, (a,))


def _sum_to_bw(out, g, needs):
    return (broadcast_to(g, out.parents[0].shape),)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    return _make("getitem", np.asarray(a.data[idx]), (a,), ctx=idx)


def _getitem_bw(out, g, needs):
    return (_scatter(g, out.ctx, out.parents[0].shape),)


def _scatter(g, idx, shape) -> Tensor:
    z = np.zeros(shape, dtype=g.data.dtype)
    np.add.at(z, idx, g.data)
    return _make("scatter", z, (g,), ctx=idx)


def _scatter_bw(out, g, needs):
    return (getitem(g, out.ctx),)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: extents {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), ts, ctx=(ax, sizes))


def _concat_bw(out, g, needs):
    ax, sizes = out.ctx
    grads, start = [], 0
    for n, need in zip(sizes, needs):
        if need:
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(start, start + n)
            grads.append(getitem(g, tuple(idx)))
        else:
            grads.append(None)
        start += n
    return tuple(grads)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + ts[0].ndim + 1
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


def time_reverse(a, axis: int = -2) -> Tensor:
    """Reverse the sequence axis (``-2`` for ``(..., T, d)`` token arrays)."""
    a = as_tensor(a)
    if a.ndim == 1:
        axis = 0
    # a contiguous copy, so downstream kernels see the same memory layout as for fresh input
    return _make("time_reverse", np.ascontiguousarray(np.flip(a.data, axis=axis)), (a,), ctx=axis)


def _time_reverse_bw(out, g, needs):
    return (time_reverse(g, out.ctx),)


# -- reductions ----------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), ctx=(axis, keepdims))


def _sum_bw(out, g, needs):
    (a,) = out.parents
    axis, keepdims = out.ctx
    if axis is not None and not keepdims:
        g = reshape(g, np.expand_dims(np.empty(out.shape, dtype=bool), axis).shape)
    return (broadcast_to(g, a.shape),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -- elementwise unary ---------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _make("tanh", np.tanh(a.data), (a,))


def _tanh_bw(out, g, needs):
    return (mul(g, sub(1.0, mul(out, out))),)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _make("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * a.data)), (a,))


def _sigmoid_bw(out, g, needs):
    return (mul(g, mul(out, sub(1.0, out))),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _make("exp", np.exp(a.data), (a,))


def _exp_bw(out, g, needs):
    return (mul(g, out),)


def log(a) -> Tensor:
    a = as_tensor(a)
    if not np.all(a.data > 0):
        raise ValueError("log: non-positive input")
    return _make("log", np.log(a.data), (a,))


def _log_bw(out, g, needs):
    return (div(g, out.parents[0]),)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make("power", np.power(a.data, p), (a,), ctx=p)


def _power_bw(out, g, needs):
    (a,) = out.parents
    p = out.ctx
    return (mul(g, scale(power(a, p - 1), p)),)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    return _make("clamp", np.clip(a.data, lo, hi), (a,), ctx=(lo, hi))


def _clamp_bw(out, g, needs):
    lo, hi = out.ctx
    x = out.parents[0].data
    inside = Tensor(((x >= lo) & (x <= hi)).astype(x.dtype))
    return (mul(g, inside),)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu(a) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    a = as_tensor(a)
    return _make("gelu", gelu_np(a.data), (a,))


def _gelu_bw(out, g, needs):
    return (mul(g, gelu_deriv(out.parents[0], 1)),)


_gelu_polys: dict[int, Polynomial] = {2: Polynomial([2.0, 0.0, -1.0])}


def _gelu_poly(n: int) -> Polynomial:
    # n-th derivative (n >= 2) is phi(x) * P_n(x), with P_{n+1} = P_n' - x P_n
    if n not in _gelu_polys:
        prev = _gelu_poly(n - 1)
        _gelu_polys[n] = prev.deriv() - Polynomial([0.0, 1.0]) * prev
    return _gelu_polys[n]


def gelu_deriv_np(x: np.ndarray, n: int = 1) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    if n == 1:
        return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi
    return phi * _gelu_poly(n)(x)


def gelu_deriv(a, n: int = 1) -> Tensor:
    """n-th derivative of GELU as a differentiable op."""
    a = as_tensor(a)
    return _make("gelu_deriv", gelu_deriv_np(a.data, n), (a,), ctx=n)


def _gelu_deriv_bw(out, g, needs):
    return (mul(g, gelu_deriv(out.parents[0], out.ctx + 1)),)


# -- normalization and losses --------------------------------------------------

def layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = np.power(var + eps, -0.5)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError(f"layer_norm: feature extent must be >= 1, got shape {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    for name, p in (("gain", gain), ("bias", bias)):
        if p.shape[-1:] != x.shape[-1:]:
            raise ValueError(f"layer_norm: {name} extent {p.shape} does not match features {x.shape[-1]}")
    y, _, _ = layer_norm_np(x.data, gain.data, bias.data, eps)
    _broadcast_shape("layer_norm", x, gain)
    return _make("layer_norm", y, (x, gain, bias), ctx=eps)


def _layer_norm_bw(out, g, needs):
    x, gain, bias = out.parents
    eps = out.ctx
    mu = mean(x, -1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), -1, keepdims=True)
    rstd = power(add(var, eps), -0.5)
    xhat = mul(xc, rstd)
    gx = None
    if needs[0]:
        gh = mul(g, gain)
        inner = sub(sub(gh, mean(gh, -1, keepdims=True)), mul(xhat, mean(mul(gh, xhat), -1, keepdims=True)))
        gx = sum_to(mul(rstd, inner), x.shape)
    ggain = sum_to(mul(g, xhat), gain.shape) if needs[1] else None
    gbias = sum_to(g, bias.shape) if needs[2] else None
    return gx, ggain, gbias


def squared_error(pred, target) -> Tensor:
    """Sum of squared differences (a scalar)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"squared_error: shape mismatch {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    return _make("squared_error", np.sum(d * d), (pred, target))


def _squared_error_bw(out, g, needs):
    pred, target = out.parents
    gp = scale(mul(g, sub(pred, target)), 2.0)
    return (gp if needs[0] else None, neg(gp) if needs[1] else None)


def masked_softmax(a, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is True."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("masked_softmax: a row has no admissible entries")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=-1, keepdims=True)
    return _make("softmax", y, (a,))


def _softmax_bw(out, g, needs):
    return (mul(out, sub(g, tsum(mul(g, out), -1, keepdims=True))),)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))
    return _make("log_softmax", x - lse, (a,))


def _log_softmax_bw(out, g, needs):
    return (sub(g, mul(exp(out), tsum(g, -1, keepdims=True))),)


for _name, _fn in {
    "add": _add_bw, "sub": _sub_bw, "mul": _mul_bw, "div": _div_bw, "neg": _neg_bw,
    "scale": _scale_bw, "matmul": _matmul_bw, "swapaxes": _swapaxes_bw,
    "reshape": _reshape_bw, "broadcast_to": _broadcast_to_bw, "sum_to": _sum_to_bw,
    "getitem": _getitem_bw, "scatter": _scatter_bw, "concat": _concat_bw,
    "time_reverse": _time_reverse_bw, "sum": _sum_bw, "tanh": _tanh_bw,
    "sigmoid": _sigmoid_bw, "exp": _exp_bw, "log": _log_bw, "power": _power_bw,
    "clamp": _clamp_bw, "gelu": _gelu_bw, "gelu_deriv": _gelu_deriv_bw,
    "layer_norm": _layer_norm_bw, "squared_error": _squared_error_bw,
    "softmax": _softmax_bw, "log_softmax": _log_softmax_bw,
}.items():
    BACKWARD[_name] = _fn


# -- gradient ------------------------------------------------------------------

def grad(output: Tensor, wrt: Sequence[Tensor], allow_unused: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``output`` with respect to ``wrt``.

    The returned tensors are graph nodes; calling ``grad`` on a function of
    them gives second (and higher) derivatives.
    """
    if output.size != 1:
        raise ValueError(f"grad: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    if not wrt:
        return []
    wanted = {w.id for w in wrt}
    floor = min(wanted)

    # nodes older than every wrt node cannot depend on them; stop there
    order, seen, stack_ = [], set(), [(output, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id >= floor and p.id not in seen:
                stack_.append((p, False))

    relevant = set()
    for node in order:
        if node.id in wanted or any(p.id in relevant for p in node.parents):
            relevant.add(node.id)
    missing = [w for w in wrt if w.id not in relevant]
    if missing and not allow_unused:
        names = ", ".join(w.name or f"#{w.id}" for w in missing)
        raise ValueError(f"grad: output does not depend on {names}")

    grads: dict[int, Tensor] = {}
    if output.id in relevant:
        grads[output.id] = Tensor(np.ones(output.shape, dtype=output.data.dtype))
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node.op is None:
            continue
        needs = tuple(p.id in relevant for p in node.parents)
        if not any(needs):
            continue
        rule = BACKWARD[node.op]
        pgrads = rule(node, g, needs)
        for p, pg, need in zip(node.parents, pgrads, needs):
            if not need or pg is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else add(prev, pg)

    out = []
    for w in wrt:
        g = grads.get(w.id)
        if g is None:
            g = Tensor(np.zeros(w.shape, dtype=w.data.dtype))
        out.append(g)
    return out


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f(x)
        x[i] = old - step
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| scaled by max(|a|, |b|, floor) taken over the whole array."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)
