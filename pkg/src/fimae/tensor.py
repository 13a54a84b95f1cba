"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation goes through a thread-local gradient tape:
the forward pass appends one record per primitive, and ``backward`` replays
the records in reverse, accumulating gradients into ``requires_grad``
leaves.  Arrays are plain numpy; float32 is the training default and
float64 is used when verifying gradients against finite differences.

Broadcasting is deliberately restricted: two operands must either have
identical shapes or one must equal a trailing suffix of the other (the
usual bias-over-batch case).  Anything else is a shape error, loudly.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


# ---------------------------------------------------------------------------
# tensor + tape
# ---------------------------------------------------------------------------


class Tensor:
    """N-d array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_rec")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._rec: _Record | None = None

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def is_leaf(self) -> bool:
        return self._rec is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    """One primitive application: inputs, output, and its vjp."""

    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class GradTape:
    """Ordered log of primitive records; append order is topological."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)


class _State(threading.local):
    def __init__(self):
        self.tape = GradTape()
        self.grad_enabled = True


_state = _State()


def active_tape() -> GradTape:
    return _state.tape


def reset_tape() -> None:
    _state.tape = GradTape()


class no_grad:
    """Context manager: primitives run untaped inside the block."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = _Record(op, tuple(inputs), out, vjp)
        out._rec = rec
        _state.tape.records.append(rec)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (identical shapes, or suffix broadcast)
# ---------------------------------------------------------------------------


def _check_suffix(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not align")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix("add", a.data, b.data)
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _emit("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix("sub", a.data, b.data)
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.data.shape), -_reduce_to(g, b.data.shape)

    return _emit("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    if isinstance(a, (int, float)):
        return scale(b, float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix("mul", a.data, b.data)
    out = a.data * b.data

    def vjp(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _emit("mul", (a, b), out, vjp)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, 1.0 / float(b))
    b = _as_tensor(b)
    _check_suffix("div", a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        ga = _reduce_to(g / b.data, a.data.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _emit("div", (a, b), out, vjp)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data * s
    return _emit("scale", (a,), out, lambda g: (g * s,))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {da.shape} @ {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {da.shape} @ {db.shape}")
    if da.ndim != 2 and db.ndim != 2 and da.shape[:-2] != db.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {da.shape} @ {db.shape}")
    out = da @ db

    def vjp(g):
        ga = _reduce_to(g @ db.swapaxes(-1, -2), da.shape)
        gb = _reduce_to(da.swapaxes(-1, -2) @ g, db.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# layout primitives
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    src = a.data.shape
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _emit("transpose", (a,), out, lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(ts)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _emit("concat", tuple(ts), out, vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    out = a.data[tuple(sl)]
    src = a.data.shape

    def vjp(g):
        gz = np.zeros(src, dtype=g.dtype)
        gz[tuple(sl)] = g
        return (gz,)

    return _emit("slice", (a,), out, vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows along axis 0 (the only axis this library needs)."""
    if axis != 0:
        raise ShapeError("take: only axis 0 is supported")
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(f"take: index out of range for leading extent {a.data.shape[0]}")
    out = a.data[idx]
    src = a.data.shape

    def vjp(g):
        gz = np.zeros(src, dtype=g.dtype)
        np.add.at(gz, idx, g)
        return (gz,)

    return _emit("take", (a,), out, vjp)


def index_add(base, indices, values) -> Tensor:
    """base with values added at the given leading-axis rows."""
    base, values = _as_tensor(base), _as_tensor(values)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (values.data.shape[0],):
        raise ShapeError(f"index_add: {idx.shape} indices for {values.data.shape[0]} value rows")
    if idx.size and (idx.min() < 0 or idx.max() >= base.data.shape[0]):
        raise ShapeError(f"index_add: index out of range for leading extent {base.data.shape[0]}")
    if base.data.shape[1:] != values.data.shape[1:]:
        raise ShapeError(f"index_add: trailing shapes differ, {base.shape} vs {values.shape}")
    out = base.data.copy()
    np.add.at(out, idx, values.data)

    def vjp(g):
        return g, g[idx]

    return _emit("index_add", (base, values), out, vjp)


def broadcast_rows(a, n: int) -> Tensor:
    """Repeat a 1-d tensor as n identical rows."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected rank-1, got {a.shape}")
    out = np.broadcast_to(a.data, (n, a.data.shape[0])).copy()
    return _emit("broadcast_rows", (a,), out, lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, src).copy(),)

    return _emit("sum", (a,), out, vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    src = a.data.shape
    count = a.data.size if axis is None else src[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy() / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, src).copy() / count,)

    return _emit("mean", (a,), out, vjp)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def vjp(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _emit("mse", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _emit("softmax", (a,), y, vjp)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", (a,), out, vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", (a,), y, vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: affine shape {gain.shape}/{bias.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (x.data - mu) * inv
    out = xh * gain.data + bias.data

    def vjp(g):
        dxh = g * gain.data
        dx = (dxh - dxh.mean(axis=-1, keepdims=True)
              - xh * (dxh * xh).mean(axis=-1, keepdims=True)) * inv
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xh).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _emit("layer_norm", (x, gain, bias), out, vjp)


def batch_norm2d(x, gain, bias, running_mean=None, running_var=None,
                 eps: float = 1e-5):
    """Channelwise normalization of a (C, H, W) map.

    Training mode (running stats None): statistics come from the map itself
    and the backward pass accounts for them; returns (out, mean, var) so the
    caller can maintain running estimates.  Frozen mode: running stats are
    constants.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 3:
        raise ShapeError(f"batch_norm2d: expected (C,H,W), got {x.shape}")
    c = x.data.shape[0]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError(f"batch_norm2d: affine shape {gain.shape}/{bias.shape} vs {c} channels")
    training = running_mean is None
    if training:
        mean = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
    else:
        mean = np.asarray(running_mean, dtype=x.data.dtype)
        var = np.asarray(running_var, dtype=x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (x.data - mean[:, None, None]) * inv[:, None, None]
    out_data = xh * gain.data[:, None, None] + bias.data[:, None, None]

    def vjp(g):
        dxh = g * gain.data[:, None, None]
        if training:
            dx = (dxh - dxh.mean(axis=(1, 2), keepdims=True)
                  - xh * (dxh * xh).mean(axis=(1, 2), keepdims=True)) * inv[:, None, None]
        else:
            dx = dxh * inv[:, None, None]
        dgain = (g * xh).sum(axis=(1, 2))
        dbias = g.sum(axis=(1, 2))
        return dx, dgain, dbias

    out = _emit("batch_norm2d", (x, gain, bias), out_data, vjp)
    if training:
        return out, mean, var
    return out, None, None


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[1] - kh) // stride + 1
    wo = (x.shape[2] - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    buf = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            buf[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if pad:
        return buf[:, pad:hp - pad, pad:wp - pad]
    return buf


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution of a (Cin, H, W) map with (Cout, Cin, kh, kw) weights."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (C,H,W) and (Co,Ci,kh,kw), got {x.shape}, {w.shape}")
    cout, cin, kh, kw = w.data.shape
    if x.data.shape[0] != cin:
        raise ShapeError(f"conv2d: input channels {x.data.shape[0]} != weight channels {cin}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(cout, ho, wo)
    inputs: list[Tensor] = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} vs {cout} channels")
        out = out + b.data[:, None, None]
        inputs.append(b)

    def vjp(g):
        gmat = g.reshape(cout, ho * wo)
        gw = (gmat @ cols.T).reshape(w.data.shape)
        gcols = wmat.T @ gmat
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, pad)
        if b is not None:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw

    return _emit("conv2d", tuple(inputs), out, vjp)


def conv_transpose2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Transposed 2-d convolution; output extent (H-1)*stride + kh."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected (C,H,W) and (Ci,Co,kh,kw), got {x.shape}, {w.shape}")
    cin, cout, kh, kw = w.data.shape
    if x.data.shape[0] != cin:
        raise ShapeError(f"conv_transpose2d: input channels {x.data.shape[0]} != weight channels {cin}")
    _, h, wdt = x.data.shape
    ho = (h - 1) * stride + kh
    wo = (wdt - 1) * stride + kw
    out = np.zeros((cout, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            # y[:, s*r+i, s*c+j] += W[:, :, i, j]^T x[:, r, c]
            out[:, i:i + stride * h:stride, j:j + stride * wdt:stride] += np.einsum(
                "co,chw->ohw", w.data[:, :, i, j], x.data, optimize=True)
    inputs: list[Tensor] = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape} vs {cout} channels")
        out = out + b.data[:, None, None]
        inputs.append(b)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                gsl = g[:, i:i + stride * h:stride, j:j + stride * wdt:stride]
                gx += np.einsum("co,ohw->chw", w.data[:, :, i, j], gsl, optimize=True)
                gw[:, :, i, j] = np.einsum("chw,ohw->co", x.data, gsl, optimize=True)
        if b is not None:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw

    return _emit("conv_transpose2d", tuple(inputs), out, vjp)


# ---------------------------------------------------------------------------
# backward + verification
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf, then reset the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = _state.tape
    try:
        if loss._rec is None:
            return  # constant loss: nothing reachable, no grads written
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(tape.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._rec is None:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi.astype(t.data.dtype, copy=False)
                else:
                    acc = pending.get(id(t))
                    pending[id(t)] = gi if acc is None else acc + gi
    finally:
        tape.records.clear()


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-8).  The
    function must be deterministic; non-finite values anywhere are an error.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    reset_tape()
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = fn(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check: fn must return a scalar, got {out.shape}")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("grad_check: non-finite analytic gradient")

    numeric = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(leaf).item()
            flat[i] = orig - step
            fm = fn(leaf).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
    if not np.all(np.isfinite(numeric)):
        raise NumericError("grad_check: non-finite numeric gradient")

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0


# Ops whose gradients the verification suite is expected to cover.
DIFFERENTIABLE_OPS = (
    "add", "sub", "mul", "div", "scale", "neg", "matmul",
    "reshape", "transpose", "concat", "slice", "take", "index_add",
    "broadcast_rows", "sum", "mean", "mse",
    "softmax", "gelu", "sigmoid", "layer_norm", "batch_norm2d",
    "conv2d", "conv_transpose2d",
)
