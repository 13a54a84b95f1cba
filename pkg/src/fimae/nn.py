"""Layers composed from tensor primitives.

Modules hold their parameters as ``Tensor`` attributes and plain-numpy
buffers (running statistics) in ``_buffers``; both are discovered by
attribute walk in construction order, which keeps state-dict names and
optimizer ordering deterministic.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training: bool = True

    def param(self, data: np.ndarray) -> Tensor:
        return Tensor(np.asarray(data, dtype=T.DEFAULT_DTYPE), requires_grad=True)

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        buffers = getattr(self, "_buffers", None)
        if buffers:
            for name, value in buffers.items():
                yield f"{prefix}{name}", value
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into parameters/buffers by name; returns names not found in `state`."""
        missing = []
        for name, p in self.named_parameters():
            if name in state:
                src = state[name]
                if tuple(src.shape) != p.shape:
                    raise T.ShapeError(f"load_state_dict: {name} has shape {src.shape}, expected {p.shape}")
                p.data = np.asarray(src, dtype=p.data.dtype).copy()
            else:
                missing.append(name)
        buffers = dict(self.named_buffers())
        for name, b in buffers.items():
            if name in state:
                src = state[name]
                if tuple(src.shape) != b.shape:
                    raise T.ShapeError(f"load_state_dict: {name} has shape {src.shape}, expected {b.shape}")
                b[...] = src
            else:
                missing.append(name)
        if strict and missing:
            raise KeyError(f"load_state_dict: missing entries for {missing}")
        return missing

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for _, value in self._children():
            if isinstance(value, Module):
                value.set_training(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.set_training(flag)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float = 0.02):
        self.weight = self.param(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = self.param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = self.param(np.ones(dim))
        self.bias = self.param(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(T, D) -> (heads, T, D/heads)."""
    t, d = x.shape
    x = T.reshape(x, (t, heads, d // heads))
    return T.transpose(x, (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """(heads, T, dh) -> (T, heads*dh)."""
    h, t, dh = x.shape
    x = T.transpose(x, (1, 0, 2))
    return T.reshape(x, (t, h * dh))


class SelfAttention(Module):
    """Multi-head self-attention over one token sequence (T, D)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise T.ShapeError(f"attention: dim {dim} not divisible by {heads} heads")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads
        self._scale = 1.0 / np.sqrt(dim // heads)

    def __call__(self, x: Tensor, collect_attn: list | None = None) -> Tensor:
        t, d = x.shape
        qkv = self.qkv(x)  # (T, 3D)
        qkv = T.reshape(qkv, (t, 3, d))
        q = T.reshape(T.slice_axis(qkv, 1, 0, 1), (t, d))
        k = T.reshape(T.slice_axis(qkv, 1, 1, 2), (t, d))
        v = T.reshape(T.slice_axis(qkv, 1, 2, 3), (t, d))
        q, k, v = (split_heads(z, self._heads) for z in (q, k, v))
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), self._scale)
        attn = T.softmax(logits, axis=-1)
        if collect_attn is not None:
            collect_attn.append(attn.data.copy())
        out = merge_heads(T.matmul(attn, v))
        return self.proj(out)


class CrossAttention(Module):
    """Queries (Tq, D) attend to a memory sequence (Tm, D)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise T.ShapeError(f"attention: dim {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads
        self._scale = 1.0 / np.sqrt(dim // heads)

    def __call__(self, queries: Tensor, memory: Tensor,
                 collect_attn: list | None = None) -> Tensor:
        tq, d = queries.shape
        tm = memory.shape[0]
        q = split_heads(self.q(queries), self._heads)
        kv = T.reshape(self.kv(memory), (tm, 2, d))
        k = split_heads(T.reshape(T.slice_axis(kv, 1, 0, 1), (tm, d)), self._heads)
        v = split_heads(T.reshape(T.slice_axis(kv, 1, 1, 2), (tm, d)), self._heads)
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), self._scale)
        attn = T.softmax(logits, axis=-1)
        if collect_attn is not None:
            collect_attn.append(attn.data.copy())
        out = merge_heads(T.matmul(attn, v))
        return self.proj(out)


class EncoderBlock(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x: Tensor, collect_attn: list | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), collect_attn))
        return T.add(x, self.mlp(self.ln2(x)))


class DecoderBlock(Module):
    """Query self-attention, cross-attention over memory, then MLP (pre-norm)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.ln_q = LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads, rng)
        self.ln_x = LayerNorm(dim)
        self.ln_mem = LayerNorm(dim)
        self.cross = CrossAttention(dim, heads, rng)
        self.ln_mlp = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def __call__(self, queries: Tensor, memory: Tensor,
                 collect_attn: list | None = None) -> Tensor:
        q = T.add(queries, self.self_attn(self.ln_q(queries)))
        q = T.add(q, self.cross(self.ln_x(q), self.ln_mem(memory), collect_attn))
        return T.add(q, self.mlp(self.ln_mlp(q)))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, bias: bool = True):
        fan_in = c_in * k * k
        self.weight = self.param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)))
        self.bias = self.param(np.zeros(c_out)) if bias else None
        self._stride = stride
        self._pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        fan_in = c_in * k * k
        self.weight = self.param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_in, c_out, k, k)))
        self.bias = self.param(np.zeros(c_out)) if bias else None
        self._stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self._stride)


class BatchNorm2d(Module):
    """Channelwise batch norm; batch statistics while training, frozen running stats in eval."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gain = self.param(np.ones(channels))
        self.bias = self.param(np.zeros(channels))
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=T.DEFAULT_DTYPE),
            "running_var": np.ones(channels, dtype=T.DEFAULT_DTYPE),
        }
        self._momentum = momentum
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            out, mean, var = T.batch_norm2d(x, self.gain, self.bias, eps=self._eps)
            m = self._momentum
            self._buffers["running_mean"][...] = (
                m * self._buffers["running_mean"] + (1.0 - m) * mean)
            self._buffers["running_var"][...] = (
                m * self._buffers["running_var"] + (1.0 - m) * var)
            return out
        out, _, _ = T.batch_norm2d(
            x, self.gain, self.bias,
            running_mean=self._buffers["running_mean"],
            running_var=self._buffers["running_var"],
            eps=self._eps)
        return out
