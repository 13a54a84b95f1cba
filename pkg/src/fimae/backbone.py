"""Patch embedding, positional encodings, and the joint space-time encoder.

All frames' tokens are concatenated and attended to jointly, so a token can
match against any position in any frame.  Downstream crops reuse the
pretraining positional table by mapping each crop onto the centered subgrid
of its own frame slot ("frame-aware" positions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

POS_MODES = ("naive", "learnable", "frame_aware")


@dataclass
class BackboneConfig:
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    frames: int = 6
    image_h: int = 96
    image_w: int = 96
    patch_size: int = 16
    pos_mode: str = "frame_aware"

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise T.ShapeError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads:
            raise T.ShapeError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.pos_mode not in POS_MODES:
            raise ValueError(f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def token_count(self) -> int:
        return self.frames * self.tokens_per_frame


@dataclass(frozen=True)
class TokenGrid:
    """Bijection between (frame, row, col) and flat token positions."""
    frames: int
    grid_h: int
    grid_w: int

    def flat(self, frame: int, row: int, col: int) -> int:
        if not (0 <= frame < self.frames and 0 <= row < self.grid_h and 0 <= col < self.grid_w):
            raise IndexError(f"token ({frame},{row},{col}) outside grid")
        return (frame * self.grid_h + row) * self.grid_w + col

    def unflat(self, index: int) -> tuple[int, int, int]:
        total = self.frames * self.grid_h * self.grid_w
        if not 0 <= index < total:
            raise IndexError(f"flat token {index} outside [0, {total})")
        frame, rest = divmod(index, self.grid_h * self.grid_w)
        row, col = divmod(rest, self.grid_w)
        return frame, row, col


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping patches, frame-major row-major order."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, channels: int = 1):
        self._cfg = cfg
        self._channels = channels
        self.proj = nn.Linear(channels * cfg.patch_size * cfg.patch_size, cfg.embed_dim, rng)

    def __call__(self, frames: Tensor) -> Tensor:
        cfg = self._cfg
        if frames.ndim != 4 or frames.shape[1] != self._channels:
            raise T.ShapeError(f"patch_embed: expected (n,{self._channels},h,w), got {frames.shape}")
        n, c, h, w = frames.shape
        p = cfg.patch_size
        if h % p or w % p:
            raise T.ShapeError(f"patch_embed: extents {h}x{w} not divisible by patch {p}")
        gh, gw = h // p, w // p
        x = T.reshape(frames, (n, c, gh, p, gw, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))       # (n, gh, gw, c, p, p)
        x = T.reshape(x, (n * gh * gw, c * p * p))
        return self.proj(x)


def patchify(frames: Tensor, patch_size: int) -> Tensor:
    """(n, 1, h, w) -> (n*gh*gw, patch_size^2) pixel patches, token order."""
    n, c, h, w = frames.shape
    p = patch_size
    x = T.reshape(frames, (n, c, h // p, p, w // p, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (n * (h // p) * (w // p), c * p * p))


def unpatchify(patches: Tensor, n: int, h: int, w: int, patch_size: int) -> Tensor:
    p = patch_size
    gh, gw = h // p, w // p
    x = T.reshape(patches, (n, gh, gw, 1, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (n, 1, h, w))


def sincos_positions(token_count: int, dim: int) -> np.ndarray:
    """Fixed 1-d sine-cosine table; sin/cos interleave per frequency."""
    if dim % 2:
        raise T.ShapeError(f"sincos_positions: dim must be even, got {dim}")
    pos = np.arange(token_count, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * (2.0 * np.arange(dim // 2, dtype=np.float64) / dim))
    angles = pos * freqs[None, :]
    table = np.empty((token_count, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(T.DEFAULT_DTYPE)


def frame_aware_positions(template_grid: int, search_grid: int, pretrain_grid: int,
                          n_templates: int) -> np.ndarray:
    """Flat pretraining-token indices for centered template/search subgrids.

    Template k (0-based) occupies frame slot k; the search frame occupies
    slot n_templates.  Each crop maps to the centered subgrid of its slot,
    which requires even grid differences.
    """
    g = pretrain_grid
    for name, sub in (("template", template_grid), ("search", search_grid)):
        if sub > g:
            raise T.ShapeError(f"{name} grid {sub} exceeds pretraining grid {g}")
        if (g - sub) % 2:
            raise T.ShapeError(
                f"{name} grid {sub} cannot be centered in pretraining grid {g} (odd margin)")
    indices: list[int] = []
    for k in range(n_templates):
        off = (g - template_grid) // 2
        base = k * g * g
        for r in range(template_grid):
            for c in range(template_grid):
                indices.append(base + (r + off) * g + (c + off))
    off = (g - search_grid) // 2
    base = n_templates * g * g
    for r in range(search_grid):
        for c in range(search_grid):
            indices.append(base + (r + off) * g + (c + off))
    return np.asarray(indices, dtype=np.int64)


def centered_subgrid_encoding(table: np.ndarray, frame_slot: int, sub_grid: int,
                              pretrain_grid: int) -> np.ndarray:
    """Rows of a per-frame positional table for one centered crop.

    Even margins reduce to exact index gathering; odd margins fall back to
    bilinear interpolation between the two straddling subgrids.
    """
    g = pretrain_grid
    if sub_grid > g:
        raise T.ShapeError(f"crop grid {sub_grid} exceeds pretraining grid {g}")
    frame = table[frame_slot * g * g:(frame_slot + 1) * g * g].reshape(g, g, -1)
    margin = g - sub_grid
    if margin % 2 == 0:
        off = margin // 2
        block = frame[off:off + sub_grid, off:off + sub_grid]
        return block.reshape(sub_grid * sub_grid, -1)
    lo, hi = margin // 2, margin // 2 + 1
    quarters = (frame[lo:lo + sub_grid, lo:lo + sub_grid] + frame[lo:lo + sub_grid, hi:hi + sub_grid]
                + frame[hi:hi + sub_grid, lo:lo + sub_grid] + frame[hi:hi + sub_grid, hi:hi + sub_grid])
    return (0.25 * quarters).reshape(sub_grid * sub_grid, -1)


class Encoder(nn.Module):
    """Stack of pre-norm joint space-time attention blocks with a final norm."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.blocks = [nn.EncoderBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.depth)]
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.call_count = 0  # tracks forward passes; used by the single-pass contract

    def encode(self, tokens: Tensor, positions: Tensor | np.ndarray,
               collect_attn: list | None = None) -> Tensor:
        self.call_count += 1
        if not isinstance(positions, Tensor):
            positions = Tensor(positions)
        x = T.add(tokens, positions)
        for i, block in enumerate(self.blocks):
            x = block(x, collect_attn)
            if not np.all(np.isfinite(x.data)):
                raise T.NumericError(f"encoder: non-finite activations after block {i}")
        return self.norm(x)
