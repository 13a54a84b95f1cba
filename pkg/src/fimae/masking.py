"""Tube-frame masking plans for interpolation-style masked pretraining.

Frames alternate roles starting with a tube frame: tube frames share one
randomly drawn index set (masking the same spatial patches in every tube
frame), while each intermediate "frame-masked" frame independently masks a
much higher fraction of its tokens so that reconstructing it forces
temporal interpolation from the neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TUBE = "tube"
FRAME = "frame"


class MaskingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    n_frames: int
    tokens_per_frame: int
    tube_ratio: float
    frame_ratio: float
    roles: tuple[str, ...]
    # per frame, sorted masked / visible token indices in [0, tokens_per_frame)
    masked: tuple[tuple[int, ...], ...]
    visible: tuple[tuple[int, ...], ...]

    @property
    def tube_masked(self) -> tuple[int, ...]:
        """Index set shared by every tube frame."""
        for role, m in zip(self.roles, self.masked):
            if role == TUBE:
                return m
        return ()

    def frames_with_role(self, role: str) -> list[int]:
        return [t for t, r in enumerate(self.roles) if r == role]

    @property
    def omega_tube_size(self) -> int:
        return sum(len(self.masked[t]) for t in self.frames_with_role(TUBE))

    @property
    def omega_frame_size(self) -> int:
        return sum(len(self.masked[t]) for t in self.frames_with_role(FRAME))

    @property
    def visible_count(self) -> int:
        return sum(len(v) for v in self.visible)

    def masked_flat(self, role: str | None = None) -> np.ndarray:
        """Masked token positions as flat indices into the (n_frames * S) layout."""
        s = self.tokens_per_frame
        out = []
        for t in range(self.n_frames):
            if role is not None and self.roles[t] != role:
                continue
            out.extend(t * s + i for i in self.masked[t])
        return np.asarray(out, dtype=np.int64)

    def visible_flat(self) -> np.ndarray:
        s = self.tokens_per_frame
        out = []
        for t in range(self.n_frames):
            out.extend(t * s + i for i in self.visible[t])
        return np.asarray(out, dtype=np.int64)


def _tube_mask_count(ratio: float, tokens: int) -> int:
    return int(round(ratio * tokens))


def _frame_visible_count(ratio: float, tokens: int) -> int:
    # Keep at least one visible token unless the ratio is exactly 1: a fully
    # blind frame starves some patch positions of training signal.
    if ratio >= 1.0:
        return 0
    return max(1, int(round((1.0 - ratio) * tokens)))


def build_fimae_plan(n_frames: int, tokens_per_frame: int, tube_ratio: float,
                     frame_ratio: float, seed: int) -> MaskPlan:
    """Draw a deterministic tube-frame plan; frame index 0 is a tube frame."""
    if n_frames < 2:
        raise MaskingError(f"need at least 2 frames to interpolate, got {n_frames}")
    if tokens_per_frame < 1:
        raise MaskingError(f"tokens_per_frame must be positive, got {tokens_per_frame}")
    for name, r in (("tube_ratio", tube_ratio), ("frame_ratio", frame_ratio)):
        if not 0.0 <= r <= 1.0:
            raise MaskingError(f"{name} must lie in [0, 1], got {r}")

    rng = np.random.default_rng(seed)
    s = tokens_per_frame
    n_tube_masked = _tube_mask_count(tube_ratio, s)
    tube_set = np.sort(rng.permutation(s)[:n_tube_masked])

    roles, masked, visible = [], [], []
    all_tokens = np.arange(s)
    for t in range(n_frames):
        if t % 2 == 0:
            roles.append(TUBE)
            m = tube_set
        else:
            roles.append(FRAME)
            n_vis = _frame_visible_count(frame_ratio, s)
            m = np.sort(rng.permutation(s)[:s - n_vis])
        keep = np.setdiff1d(all_tokens, m, assume_unique=True)
        masked.append(tuple(int(i) for i in m))
        visible.append(tuple(int(i) for i in keep))

    return MaskPlan(
        n_frames=n_frames,
        tokens_per_frame=s,
        tube_ratio=float(tube_ratio),
        frame_ratio=float(frame_ratio),
        roles=tuple(roles),
        masked=tuple(masked),
        visible=tuple(visible),
    )


@dataclass(frozen=True)
class GatherIndex:
    """Where the visible tokens came from, enough to re-scatter them."""
    visible_flat: np.ndarray
    masked_flat: np.ndarray
    total: int


def apply_mask(tokens: Tensor, plan: MaskPlan) -> tuple[Tensor, GatherIndex]:
    """Select visible token rows, concatenated in frame order.

    `tokens` is the flat (n_frames * S, D) token tensor.
    """
    expected = plan.n_frames * plan.tokens_per_frame
    if tokens.ndim != 2 or tokens.shape[0] != expected:
        raise T.ShapeError(
            f"apply_mask: token tensor {tokens.shape} does not match plan layout ({expected}, D)")
    gather = GatherIndex(
        visible_flat=plan.visible_flat(),
        masked_flat=plan.masked_flat(),
        total=expected,
    )
    return T.take(tokens, gather.visible_flat), gather


def scatter_tokens(visible: Tensor, fill_token: Tensor, gather: GatherIndex) -> Tensor:
    """Invert apply_mask: rebuild the full layout with `fill_token` at masked rows."""
    if visible.shape[0] != gather.visible_flat.shape[0]:
        raise T.ShapeError(
            f"scatter_tokens: {visible.shape[0]} rows vs {gather.visible_flat.shape[0]} visible slots")
    d = visible.shape[1]
    base = Tensor(np.zeros((gather.total, d), dtype=visible.dtype))
    full = T.index_add(base, gather.visible_flat, visible)
    n_masked = gather.masked_flat.shape[0]
    if n_masked:
        fills = T.broadcast_rows(fill_token, n_masked)
        full = T.index_add(full, gather.masked_flat, fills)
    return full


def gamma(plan: MaskPlan) -> float:
    """Loss weight for the frame term: tube-masked count over frame-masked count."""
    n_frame = plan.omega_frame_size
    if n_frame == 0:
        raise MaskingError(
            "no frame-masked tokens in plan; drop the frame loss term instead of weighting it")
    return plan.omega_tube_size / n_frame


# -- text serialization (test fixtures, debugging) ---------------------------


def plan_to_text(plan: MaskPlan) -> str:
    lines = [
        f"frames={plan.n_frames} tokens={plan.tokens_per_frame} "
        f"tube_ratio={plan.tube_ratio!r} frame_ratio={plan.frame_ratio!r}"
    ]
    for t in range(plan.n_frames):
        idx = " ".join(str(i) for i in plan.masked[t])
        lines.append(f"{t} {plan.roles[t]} {idx}".rstrip())
    return "\n".join(lines) + "\n"


def plan_from_text(text: str) -> MaskPlan:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = dict(part.split("=") for part in lines[0].split())
    n_frames = int(header["frames"])
    s = int(header["tokens"])
    if len(lines) != n_frames + 1:
        raise MaskingError(f"plan text: expected {n_frames} frame lines, got {len(lines) - 1}")
    roles, masked, visible = [], [], []
    all_tokens = np.arange(s)
    for ln in lines[1:]:
        fields = ln.split()
        t, role = int(fields[0]), fields[1]
        if role not in (TUBE, FRAME):
            raise MaskingError(f"plan text: unknown role {role!r} on frame {t}")
        m = np.asarray(sorted(int(i) for i in fields[2:]), dtype=np.int64)
        if m.size and (m.min() < 0 or m.max() >= s):
            raise MaskingError(f"plan text: index out of range on frame {t}")
        roles.append(role)
        masked.append(tuple(int(i) for i in m))
        visible.append(tuple(int(i) for i in np.setdiff1d(all_tokens, m)))
    return MaskPlan(
        n_frames=n_frames,
        tokens_per_frame=s,
        tube_ratio=float(header["tube_ratio"]),
        frame_ratio=float(header["frame_ratio"]),
        roles=tuple(roles),
        masked=tuple(masked),
        visible=tuple(visible),
    )
