"""Interpolation-masked pretraining: encoder-decoder model, weighted loss, loop.

Only the visible tokens pass through the encoder.  The encoded tokens are
projected to the decoder width, scattered back into the full space-time
layout alongside one shared learnable token at every masked slot, decoded
with full joint attention, and projected to pixel patches.  The loss is a
per-pixel mean squared error split over the tube-masked and frame-masked
index sets, with the frame term weighted by the count ratio of the two sets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import masking
from . import nn
from . import tensor as T
from .backbone import BackboneConfig, Encoder, PatchEmbed, patchify, sincos_positions, unpatchify
from .checkpoint import save_checkpoint
from .optim import AdamW, cosine_warmup_lr
from .synthdata import SequenceSample
from .tensor import Tensor


@dataclass
class FimaeDecoderConfig:
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    projector_dim: int = 256  # patch_size^2 * channels; checked against the backbone

    def validate(self, patch_size: int, channels: int = 1) -> None:
        want = patch_size * patch_size * channels
        if self.projector_dim != want:
            raise T.ShapeError(
                f"projector_dim {self.projector_dim} must equal patch_size^2*channels = {want}")


@dataclass
class PretrainBatch:
    frames: Tensor                 # (n, 1, h, w)
    plan: masking.MaskPlan
    seq_id: str = ""
    start: int = 0
    gap: int = 1


def sample_clip(sequence: SequenceSample, n: int, gaps: tuple[int, ...],
                rng: np.random.Generator) -> tuple[np.ndarray, int, int]:
    """Pick a gap and start uniformly, clamping to the last frame when exhausted.

    The start is drawn from the range where the clip fits; for sequences too
    short to fit at the chosen gap the start is 0 and the final frame repeats.
    Returns (frames (n,1,h,w) float32, start, gap).
    """
    if len(sequence) == 0:
        raise ValueError("sample_clip: empty sequence")
    gap = int(gaps[rng.integers(0, len(gaps))]) if len(gaps) > 1 else int(gaps[0])
    last = len(sequence) - 1
    max_start = max(0, last - (n - 1) * gap)
    start = int(rng.integers(0, max_start + 1))
    idx = np.minimum(start + gap * np.arange(n), last)
    stack = np.stack([sequence.frames[i] for i in idx]).astype(np.float32)
    return stack[:, None, :, :], start, gap


def random_resized_crop(frames: np.ndarray, scale: tuple[float, float],
                        rng: np.random.Generator) -> np.ndarray:
    """Same random crop + bilinear resize applied to every frame of a clip."""
    n, c, h, w = frames.shape
    s = float(rng.uniform(scale[0], scale[1]))
    ch, cw = max(8, int(round(h * s))), max(8, int(round(w * s)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = frames[:, :, top:top + ch, left:left + cw]
    if (ch, cw) == (h, w):
        return crop
    vs = np.linspace(0, ch - 1, h)
    us = np.linspace(0, cw - 1, w)
    v0 = np.floor(vs).astype(int)
    u0 = np.floor(us).astype(int)
    v1 = np.minimum(v0 + 1, ch - 1)
    u1 = np.minimum(u0 + 1, cw - 1)
    fv = (vs - v0)[None, None, :, None]
    fu = (us - u0)[None, None, None, :]
    tl = crop[:, :, v0][:, :, :, u0]
    tr = crop[:, :, v0][:, :, :, u1]
    bl = crop[:, :, v1][:, :, :, u0]
    br = crop[:, :, v1][:, :, :, u1]
    out = (tl * (1 - fv) * (1 - fu) + tr * (1 - fv) * fu
           + bl * fv * (1 - fu) + br * fv * fu)
    return out.astype(np.float32)


class FimaeModel(nn.Module):
    """Masked space-time autoencoder over grayscale frame stacks."""

    def __init__(self, cfg: BackboneConfig, dec: FimaeDecoderConfig, seed: int = 0):
        dec.validate(cfg.patch_size)
        self._cfg = cfg
        self._dec = dec
        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbed(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.to_decoder = nn.Linear(cfg.embed_dim, dec.decoder_dim, rng)
        self.mask_token = self.param(rng.normal(0.0, 0.02, size=dec.decoder_dim))
        self.decoder_blocks = [
            nn.EncoderBlock(dec.decoder_dim, dec.decoder_heads, 4.0, rng)
            for _ in range(dec.decoder_depth)
        ]
        self.decoder_norm = nn.LayerNorm(dec.decoder_dim)
        self.projector = nn.Linear(dec.decoder_dim, dec.projector_dim, rng)
        self._enc_pos = sincos_positions(cfg.token_count, cfg.embed_dim)
        self._dec_pos = sincos_positions(cfg.token_count, dec.decoder_dim)

    @property
    def config(self) -> BackboneConfig:
        return self._cfg

    def forward(self, batch: PretrainBatch) -> Tensor:
        cfg = self._cfg
        plan = batch.plan
        if plan.n_frames != cfg.frames or plan.tokens_per_frame != cfg.tokens_per_frame:
            raise T.ShapeError(
                f"plan layout {plan.n_frames}x{plan.tokens_per_frame} does not match "
                f"backbone {cfg.frames}x{cfg.tokens_per_frame}")
        tokens = self.patch_embed(batch.frames)
        visible, gather = masking.apply_mask(tokens, plan)
        vis_pos = self._enc_pos[gather.visible_flat]
        encoded = self.encoder.encode(visible, vis_pos)
        z = self.to_decoder(encoded)
        full = masking.scatter_tokens(z, self.mask_token, gather)
        x = T.add(full, Tensor(self._dec_pos))
        for block in self.decoder_blocks:
            x = block(x)
        x = self.decoder_norm(x)
        patches = self.projector(x)
        return unpatchify(patches, cfg.frames, cfg.image_h, cfg.image_w, cfg.patch_size)


def fimae_loss(recon: Tensor, frames: Tensor, plan: masking.MaskPlan,
               patch_size: int = 16) -> tuple[Tensor, dict[str, float]]:
    """Per-pixel MSE over the masked sets: tube term plus weighted frame term.

    Visible tokens contribute nothing.  An empty frame-masked set drops the
    frame term and reports a zero weight; empty tube behaves symmetrically.
    """
    if recon.shape != frames.shape:
        raise T.ShapeError(f"loss: reconstruction {recon.shape} vs frames {frames.shape}")
    recon_p = patchify(recon, patch_size)
    frames_p = patchify(frames, patch_size)

    def term(flat_idx: np.ndarray) -> Tensor | None:
        if flat_idx.size == 0:
            return None
        return T.mse(T.take(recon_p, flat_idx), T.take(frames_p, flat_idx))

    tube = term(plan.masked_flat(masking.TUBE))
    frame = term(plan.masked_flat(masking.FRAME))
    g = masking.gamma(plan) if plan.omega_frame_size > 0 else 0.0

    loss = tube if tube is not None else Tensor(np.zeros((), dtype=recon.dtype))
    if frame is not None and g != 0.0:
        loss = T.add(loss, T.scale(frame, g))
    parts = {
        "l_tube": float(tube.data) if tube is not None else 0.0,
        "l_frame": float(frame.data) if frame is not None else 0.0,
        "gamma": g,
    }
    return loss, parts


def masked_frame_mse(model: FimaeModel, batch: PretrainBatch) -> float:
    """Reconstruction MSE restricted to frame-masked patches (evaluation helper)."""
    with T.no_grad():
        recon = model.forward(batch)
        p = model.config.patch_size
        idx = batch.plan.masked_flat(masking.FRAME)
        rp = patchify(recon, p).data[idx]
        fp = patchify(batch.frames, p).data[idx]
    return float(np.mean((rp.astype(np.float64) - fp.astype(np.float64)) ** 2))


@dataclass
class PretrainSettings:
    steps: int = 500
    batch_size: int = 2
    base_lr: float = 1.5e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_frac: float = 0.075            # warmup share of the schedule
    gaps: tuple[int, ...] = (1, 2, 3, 4)
    tube_ratio: float = 0.75
    frame_ratio: float = 0.98
    aug_crop: bool = False
    crop_scale: tuple[float, float] = (0.8, 1.0)
    log_every: int = 1


def pretrain(dataset: list[SequenceSample], cfg: BackboneConfig, dec: FimaeDecoderConfig,
             settings: PretrainSettings, seed: int, out_ckpt: str,
             log_path: str | None = None,
             extra_state: dict[str, np.ndarray] | None = None) -> FimaeModel:
    """Train from scratch; saves weights to `out_ckpt` and a step,loss CSV log."""
    if not dataset:
        raise ValueError("pretrain: empty dataset")
    if cfg.frames % 2:
        raise ValueError(f"pretrain: frame count must be even, got {cfg.frames}")
    extra_state = extra_state or {}
    model = FimaeModel(cfg, dec, seed=seed)
    model.set_training(True)
    opt = AdamW(model.parameters(), lr=settings.base_lr, betas=settings.betas,
                weight_decay=settings.weight_decay)
    rng = np.random.default_rng(seed + 1)
    warmup = int(round(settings.warmup_frac * settings.steps))
    log_rows = ["step,loss,l_tube,l_frame,gamma"]
    last_good: dict[str, np.ndarray] | None = None

    for step in range(settings.steps):
        opt.zero_grad()
        tot = {"loss": 0.0, "l_tube": 0.0, "l_frame": 0.0, "gamma": 0.0}
        for _ in range(settings.batch_size):
            seq = dataset[int(rng.integers(0, len(dataset)))]
            frames, start, gap = sample_clip(seq, cfg.frames, settings.gaps, rng)
            if settings.aug_crop:
                frames = random_resized_crop(frames, settings.crop_scale, rng)
            plan = masking.build_fimae_plan(
                cfg.frames, cfg.tokens_per_frame, settings.tube_ratio,
                settings.frame_ratio, seed=int(rng.integers(0, 2**31)))
            batch = PretrainBatch(Tensor(frames), plan, seq.seq_id, start, gap)
            recon = model.forward(batch)
            loss, parts = fimae_loss(recon, batch.frames, plan, cfg.patch_size)
            loss = T.scale(loss, 1.0 / settings.batch_size)
            T.backward(loss)
            tot["loss"] += float(loss.data)
            for k in ("l_tube", "l_frame", "gamma"):
                tot[k] += parts[k] / settings.batch_size
        if not np.isfinite(tot["loss"]):
            if last_good is not None:
                save_checkpoint(out_ckpt, {**last_good, **extra_state})
            raise T.NumericError(f"pretrain: non-finite loss at step {step}")
        opt.step(lr=cosine_warmup_lr(step, settings.base_lr, warmup, settings.steps))
        last_good = {k: v.copy() for k, v in model.state_dict().items()}
        if step % settings.log_every == 0:
            log_rows.append(f"{step},{tot['loss']!r},{tot['l_tube']!r},"
                            f"{tot['l_frame']!r},{tot['gamma']!r}")

    save_checkpoint(out_ckpt, {**model.state_dict(), **extra_state})
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        tmp = log_path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write("\n".join(log_rows) + "\n")
        os.replace(tmp, log_path)
    return model
