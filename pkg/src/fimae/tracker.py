"""Single-point device tracking on top of the pretrained space-time encoder.

Three small template crops (one fixed at the initial annotation, two
refreshed from recent predictions) and one larger search crop are embedded
as four distinct frames and encoded jointly in a single forward pass, so
feature extraction and template matching happen inside the same attention
stack.  A two-query decoder reads out the features; each query is dot-
correlated against the search tokens, unflattened to the search grid, and
upsampled by a four-stage convolutional head into a heatmap (tip) and a
mask (device body).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .backbone import (BackboneConfig, Encoder, PatchEmbed, centered_subgrid_encoding,
                       frame_aware_positions, sincos_positions)
from .checkpoint import save_checkpoint
from .optim import AdamW, cosine_warmup_lr
from .synthdata import SequenceSample
from .tensor import Tensor

DICE_EPS = 1e-6


@dataclass
class DecoderConfig:
    model_dim: int = 32
    depth: int = 2
    heads: int = 4
    n_queries: int = 2          # heatmap query + mask query, exactly
    head_channels: tuple[int, int, int, int] = (16, 16, 8, 4)

    def __post_init__(self):
        if self.n_queries != 2:
            raise ValueError(f"decoder uses exactly two query tokens, got {self.n_queries}")
        if len(self.head_channels) != 4:
            raise ValueError("head_channels must list four upsampling stages")


@dataclass
class TrackState:
    template_fixed: np.ndarray              # crop around the initial tip, never replaced
    template_dyn: tuple[np.ndarray, np.ndarray]   # (older, newest) prediction crops
    last_tip: tuple[float, float]           # (u, v) global pixel coordinates
    spacing: float
    template_size: int
    search_size: int
    clamp_warnings: int = 0


@dataclass
class HeadOutput:
    heatmap: Tensor     # (1, S, S) in [0, 1]
    mask: Tensor        # (1, S, S) in [0, 1]
    corr: np.ndarray | None = None       # (2, g_s*g_s) pre-unflatten correlation
    features: np.ndarray | None = None   # encoded tokens, for inspection


@dataclass
class GroundTruth:
    heatmap: np.ndarray                  # (1, S, S), peak 1 at the tip pixel
    mask: np.ndarray | None = None       # (1, S, S) binary, when annotated


def crop(image: np.ndarray, center: tuple[float, float], size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Axis-aligned crop centered at (u, v); outside pixels are zero.

    Returns the crop and its (u0, v0) offset so global = offset + local.
    """
    if size % 2:
        raise ValueError(f"crop size must be even, got {size}")
    h, w = image.shape
    u, v = center
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        raise ValueError(f"crop center {center} outside {w}x{h} image")
    u0 = int(round(u)) - size // 2
    v0 = int(round(v)) - size // 2
    out = np.zeros((size, size), dtype=image.dtype)
    src_u0, src_v0 = max(0, u0), max(0, v0)
    src_u1, src_v1 = min(w, u0 + size), min(h, v0 + size)
    if src_u1 > src_u0 and src_v1 > src_v0:
        out[src_v0 - v0:src_v1 - v0, src_u0 - u0:src_u1 - u0] = image[src_v0:src_v1, src_u0:src_u1]
    return out, (u0, v0)


def gaussian_heatmap(size: int, tip_local: tuple[float, float], sigma: float) -> np.ndarray:
    """Gaussian bump around the tip, rescaled so the peak pixel is exactly 1."""
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (uu - tip_local[0]) ** 2 + (vv - tip_local[1]) ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    peak = g.max()
    if peak > 0:
        g = g / peak
    return g[None].astype(np.float32)


class UpsampleHead(nn.Module):
    """Four stages of (upconv x2, conv 3x3, batchnorm, gelu), then 1x1 projection."""

    def __init__(self, channels: tuple[int, int, int, int], rng: np.random.Generator):
        self.stages = []
        c_prev = 1
        for c in channels:
            self.stages.append(nn.ConvTranspose2d(c_prev, c, 2, rng, stride=2))
            self.stages.append(nn.Conv2d(c, c, 3, rng, stride=1, pad=1))
            self.stages.append(nn.BatchNorm2d(c))
            c_prev = c
        self.out_proj = nn.Conv2d(c_prev, 1, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(0, len(self.stages), 3):
            x = self.stages[i](x)
            x = self.stages[i + 1](x)
            x = T.gelu(self.stages[i + 2](x))
        return T.sigmoid(self.out_proj(x))


class TrackerModel(nn.Module):
    """Joint feature-extraction/matching encoder plus a two-query multi-task decoder."""

    def __init__(self, cfg: BackboneConfig, dec: DecoderConfig,
                 template_size: int = 32, search_size: int = 96,
                 n_templates: int = 3, seed: int = 0):
        p = cfg.patch_size
        if template_size % p or search_size % p:
            raise T.ShapeError("template/search sizes must be multiples of the patch size")
        if cfg.frames < n_templates + 1:
            raise T.ShapeError(
                f"pretraining used {cfg.frames} frame slots; need {n_templates + 1}")
        self._cfg = cfg
        self._dec = dec
        self.template_size = template_size
        self.search_size = search_size
        self.n_templates = n_templates
        self._g_t = template_size // p
        self._g_s = search_size // p
        self.n_tokens = n_templates * self._g_t ** 2 + self._g_s ** 2

        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbed(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.proj = nn.Linear(cfg.embed_dim, dec.model_dim, rng)
        self.queries = self.param(rng.normal(0.0, 0.02, size=(dec.n_queries, dec.model_dim)))
        self.decoder_blocks = [nn.DecoderBlock(dec.model_dim, dec.heads, 4.0, rng)
                               for _ in range(dec.depth)]
        self.query_norm = nn.LayerNorm(dec.model_dim)
        self.head_heat = UpsampleHead(dec.head_channels, rng)
        self.head_mask = UpsampleHead(dec.head_channels, rng)

        self.pos_learnable = None
        if cfg.pos_mode == "learnable":
            # initialized from noise; the temporal layout must be learned
            self.pos_learnable = self.param(rng.normal(0.0, 0.02, size=(self.n_tokens, cfg.embed_dim)))
        self._pos_fixed = self._build_fixed_positions()

    @property
    def config(self) -> BackboneConfig:
        return self._cfg

    def _build_fixed_positions(self) -> np.ndarray:
        cfg = self._cfg
        if cfg.pos_mode == "naive":
            return sincos_positions(self.n_tokens, cfg.embed_dim)
        if cfg.pos_mode == "learnable":
            return np.zeros((self.n_tokens, cfg.embed_dim), dtype=T.DEFAULT_DTYPE)
        table = sincos_positions(cfg.token_count, cfg.embed_dim)
        g = cfg.grid_h
        if cfg.grid_h == cfg.grid_w and (g - self._g_t) % 2 == 0 and (g - self._g_s) % 2 == 0:
            idx = frame_aware_positions(self._g_t, self._g_s, g, self.n_templates)
            return table[idx]
        parts = [centered_subgrid_encoding(table, k, self._g_t, g)
                 for k in range(self.n_templates)]
        parts.append(centered_subgrid_encoding(table, self.n_templates, self._g_s, g))
        return np.concatenate(parts, axis=0)

    def positions(self) -> Tensor:
        if self.pos_learnable is not None:
            return self.pos_learnable
        return Tensor(self._pos_fixed)

    def forward(self, templates: Tensor, search: Tensor,
                return_extras: bool = False,
                search_token_perm: np.ndarray | None = None) -> HeadOutput:
        """One encoder pass over Concat(templates, search), then decode.

        `search_token_perm` reorders the search tokens and their positions
        before encoding; it exists to verify permutation equivariance.
        """
        if templates.shape[0] != self.n_templates:
            raise T.ShapeError(f"expected {self.n_templates} templates, got {templates.shape[0]}")
        te_tokens = self.patch_embed(templates)
        se_tokens = self.patch_embed(search)
        n_te = te_tokens.shape[0]
        pos = self.positions()
        if search_token_perm is not None:
            se_tokens = T.take(se_tokens, search_token_perm)
            perm_full = np.concatenate([np.arange(n_te), n_te + search_token_perm])
            pos = T.take(pos, perm_full)
        tokens = T.concat([te_tokens, se_tokens], axis=0)

        f_c = self.encoder.encode(tokens, pos)
        f_c = self.proj(f_c)

        q = self.queries
        for block in self.decoder_blocks:
            q = block(q, f_c)
        q = self.query_norm(q)

        f_se = T.slice_axis(f_c, 0, n_te, self.n_tokens)
        corr = T.matmul(q, T.transpose(f_se, (1, 0)))          # (2, g_s^2)
        corr_map = T.reshape(corr, (self._dec.n_queries, self._g_s, self._g_s))
        heat = self.head_heat(T.slice_axis(corr_map, 0, 0, 1))
        mask = self.head_mask(T.slice_axis(corr_map, 0, 1, 2))
        out = HeadOutput(heatmap=heat, mask=mask)
        if return_extras:
            out.corr = corr.data.copy()
            out.features = f_c.data.copy()
        return out


def track_forward(state: TrackState, search_crop: np.ndarray, model: TrackerModel,
                  return_extras: bool = False) -> HeadOutput:
    """Run the model on the current state's templates plus one search crop."""
    templates = np.stack([state.template_fixed, state.template_dyn[0], state.template_dyn[1]])
    return model.forward(Tensor(templates[:, None, :, :]),
                         Tensor(search_crop[None, None, :, :]),
                         return_extras=return_extras)


def dice_losses(pred: HeadOutput, gt: GroundTruth, lam: float = 1.0) -> Tensor:
    """(1 - dice(heatmap)) plus lam * (1 - dice(mask)) when a mask label exists."""

    def dice_term(p: Tensor, g: np.ndarray) -> Tensor:
        if p.shape != g.shape:
            raise T.ShapeError(f"dice: prediction {p.shape} vs target {g.shape}")
        gt_t = Tensor(g.astype(p.data.dtype))
        num = T.scale(T.tsum(T.mul(p, gt_t)), 2.0)
        den = T.add(T.add(T.tsum(T.mul(p, p)), T.tsum(T.mul(gt_t, gt_t))),
                    Tensor(np.asarray(DICE_EPS, dtype=p.data.dtype)))
        return T.sub(Tensor(np.asarray(1.0, dtype=p.data.dtype)), T.div(num, den))

    loss = dice_term(pred.heatmap, gt.heatmap)
    if gt.mask is not None:
        loss = T.add(loss, T.scale(dice_term(pred.mask, gt.mask), lam))
    return loss


def extract_tip(heatmap: np.ndarray, crop_offset: tuple[int, int]) -> tuple[int, int]:
    """Global (u, v) of the maximum pixel; ties break to lowest row, then column."""
    h = np.asarray(heatmap)
    if not np.all(np.isfinite(h)):
        raise T.NumericError("extract_tip: non-finite heatmap")
    if h.ndim == 3:
        h = h[0]
    flat = int(np.argmax(h))
    row, col = divmod(flat, h.shape[1])
    return crop_offset[0] + col, crop_offset[1] + row


def init_state(image: np.ndarray, tip: tuple[float, float], spacing: float,
               template_size: int, search_size: int) -> TrackState:
    fixed, _ = crop(image, tip, template_size)
    return TrackState(template_fixed=fixed, template_dyn=(fixed.copy(), fixed.copy()),
                      last_tip=tip, spacing=spacing,
                      template_size=template_size, search_size=search_size)


def update_state(state: TrackState, predicted_tip: tuple[float, float],
                 image: np.ndarray, update_first: bool = False) -> TrackState:
    """Shift the dynamic templates; the fixed template stays untouched.

    Out-of-bounds predictions are clamped into the image and counted.
    """
    h, w = image.shape
    u = min(max(predicted_tip[0], 0.0), w - 1.0)
    v = min(max(predicted_tip[1], 0.0), h - 1.0)
    warnings = state.clamp_warnings + ((u, v) != tuple(map(float, predicted_tip)))
    newest, _ = crop(image, (u, v), state.template_size)
    fixed = newest.copy() if update_first else state.template_fixed
    return replace(state, template_fixed=fixed,
                   template_dyn=(state.template_dyn[1], newest),
                   last_tip=(u, v), clamp_warnings=warnings)


def track_sequence(sequence: SequenceSample, y1: tuple[float, float], model: TrackerModel,
                   update_first: bool = False) -> list[tuple[float, float]]:
    """Track from a known first-frame tip; frame 1 returns the given annotation."""
    was_training = model.training
    model.set_training(False)
    try:
        state = init_state(sequence.frames[0], y1, sequence.spacing,
                           model.template_size, model.search_size)
        tips: list[tuple[float, float]] = [tuple(map(float, y1))]
        with T.no_grad():
            for t in range(1, len(sequence)):
                search, offset = crop(sequence.frames[t], state.last_tip, model.search_size)
                out = track_forward(state, search, model)
                tip = extract_tip(out.heatmap.data, offset)
                state = update_state(state, tip, sequence.frames[t], update_first=update_first)
                tips.append(state.last_tip)
        return tips
    finally:
        model.set_training(was_training)


# -- training -----------------------------------------------------------------


@dataclass
class FinetuneSettings:
    steps: int = 600
    batch_size: int = 4
    base_lr: float = 6e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_frac: float = 0.1
    lambda_mask: float = 1.0
    heatmap_sigma_mm: float = 5.0
    jitter_px: int = 5
    flip_aug: bool = False
    log_every: int = 1


@dataclass
class _TrainCrops:
    templates: np.ndarray    # (3, ts, ts)
    search: np.ndarray       # (ss, ss)
    gt: GroundTruth


def _build_train_sample(seq: SequenceSample, t: int, model: TrackerModel,
                        settings: FinetuneSettings, rng: np.random.Generator,
                        counters: dict[str, int]) -> _TrainCrops:
    ann = [i for i, tip in enumerate(seq.tips) if tip is not None]
    first = ann[0]
    priors = [i for i in ann if i < t]
    if not priors:
        counters["no_prior"] += 1
        t2 = t3 = t
    elif len(priors) == 1:
        counters["single_prior"] += 1
        t2 = t3 = priors[-1]
    else:
        t2, t3 = priors[-2], priors[-1]

    ts_, ss = model.template_size, model.search_size
    te = [crop(seq.frames[i], seq.tips[i], ts_)[0] for i in (first, t2, t3)]

    center = np.asarray(seq.tips[t3] if priors else seq.tips[t], dtype=np.float64)
    if settings.jitter_px:
        center = center + rng.uniform(-settings.jitter_px, settings.jitter_px, size=2)
    h, w = seq.frames[t].shape
    center = (min(max(center[0], 0.0), w - 1.0), min(max(center[1], 0.0), h - 1.0))
    search, (u0, v0) = crop(seq.frames[t], center, ss)

    tip = seq.tips[t]
    tip_local = (tip[0] - u0, tip[1] - v0)
    sigma_px = settings.heatmap_sigma_mm / seq.spacing
    heat = gaussian_heatmap(ss, tip_local, sigma_px)
    mask = None
    if seq.body_masks[t] is not None:
        mask = crop(seq.body_masks[t].astype(np.float32), center, ss)[0][None]

    if settings.flip_aug:
        if rng.integers(0, 2):
            te = [np.ascontiguousarray(x[:, ::-1]) for x in te]
            search = np.ascontiguousarray(search[:, ::-1])
            heat = np.ascontiguousarray(heat[:, :, ::-1])
            mask = np.ascontiguousarray(mask[:, :, ::-1]) if mask is not None else None
        if rng.integers(0, 2):
            te = [np.ascontiguousarray(x[::-1]) for x in te]
            search = np.ascontiguousarray(search[::-1])
            heat = np.ascontiguousarray(heat[:, ::-1])
            mask = np.ascontiguousarray(mask[:, ::-1]) if mask is not None else None

    return _TrainCrops(templates=np.stack(te), search=search,
                       gt=GroundTruth(heatmap=heat, mask=mask))


def finetune(dataset: list[SequenceSample], model: TrackerModel,
             pretrained: dict[str, np.ndarray] | None, settings: FinetuneSettings,
             seed: int, out_ckpt: str | None = None,
             log_path: str | None = None,
             extra_state: dict[str, np.ndarray] | None = None) -> TrackerModel:
    """Supervised training of the tracker, optionally from pretrained encoder weights."""
    if not dataset:
        raise ValueError("finetune: empty dataset")
    extra_state = extra_state or {}
    if not any(tip is not None for seq in dataset for tip in seq.tips):
        raise ValueError("finetune: dataset has no tip annotations")
    if pretrained is not None:
        loadable = {k: v for k, v in pretrained.items()
                    if k.startswith(("patch_embed.", "encoder."))}
        if not loadable:
            raise KeyError("finetune: checkpoint carries no encoder weights")
        model.load_state_dict(loadable, strict=False)

    model.set_training(True)
    opt = AdamW(model.parameters(), lr=settings.base_lr, betas=settings.betas,
                weight_decay=settings.weight_decay)
    rng = np.random.default_rng(seed + 2)
    warmup = int(round(settings.warmup_frac * settings.steps))
    log_rows = ["step,loss"]
    last_good: dict[str, np.ndarray] | None = None
    counters = {"no_prior": 0, "single_prior": 0}

    annotated = [(si, t) for si, seq in enumerate(dataset)
                 for t, tip in enumerate(seq.tips) if tip is not None]

    for step in range(settings.steps):
        opt.zero_grad()
        tot = 0.0
        for _ in range(settings.batch_size):
            si, t = annotated[int(rng.integers(0, len(annotated)))]
            sample = _build_train_sample(dataset[si], t, model, settings, rng, counters)
            out = model.forward(Tensor(sample.templates[:, None]),
                                Tensor(sample.search[None, None]))
            loss = T.scale(dice_losses(out, sample.gt, settings.lambda_mask),
                           1.0 / settings.batch_size)
            T.backward(loss)
            tot += float(loss.data)
        if not np.isfinite(tot):
            if last_good is not None and out_ckpt:
                save_checkpoint(out_ckpt, {**last_good, **extra_state})
            raise T.NumericError(f"finetune: non-finite loss at step {step}")
        opt.step(lr=cosine_warmup_lr(step, settings.base_lr, warmup, settings.steps))
        last_good = {k: v.copy() for k, v in model.state_dict().items()}
        if step % settings.log_every == 0:
            log_rows.append(f"{step},{tot!r}")

    if out_ckpt:
        save_checkpoint(out_ckpt, {**model.state_dict(), **extra_state})
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        tmp = log_path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write("\n".join(log_rows) + "\n")
        os.replace(tmp, log_path)
    return model
