"""Synthetic grayscale sequences with a moving dark device curve.

Stands in for clinical acquisitions: a thin anti-aliased curve (the device)
moves over a brighter noisy background with a sinusoidal sway plus linear
drift.  The "contrast" category overlays soft blobs that grow or fade over
time; the "wires" category adds static curves whose intensity is close to
the device's, to provoke confusion.  Tips and body masks are recorded
exactly from the geometry, so metrics have exact ground truth.

On-disk format (bit-exact round trips):
  frames/frame_%04d.fimg   magic 'FIMG', u32le h, u32le w, f32le row-major pixels
  masks/mask_%04d.fimg     same container, values 0.0/1.0
  annotations.txt          rows 'frame_index,u,v[,mask_file]', u = column, v = row
  meta.txt                 'spacing_mm = …', 'fps = …', 'category = …'
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

CATEGORIES = ("clean", "contrast", "wires")
FRAME_MAGIC = b"FIMG"


class DataFormatError(IOError):
    """Malformed dataset file; message carries file and byte offset."""


class GenSpecError(ValueError):
    pass


@dataclass
class SequenceSample:
    frames: list[np.ndarray]                    # (h, w) float32 in [0, 1]
    tips: list[tuple[float, float] | None]      # (u, v) per frame, u = column
    body_masks: list[np.ndarray | None]         # (h, w) bool per frame
    spacing: float                              # mm per pixel
    fps: float
    category: str = "clean"
    seq_id: str = ""

    def __post_init__(self):
        if self.frames:
            shape = self.frames[0].shape
            if any(f.shape != shape for f in self.frames):
                raise GenSpecError("all frames of a sequence must share extents")
        for tip in self.tips:
            if tip is not None:
                h, w = self.frames[0].shape
                if not (0 <= tip[0] <= w - 1 and 0 <= tip[1] <= h - 1):
                    raise GenSpecError(f"tip {tip} outside {w}x{h} frame")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class GenSpec:
    extent: int = 96
    n_frames: int = 16
    amplitude: tuple[float, float] = (2.0, 6.0)   # sinusoid half-range, px (u, v)
    period: float = 8.0                           # frames per sway cycle
    drift: tuple[float, float] = (0.6, 0.2)       # px per frame
    curve_points: int = 4                         # spline control points for the body
    curve_half_width: float = 1.5                 # px; device width = 2 * half width
    device_depth: float = 0.55                    # intensity drop below background
    background: float = 0.82
    noise_level: float = 0.02
    n_blobs: int = 3                              # "contrast" distractors
    n_wires: int = 2                              # "wires" distractors
    distractor_clearance: float = 14.0            # min px distance from tip track
    spacing: float = 0.308                        # mm per pixel
    fps: float = 15.0
    category: str = "clean"
    seed: int = 0

    def __post_init__(self):
        if self.period <= 0:
            raise GenSpecError(f"period must be positive, got {self.period}")
        if self.category not in CATEGORIES:
            raise GenSpecError(f"category must be one of {CATEGORIES}, got {self.category!r}")
        if self.n_frames < 1 or self.extent < 16:
            raise GenSpecError("need n_frames >= 1 and extent >= 16")


# -- geometry -----------------------------------------------------------------


def _bezier(ctrl: np.ndarray, n_samples: int) -> np.ndarray:
    """Sample a Bezier curve of arbitrary degree via de Casteljau."""
    t = np.linspace(0.0, 1.0, n_samples)[:, None]
    pts = np.broadcast_to(ctrl[None, :, :], (n_samples,) + ctrl.shape).copy()
    while pts.shape[1] > 1:
        pts = (1.0 - t[:, None]) * pts[:, :-1, :] + t[:, None] * pts[:, 1:, :]
    return pts[:, 0, :]


def curve_distance_field(points: np.ndarray, h: int, w: int, reach: float) -> np.ndarray:
    """Min distance from each pixel center to the sampled curve (inf outside reach box)."""
    dist = np.full((h, w), np.inf, dtype=np.float64)
    u0 = max(0, int(np.floor(points[:, 0].min() - reach)))
    u1 = min(w - 1, int(np.ceil(points[:, 0].max() + reach)))
    v0 = max(0, int(np.floor(points[:, 1].min() - reach)))
    v1 = min(h - 1, int(np.ceil(points[:, 1].max() + reach)))
    if u1 < u0 or v1 < v0:
        return dist
    us = np.arange(u0, u1 + 1, dtype=np.float64)
    vs = np.arange(v0, v1 + 1, dtype=np.float64)
    du = us[None, :, None] - points[None, None, :, 0]
    dv = vs[:, None, None] - points[None, None, :, 1]
    local = np.sqrt(du * du + dv * dv).min(axis=2)
    dist[v0:v1 + 1, u0:u1 + 1] = local
    return dist


def _opacity(dist: np.ndarray, half_width: float) -> np.ndarray:
    # 1 inside the stroke, linear 1-px anti-aliasing ramp at the edge
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def _offsets(spec: GenSpec, phase: float) -> np.ndarray:
    t = np.arange(spec.n_frames, dtype=np.float64)
    sway = np.sin(2.0 * math.pi * t / spec.period + phase)
    du = spec.drift[0] * t + spec.amplitude[0] * sway
    dv = spec.drift[1] * t + spec.amplitude[1] * sway
    return np.stack([du, dv], axis=1)


def _sample_device_curve(spec: GenSpec, rng: np.random.Generator,
                         offsets: np.ndarray) -> np.ndarray:
    """Control points whose endpoint (the tip) stays in bounds at every frame."""
    margin = spec.curve_half_width + 2.0
    lo = margin - offsets.min(axis=0)
    hi = (spec.extent - 1 - margin) - offsets.max(axis=0)
    if np.any(hi - lo < 8.0):
        raise GenSpecError("motion amplitude/drift leave no room for the tip inside the frame")
    tip = rng.uniform(lo + (hi - lo) * 0.25, lo + (hi - lo) * 0.75)
    # body wanders away from the tip; entry point near a border keeps it long
    side = rng.integers(0, 4)
    e = float(spec.extent - 1)
    entry = {
        0: np.array([rng.uniform(0.2, 0.8) * e, margin]),
        1: np.array([rng.uniform(0.2, 0.8) * e, e - margin]),
        2: np.array([margin, rng.uniform(0.2, 0.8) * e]),
        3: np.array([e - margin, rng.uniform(0.2, 0.8) * e]),
    }[int(side)]
    ctrl = [entry]
    for k in range(1, spec.curve_points - 1):
        a = k / (spec.curve_points - 1)
        mid = (1 - a) * entry + a * tip
        ctrl.append(mid + rng.uniform(-0.15 * e, 0.15 * e, size=2))
    ctrl.append(tip)
    return np.asarray(ctrl, dtype=np.float64)


def _static_curve(spec: GenSpec, rng: np.random.Generator,
                  tip_track: np.ndarray) -> np.ndarray | None:
    """Distractor curve control points kept clear of the tip trajectory."""
    e = float(spec.extent - 1)
    for _ in range(50):
        ctrl = rng.uniform(0.05 * e, 0.95 * e, size=(spec.curve_points, 2))
        pts = _bezier(ctrl, 160)
        d = np.sqrt(((pts[:, None, :] - tip_track[None, :, :]) ** 2).sum(axis=2))
        if d.min() > spec.distractor_clearance:
            return ctrl
    return None


def generate(spec: GenSpec) -> SequenceSample:
    """Render a sequence; pure function of the spec (bit-identical per seed)."""
    rng = np.random.default_rng(spec.seed)
    h = w = spec.extent
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    offsets = _offsets(spec, phase)
    ctrl = _sample_device_curve(spec, rng, offsets)
    n_samples = max(200, 4 * spec.extent)
    base_pts = _bezier(ctrl, n_samples)
    tip_track = base_pts[-1][None, :] + offsets

    wires = []
    if spec.category == "wires":
        for _ in range(max(1, spec.n_wires)):
            c = _static_curve(spec, rng, tip_track)
            if c is not None:
                # intensity within 10% of the device stroke, by construction
                depth = spec.device_depth * float(rng.uniform(0.9, 1.1))
                wires.append((_bezier(c, n_samples), depth))

    blobs = []
    if spec.category == "contrast":
        for _ in range(max(1, spec.n_blobs)):
            for _ in range(50):
                center = rng.uniform(0.1 * w, 0.9 * w, size=2)
                if np.sqrt(((tip_track - center) ** 2).sum(axis=1)).min() > spec.distractor_clearance:
                    break
            radius = float(rng.uniform(5.0, 12.0))
            appearing = bool(rng.integers(0, 2))
            blobs.append((center, radius, appearing))

    frames, tips, masks = [], [], []
    reach = spec.curve_half_width + 1.5
    for t in range(spec.n_frames):
        pts = base_pts + offsets[t]
        dist = curve_distance_field(pts, h, w, reach)
        device_op = _opacity(dist, spec.curve_half_width)
        img = np.full((h, w), spec.background, dtype=np.float64)
        if spec.noise_level:
            img += rng.normal(0.0, spec.noise_level, size=(h, w))
        img -= spec.device_depth * device_op
        for wpts, depth in wires:
            img -= depth * _opacity(curve_distance_field(wpts, h, w, reach), spec.curve_half_width)
        for center, radius, appearing in blobs:
            ramp = t / max(1, spec.n_frames - 1)
            alpha = ramp if appearing else 1.0 - ramp
            if alpha <= 0.0:
                continue
            vv, uu = np.mgrid[0:h, 0:w]
            d2 = (uu - center[0]) ** 2 + (vv - center[1]) ** 2
            img -= 0.5 * spec.device_depth * alpha * np.exp(-d2 / (2.0 * radius * radius))
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        tips.append((float(tip_track[t, 0]), float(tip_track[t, 1])))
        masks.append(dist <= spec.curve_half_width)

    return SequenceSample(frames=frames, tips=tips, body_masks=masks,
                          spacing=spec.spacing, fps=spec.fps, category=spec.category,
                          seq_id=f"{spec.category}-{spec.seed}")


# -- signal-to-noise ----------------------------------------------------------


def _window(img: np.ndarray, center_rc: tuple[int, int], size: int) -> np.ndarray:
    # size-w window spans (w-1)//2 before and w//2 after the center, border-clamped
    r, c = center_rc
    lo, hi = (size - 1) // 2, size // 2
    r0, r1 = max(0, r - lo), min(img.shape[0], r + hi + 1)
    c0, c1 = max(0, c - lo), min(img.shape[1], c + hi + 1)
    return img[r0:r1, c0:c1]


def snr(sample: SequenceSample, frame_index: int, tip: tuple[float, float]) -> float:
    """20*log10(mean of 6x6 window / std of 30x30 window), both tip-centered."""
    img = sample.frames[frame_index].astype(np.float64)
    rc = (int(round(tip[1])), int(round(tip[0])))
    p_w = float(_window(img, rc, 6).mean())
    sigma = float(_window(img, rc, 30).std())
    if sigma == 0.0:
        return math.inf
    return 20.0 * math.log10(p_w / sigma)


# -- dataset I/O --------------------------------------------------------------


def write_frame(path: str, img: np.ndarray) -> None:
    a = np.ascontiguousarray(img, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<II", a.shape[0], a.shape[1]))
        fh.write(a.tobytes())


def read_frame(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FRAME_MAGIC:
        raise DataFormatError(f"{path}: bad magic at offset 0")
    if len(blob) < 12:
        raise DataFormatError(f"{path}: truncated header at offset {len(blob)}")
    h, w = struct.unpack_from("<II", blob, 4)
    expect = 12 + 4 * h * w
    if len(blob) != expect:
        raise DataFormatError(f"{path}: expected {expect} bytes, file ends at offset {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", count=h * w, offset=12).reshape(h, w).copy()


def write_sequence(sample: SequenceSample, seq_dir: str) -> None:
    frames_dir = os.path.join(seq_dir, "frames")
    masks_dir = os.path.join(seq_dir, "masks")
    os.makedirs(frames_dir, exist_ok=True)
    ann_rows = []
    for i, img in enumerate(sample.frames):
        write_frame(os.path.join(frames_dir, f"frame_{i:04d}.fimg"), img)
        tip = sample.tips[i]
        if tip is None:
            continue
        row = f"{i},{tip[0]!r},{tip[1]!r}"
        mask = sample.body_masks[i]
        if mask is not None:
            os.makedirs(masks_dir, exist_ok=True)
            mask_name = f"masks/mask_{i:04d}.fimg"
            write_frame(os.path.join(seq_dir, mask_name), mask.astype(np.float32))
            row += f",{mask_name}"
        ann_rows.append(row)
    with open(os.path.join(seq_dir, "annotations.txt"), "w") as fh:
        fh.write("\n".join(ann_rows) + ("\n" if ann_rows else ""))
    with open(os.path.join(seq_dir, "meta.txt"), "w") as fh:
        fh.write(f"spacing_mm = {sample.spacing!r}\n")
        fh.write(f"fps = {sample.fps!r}\n")
        fh.write(f"category = {sample.category}\n")


def read_sequence(seq_dir: str) -> SequenceSample:
    frames_dir = os.path.join(seq_dir, "frames")
    if not os.path.isdir(frames_dir):
        raise DataFormatError(f"{seq_dir}: no frames/ directory")
    frame_files = sorted(f for f in os.listdir(frames_dir) if f.endswith(".fimg"))
    frames = [read_frame(os.path.join(frames_dir, f)) for f in frame_files]

    meta = {}
    meta_path = os.path.join(seq_dir, "meta.txt")
    with open(meta_path) as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{meta_path}: malformed line {lineno + 1}")
            key, value = (part.strip() for part in line.split("=", 1))
            meta[key] = value

    tips: list[tuple[float, float] | None] = [None] * len(frames)
    masks: list[np.ndarray | None] = [None] * len(frames)
    ann_path = os.path.join(seq_dir, "annotations.txt")
    if os.path.exists(ann_path):
        with open(ann_path) as fh:
            for lineno, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                fields = line.split(",")
                if len(fields) not in (3, 4):
                    raise DataFormatError(f"{ann_path}: malformed row at line {lineno + 1}")
                idx = int(fields[0])
                if not 0 <= idx < len(frames):
                    raise DataFormatError(f"{ann_path}: frame index {idx} out of range, line {lineno + 1}")
                tips[idx] = (float(fields[1]), float(fields[2]))
                if len(fields) == 4:
                    masks[idx] = read_frame(os.path.join(seq_dir, fields[3])) > 0.5

    return SequenceSample(
        frames=frames, tips=tips, body_masks=masks,
        spacing=float(meta["spacing_mm"]), fps=float(meta["fps"]),
        category=meta.get("category", "clean"), seq_id=os.path.basename(seq_dir.rstrip("/")))


def write_dataset(samples: list[SequenceSample], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i, sample in enumerate(samples):
        write_sequence(sample, os.path.join(out_dir, f"seq_{i:05d}"))


def read_dataset(data_dir: str) -> list[SequenceSample]:
    if not os.path.isdir(data_dir):
        raise DataFormatError(f"{data_dir}: not a directory")
    seq_dirs = sorted(d for d in os.listdir(data_dir)
                      if os.path.isdir(os.path.join(data_dir, d)))
    samples = [read_sequence(os.path.join(data_dir, d)) for d in seq_dirs]
    if not samples:
        raise DataFormatError(f"{data_dir}: no sequence directories found")
    return samples


def generate_corpus(spec: GenSpec, count: int, seed: int,
                    categories: tuple[str, ...] = CATEGORIES) -> list[SequenceSample]:
    """Generate `count` sequences cycling through the categories."""
    samples = []
    for i in range(count):
        cat = categories[i % len(categories)]
        samples.append(generate(replace(spec, category=cat, seed=seed + i)))
    return samples
