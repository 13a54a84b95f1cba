"""Tracking evaluation: per-frame errors, success scores, and ablation harnesses."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .synthdata import SequenceSample
from .tracker import TrackerModel, track_sequence


@dataclass
class EvalRecord:
    seq_id: str
    category: str
    length: int
    errors_mm: list[float]            # per predicted frame (the annotated init is excluded)
    aggregates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if any(e < 0 for e in self.errors_mm):
            raise ValueError("errors must be non-negative")
        if not self.aggregates and self.errors_mm:
            self.aggregates = aggregate(self.errors_mm)


def euclidean_mm(pred: tuple[float, float], gt: tuple[float, float], spacing: float) -> float:
    """Pixel-space euclidean distance converted to millimetres."""
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    du = float(pred[0]) - float(gt[0])
    dv = float(pred[1]) - float(gt[1])
    return spacing * float(np.sqrt(du * du + dv * dv))


def tsuc(errors, threshold_mm: float, level: str = "frame",
         sequence_mode: str = "mean") -> float:
    """Fraction of instances whose error falls strictly below the threshold.

    Frame level takes a flat error list.  Sequence level takes a list of
    per-sequence error lists and scores each sequence by its mean error
    (or max, via `sequence_mode`).
    """
    if threshold_mm <= 0:
        raise ValueError(f"threshold must be positive, got {threshold_mm}")
    if level == "frame":
        errs = list(errors)
        if not errs:
            raise ValueError("tsuc: empty error list")
        return sum(e < threshold_mm for e in errs) / len(errs)
    if level == "sequence":
        seqs = [list(s) for s in errors]
        if not seqs or any(not s for s in seqs):
            raise ValueError("tsuc: empty sequence list")
        reducer = np.mean if sequence_mode == "mean" else np.max
        return sum(float(reducer(s)) < threshold_mm for s in seqs) / len(seqs)
    raise ValueError(f"level must be 'frame' or 'sequence', got {level!r}")


def aggregate(errors) -> dict[str, float]:
    """Order statistics: median, mean, population std, p95 (linear interpolation), max."""
    errs = np.asarray(list(errors), dtype=np.float64)
    if errs.size == 0:
        raise ValueError("aggregate: empty error list")
    return {
        "median": float(np.median(errs)),
        "mean": float(errs.mean()),
        "std": float(errs.std()),
        "p95": float(np.percentile(errs, 95.0)),
        "max": float(errs.max()),
    }


def tsuc_vs_length(records: list[EvalRecord], cutoffs, threshold_mm: float) -> list[tuple[int, float]]:
    """Mean sequence-level success over sequences longer than each cutoff.

    Cutoffs that exclude every sequence contribute no point.
    """
    if not records:
        raise ValueError("tsuc_vs_length: no records")
    curve = []
    for cutoff in cutoffs:
        kept = [r.errors_mm for r in records if r.length > cutoff]
        if not kept:
            continue
        curve.append((int(cutoff), tsuc(kept, threshold_mm, level="sequence")))
    return curve


def _eval_one(model: TrackerModel, seq: SequenceSample,
              y1: tuple[float, float], update_first: bool) -> EvalRecord:
    tips = track_sequence(seq, y1, model, update_first=update_first)
    errors = [euclidean_mm(tips[t], seq.tips[t], seq.spacing)
              for t in range(1, len(seq)) if seq.tips[t] is not None]
    return EvalRecord(seq_id=seq.seq_id, category=seq.category,
                      length=len(seq), errors_mm=errors)


def worker_count() -> int:
    raw = os.environ.get("FIMAE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_tracker(model: TrackerModel, samples: list[SequenceSample],
                     init_noise_px: float = 0.0, seed: int = 0,
                     update_first: bool = False) -> list[EvalRecord]:
    """Track every sequence from its first annotation (optionally perturbed).

    Sequences are independent; FIMAE_THREADS>1 evaluates them in a thread
    pool over the shared frozen weights.  Results are ordered by input.
    """
    if not samples:
        raise ValueError("evaluate_tracker: no sequences")
    rng = np.random.default_rng(seed)
    inits = []
    for seq in samples:
        if seq.tips[0] is None:
            raise ValueError(f"sequence {seq.seq_id}: first frame lacks a tip annotation")
        u, v = seq.tips[0]
        if init_noise_px:
            h, w = seq.frames[0].shape
            u = min(max(u + rng.uniform(-init_noise_px, init_noise_px), 0.0), w - 1.0)
            v = min(max(v + rng.uniform(-init_noise_px, init_noise_px), 0.0), h - 1.0)
        inits.append((u, v))

    model.set_training(False)
    workers = worker_count()
    if workers == 1:
        return [_eval_one(model, seq, init, update_first)
                for seq, init in zip(samples, inits)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_eval_one, model, seq, init, update_first)
                   for seq, init in zip(samples, inits)]
        return [f.result() for f in futures]


def pooled_errors(records: list[EvalRecord]) -> list[float]:
    return [e for r in records for e in r.errors_mm]


def noise_harness(model: TrackerModel, samples: list[SequenceSample],
                  noise_levels=(0, 2, 4, 8, 16), update_first: bool = True,
                  threshold_mm: float = 8.0, seed: int = 0) -> list[dict[str, float]]:
    """Initialization-sensitivity sweep.

    One row per noise level with the fixed first template, and (when
    `update_first`) one extra row where the first template is refreshed from
    predictions like the dynamic ones.  Perturbations are drawn uniformly on
    the +-level box around the annotated initial tip.
    """
    rows = []
    for level in noise_levels:
        records = evaluate_tracker(model, samples, init_noise_px=float(level), seed=seed)
        row = {"noise_px": float(level), "update_first": 0.0}
        row.update(aggregate(pooled_errors(records)))
        row["tsuc_frame"] = tsuc(pooled_errors(records), threshold_mm)
        rows.append(row)
    if update_first:
        records = evaluate_tracker(model, samples, init_noise_px=0.0, seed=seed,
                                   update_first=True)
        row = {"noise_px": 0.0, "update_first": 1.0}
        row.update(aggregate(pooled_errors(records)))
        row["tsuc_frame"] = tsuc(pooled_errors(records), threshold_mm)
        rows.append(row)
    return rows


def positional_mode_harness(train: list[SequenceSample], test: list[SequenceSample],
                            pretrained: dict[str, np.ndarray], make_model,
                            finetune_fn, modes=("naive", "learnable", "frame_aware"),
                            seed: int = 0) -> dict[str, dict[str, float]]:
    """Finetune and evaluate one tracker per positional-encoding mode.

    `make_model(mode)` builds a fresh tracker; `finetune_fn(model)` trains it
    in place.  Identical seeds keep the comparison paired.
    """
    results = {}
    for mode in modes:
        model = make_model(mode)
        finetune_fn(model)
        records = evaluate_tracker(model, test, seed=seed)
        results[mode] = aggregate(pooled_errors(records))
    return results
