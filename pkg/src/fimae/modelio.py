"""Self-describing model checkpoints.

Besides the weights, checkpoints carry their architecture as small numeric
entries under ``config.*`` names, so ``track`` and ``eval`` can rebuild the
model from the archive alone.
"""

from __future__ import annotations

import numpy as np

from .backbone import POS_MODES, BackboneConfig
from .checkpoint import CheckpointError, load_checkpoint
from .pretrain import FimaeDecoderConfig, FimaeModel
from .tracker import DecoderConfig, TrackerModel


def backbone_entries(cfg: BackboneConfig) -> dict[str, np.ndarray]:
    return {
        "config.backbone": np.asarray([
            cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.heads, cfg.mlp_ratio,
            cfg.frames, cfg.image_h, cfg.image_w, POS_MODES.index(cfg.pos_mode),
        ], dtype=np.float32),
    }


def _backbone_from(entry: np.ndarray) -> BackboneConfig:
    vals = entry.astype(np.float64)
    return BackboneConfig(
        patch_size=int(vals[0]), embed_dim=int(vals[1]), depth=int(vals[2]),
        heads=int(vals[3]), mlp_ratio=float(vals[4]), frames=int(vals[5]),
        image_h=int(vals[6]), image_w=int(vals[7]), pos_mode=POS_MODES[int(vals[8])])


def pretrain_entries(cfg: BackboneConfig, dec: FimaeDecoderConfig) -> dict[str, np.ndarray]:
    entries = backbone_entries(cfg)
    entries["config.pretrain_decoder"] = np.asarray([
        dec.decoder_dim, dec.decoder_depth, dec.decoder_heads, dec.projector_dim,
    ], dtype=np.float32)
    return entries


def tracker_entries(model: TrackerModel) -> dict[str, np.ndarray]:
    dec = model._dec
    entries = backbone_entries(model.config)
    entries["config.tracker"] = np.asarray([
        dec.model_dim, dec.depth, dec.heads, dec.n_queries,
        model.template_size, model.search_size, model.n_templates,
    ], dtype=np.float32)
    entries["config.head_channels"] = np.asarray(dec.head_channels, dtype=np.float32)
    return entries


def load_tracker(path: str) -> TrackerModel:
    named = load_checkpoint(path)
    for need in ("config.backbone", "config.tracker", "config.head_channels"):
        if need not in named:
            raise CheckpointError(f"{path}: not a tracker checkpoint (missing {need})")
    cfg = _backbone_from(named["config.backbone"])
    tr = named["config.tracker"].astype(np.float64)
    dec = DecoderConfig(
        model_dim=int(tr[0]), depth=int(tr[1]), heads=int(tr[2]), n_queries=int(tr[3]),
        head_channels=tuple(int(c) for c in named["config.head_channels"]))
    model = TrackerModel(cfg, dec, template_size=int(tr[4]), search_size=int(tr[5]),
                         n_templates=int(tr[6]), seed=0)
    model.load_state_dict({k: v for k, v in named.items() if not k.startswith("config.")},
                          strict=True)
    return model


def load_pretrain_model(path: str) -> FimaeModel:
    named = load_checkpoint(path)
    for need in ("config.backbone", "config.pretrain_decoder"):
        if need not in named:
            raise CheckpointError(f"{path}: not a pretraining checkpoint (missing {need})")
    cfg = _backbone_from(named["config.backbone"])
    pd = named["config.pretrain_decoder"].astype(np.float64)
    dec = FimaeDecoderConfig(decoder_dim=int(pd[0]), decoder_depth=int(pd[1]),
                             decoder_heads=int(pd[2]), projector_dim=int(pd[3]))
    model = FimaeModel(cfg, dec, seed=0)
    model.load_state_dict({k: v for k, v in named.items() if not k.startswith("config.")},
                          strict=True)
    return model
