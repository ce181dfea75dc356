"""Latent diffusion backbones: the shared contract, the toy model and the SD adapter."""

from .base import (
    ATTN_KINDS,
    PROJECTIONS,
    REGIONS,
    AttentionAddress,
    AttentionHook,
    Backbone,
    LayerAddress,
    NoiseSchedule,
    TextEmbedding,
    attention,
)
from .toy import ToyBackbone

__all__ = [
    "ATTN_KINDS",
    "PROJECTIONS",
    "REGIONS",
    "AttentionAddress",
    "AttentionHook",
    "Backbone",
    "LayerAddress",
    "NoiseSchedule",
    "TextEmbedding",
    "ToyBackbone",
    "attention",
    "load_backbone",
]


def load_backbone(kind="auto", weights_dir=None, device=None, seed=0):
    """Build a backbone handle.

    ``kind`` is ``"toy"``, ``"sd"`` or ``"auto"`` (SD when a weights
    directory is given or ``SIGSTYLE_BACKBONE_DIR`` is set, toy otherwise).
    """
    import os

    weights_dir = weights_dir or os.environ.get("SIGSTYLE_BACKBONE_DIR")
    if kind == "auto":
        kind = "sd" if weights_dir else "toy"
    if kind == "toy":
        return ToyBackbone(seed=seed)
    if kind == "sd":
        from .sd import StableDiffusionBackbone

        return StableDiffusionBackbone.from_pretrained(weights_dir, device=device)
    raise ValueError(f"unknown backbone kind {kind!r}")
