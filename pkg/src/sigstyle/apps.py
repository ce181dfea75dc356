"""User-facing pipelines: global, local and texture transfer, and
style-guided generation.

A transfer encodes the content image, inverts it with the base model and
the content prompt, then runs two denoising branches from the inverted
noise: the reconstruction (base weights, content prompt) that records
self-attention maps, and the stylized branch (patched weights, target
prompt with the ``*`` token) that consumes them for the first ``k`` steps.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

import torch
import torch.nn.functional as F

from .backbone.base import Backbone, TextEmbedding
from .checkpoint import StyleCheckpoint
from .ddim import ConfigWarning, SamplerConfig, Trajectory, ddim_invert, ddim_sample
from .errors import CaptionerError, CapabilityError, ConfigurationError, DimensionError, PromptError
from .hypernet import OffsetConfig, apply_offsets
from .imageio import center_square, prepare, resize
from .styletune import STYLE_TOKEN
from .swap import AttentionTrace, SwapPlan, SwapRun, lockstep_swap, mask_blend, record_reconstruction, stylized_generate

log = logging.getLogger(__name__)

STYLE_TEMPLATE = "{caption} in the style of *"
APPEARANCE_TEMPLATE = "{caption} in the appearance of *"
CAPTION_SOURCES = ("user", "captioner")
EXECUTION_MODES = ("lockstep", "replay")


@dataclass(frozen=True)
class TransferConfig:
    """Settings for every transfer pipeline.

    ``content_prompt_template`` builds the prompt used for inversion and the
    reconstruction branch; ``inversion_guidance`` is the guidance scale of
    both (1 keeps inversion faithful on real backbones).
    """

    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    swap: SwapPlan = field(default_factory=SwapPlan)
    lam: float = 1.0
    target_prompt_template: str = STYLE_TEMPLATE
    content_prompt_template: str = "{caption}"
    caption_source: str = "user"
    caption: Optional[str] = None
    inversion_guidance: float = 1.0
    execution: str = "lockstep"
    trace_memory_budget: Optional[int] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        t = self.target_prompt_template
        if t.count(STYLE_TOKEN) != 1 or t.count("{caption}") > 1:
            raise ConfigurationError(
                "target_prompt_template must contain '*' exactly once and '{caption}' at most once"
            )
        if self.content_prompt_template.count("{caption}") > 1:
            raise ConfigurationError("content_prompt_template may contain '{caption}' at most once")
        if self.caption_source not in CAPTION_SOURCES:
            raise ConfigurationError(f"caption_source must be one of {CAPTION_SOURCES}")
        if self.execution not in EXECUTION_MODES:
            raise ConfigurationError(f"execution must be one of {EXECUTION_MODES}")
        if self.inversion_guidance < 0:
            raise ConfigurationError("inversion_guidance must be >= 0")

    @property
    def recon_sampler(self) -> SamplerConfig:
        return replace(self.sampler, guidance_scale=self.inversion_guidance)


@dataclass
class Mask:
    """Grayscale mask at content resolution; white marks the transfer region."""

    grid: torch.Tensor
    threshold: float = 0.5

    def __post_init__(self):
        g = torch.as_tensor(self.grid, dtype=torch.float64)
        if g.ndim == 3 and g.shape[0] == 1:
            g = g[0]
        if g.ndim != 2:
            raise DimensionError(f"mask must be a 2-D grayscale grid, got shape {tuple(g.shape)}")
        self.grid = g

    @classmethod
    def full(cls, h, w, value=1.0) -> "Mask":
        return cls(torch.full((h, w), float(value), dtype=torch.float64))

    def binary(self) -> torch.Tensor:
        return (self.grid >= self.threshold).to(torch.float64)

    def latent_mask(self, image_size: int, latent_hw: tuple[int, int]) -> torch.Tensor:
        """Crop/resize like the content image, area-average to latent size, re-threshold."""
        m = self.binary()[None]
        m = center_square(m)
        if m.shape[-1] != image_size:
            m = (resize(m, image_size) >= 0.5).to(torch.float64)
        m = F.adaptive_avg_pool2d(m[None], latent_hw)[0]
        return (m >= 0.5).to(torch.float64)


class Captioner(Protocol):
    def caption(self, image: torch.Tensor) -> str: ...


class Blip2Captioner:
    """Lazy BLIP-2 captioner from ``transformers``.

    Weights are read from ``model_dir`` (or SIGSTYLE_CAPTIONER_DIR); nothing
    is loaded until the first call.
    """

    def __init__(self, model_dir: Optional[str] = None, device: str = "cpu"):
        self.model_dir = model_dir or os.environ.get("SIGSTYLE_CAPTIONER_DIR")
        self.device = device
        self._model = None

    def _load(self):
        if self.model_dir is None:
            raise CaptionerError("no captioner weights configured; pass a caption instead (--caption)")
        try:
            from transformers import Blip2ForConditionalGeneration, Blip2Processor
        except ImportError as exc:
            raise CapabilityError("captioning needs the 'transformers' package") from exc
        try:
            self._proc = Blip2Processor.from_pretrained(self.model_dir)
            self._model = Blip2ForConditionalGeneration.from_pretrained(self.model_dir).to(self.device)
        except Exception as exc:  # network or file errors
            raise CaptionerError(f"could not load captioner: {exc}; pass a caption instead (--caption)") from exc

    def caption(self, image):
        from .imageio import to_pil

        if self._model is None:
            self._load()
        inputs = self._proc(images=to_pil(image), return_tensors="pt").to(self.device)
        out = self._model.generate(**inputs, max_new_tokens=30)
        return self._proc.batch_decode(out, skip_special_tokens=True)[0].strip()


def caption_content(image, client: Optional[Captioner] = None, caption_source: str = "user",
                    user_caption: Optional[str] = None) -> str:
    if caption_source == "user":
        if not user_caption or not user_caption.strip():
            raise CaptionerError("caption_source is 'user' but no caption was given")
        return user_caption
    if client is None:
        raise CaptionerError("no captioner client configured; pass a caption instead (--caption)")
    try:
        text = client.caption(image)
    except CaptionerError:
        raise
    except Exception as exc:
        raise CaptionerError(f"captioner failed: {exc}; pass a caption instead (--caption)") from exc
    if not text or not text.strip():
        raise CaptionerError("captioner returned an empty caption; pass a caption instead (--caption)")
    return text.strip()


def build_prompts(caption: str, cfg: TransferConfig) -> tuple[str, str]:
    """(content prompt, target prompt) for a caption."""
    return (
        cfg.content_prompt_template.format(caption=caption),
        cfg.target_prompt_template.format(caption=caption),
    )


def _embed(model: Backbone, prompt: str, token: torch.Tensor) -> TextEmbedding:
    overrides = {STYLE_TOKEN: token} if STYLE_TOKEN in model.tokenize(prompt) else {}
    return model.embed_prompt(prompt, overrides)


def _warn_mode(ckpt: StyleCheckpoint, expected: str, pipeline: str):
    if ckpt.mode != expected:
        warnings.warn(
            f"{pipeline} expects a checkpoint trained in {expected!r} mode, got {ckpt.mode!r}",
            ConfigWarning,
            stacklevel=3,
        )


@dataclass
class TransferResult:
    image: torch.Tensor
    reconstruction_image: torch.Tensor
    run: SwapRun
    inversion: Trajectory
    prompts: tuple[str, str]
    latent_mask: Optional[torch.Tensor] = None


@torch.no_grad()
def run_transfer(
    model: Backbone,
    content_image: torch.Tensor,
    checkpoint: StyleCheckpoint,
    cfg: TransferConfig = TransferConfig(),
    mask: Optional[Mask] = None,
    captioner: Optional[Captioner] = None,
) -> TransferResult:
    """Full transfer pipeline returning intermediate products too."""
    checkpoint.check_compatible(model)
    cfg.swap.check(cfg.sampler.num_steps)
    if mask is not None and tuple(mask.grid.shape) != tuple(content_image.shape[-2:]):
        raise DimensionError(
            f"mask {tuple(mask.grid.shape)} does not match content image {tuple(content_image.shape[-2:])}"
        )
    caption = caption_content(content_image, captioner, cfg.caption_source, cfg.caption)
    content_prompt, target_prompt = build_prompts(caption, cfg)
    log.info("content prompt %r, target prompt %r", content_prompt, target_prompt)

    token = checkpoint.token(model)
    content_text = _embed(model, content_prompt, token)
    target_text = _embed(model, target_prompt, token)
    image = prepare(content_image.to(model.dtype), model.image_size)
    z0 = model.encode_image(image)
    inverted = ddim_invert(model, z0, content_text, cfg.recon_sampler)
    z_T = inverted.final

    m_lat = None
    if mask is not None:
        m_lat = mask.latent_mask(model.image_size, tuple(model.latent_shape[-2:])).to(model.dtype)

    predictor = checkpoint.predictor(model.dtype)
    scope = apply_offsets(
        model, predictor, OffsetConfig(cfg.lam, tuple(checkpoint.targets)), checkpoint.deltas(model)
    )
    try:
        if cfg.execution == "lockstep":
            run = lockstep_swap(
                model, scope, z_T, content_text, target_text, cfg.sampler, cfg.swap,
                recon_cfg=cfg.recon_sampler, blend_mask=m_lat, memory_budget=cfg.trace_memory_budget,
            )
        else:
            scope.suspend()
            trace, recon = record_reconstruction(
                model, z_T, content_text, cfg.recon_sampler, cfg.swap, inverted, cfg.trace_memory_budget
            )
            scope.resume()
            blend = mask_blend(m_lat, recon) if m_lat is not None else None
            hooks = []
            styled = stylized_generate(model, z_T, target_text, trace, cfg.swap, cfg.sampler, blend, hooks)
            run = SwapRun(styled, recon, trace, hooks[0])
        out = model.decode_latent(run.stylized.final)
    finally:
        scope.release()
    recon_img = model.decode_latent(run.reconstruction.final)
    return TransferResult(out, recon_img, run, inverted, (content_prompt, target_prompt), m_lat)


def global_transfer(model, content_image, checkpoint, cfg=TransferConfig(), captioner=None) -> torch.Tensor:
    _warn_mode(checkpoint, "style", "global transfer")
    res = run_transfer(model, content_image, checkpoint, cfg, None, captioner)
    res.run.trace.close()
    return res.image


def local_transfer(model, content_image, checkpoint, mask: Mask, cfg=TransferConfig(), captioner=None) -> torch.Tensor:
    _warn_mode(checkpoint, "style", "local transfer")
    res = run_transfer(model, content_image, checkpoint, cfg, mask, captioner)
    res.run.trace.close()
    return res.image


def texture_transfer(model, content_image, checkpoint, mask: Mask, cfg: Optional[TransferConfig] = None,
                     captioner=None) -> torch.Tensor:
    """Local transfer driven by an appearance checkpoint and prompt."""
    cfg = cfg or TransferConfig(target_prompt_template=APPEARANCE_TEMPLATE)
    _warn_mode(checkpoint, "appearance", "texture transfer")
    res = run_transfer(model, content_image, checkpoint, cfg, mask, captioner)
    res.run.trace.close()
    return res.image


@torch.no_grad()
def style_guided_generate(
    model: Backbone,
    prompt: str,
    checkpoint: StyleCheckpoint,
    sampler: SamplerConfig = SamplerConfig(),
    lam: float = 1.0,
) -> torch.Tensor:
    """Text-to-image sampling with the style token and offsets; no inversion or swap."""
    if STYLE_TOKEN not in model.tokenize(prompt):
        raise PromptError(f"prompt {prompt!r} does not contain the style token '*'")
    checkpoint.check_compatible(model)
    text = model.embed_prompt(prompt, {STYLE_TOKEN: checkpoint.token(model)})
    g = torch.Generator().manual_seed(sampler.seed)
    z_T = torch.randn(model.latent_shape, generator=g, dtype=torch.float64).to(model.device, model.dtype)
    scope = apply_offsets(
        model, checkpoint.predictor(model.dtype), OffsetConfig(lam, tuple(checkpoint.targets)),
        checkpoint.deltas(model),
    )
    try:
        traj = ddim_sample(model, z_T, text, sampler)
        return model.decode_latent(traj.final)
    finally:
        scope.release()


def base_generate(model: Backbone, prompt: str, sampler: SamplerConfig = SamplerConfig(),
                  overrides=None) -> torch.Tensor:
    """Unpatched sampling with the same seeding as :func:`style_guided_generate`."""
    text = model.embed_prompt(prompt, overrides or {})
    g = torch.Generator().manual_seed(sampler.seed)
    z_T = torch.randn(model.latent_shape, generator=g, dtype=torch.float64).to(model.device, model.dtype)
    with torch.no_grad():
        return model.decode_latent(ddim_sample(model, z_T, text, sampler).final)
