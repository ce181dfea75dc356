"""Style-aware fine-tuning: learn the ``*`` token and the offset predictor.

Only the predictor parameters and the token embedding are optimized; the
decoder attention weights change solely through ``W + lam * dW`` at
forward time, and every other backbone parameter stays frozen.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone.base import Backbone
from .checkpoint import PROMPT_TEMPLATES, StyleCheckpoint, utc_now
from .errors import ConfigurationError, ImageSizeError, NumericError, TrainingAborted
from .hypernet import OffsetConfig, OffsetPredictor, apply_offsets, default_targets, init_predictor
from .imageio import image_digest, resize

log = logging.getLogger(__name__)

STYLE_TOKEN = "*"
SEED_WORD = "art"
TOKEN_NOISE = 0.05
CROP_MIN_FRACTION = 0.8


@dataclass(frozen=True)
class AugmentConfig:
    random_crop: bool = True
    horizontal_flip: bool = True
    flip_prob: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-6
    steps: int = 1500
    batch_size: int = 1
    lam: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    prompt_template: str = PROMPT_TEMPLATES["style"]
    mode: str = "style"
    train_decoder_direct: bool = False
    seed_word: str = SEED_WORD

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be >= 1")
        if self.prompt_template.count(STYLE_TOKEN) != 1:
            raise ConfigurationError("prompt_template must contain '*' exactly once")

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "TrainConfig":
        """Config whose prompt template matches ``mode`` ("style" or "appearance")."""
        if mode not in PROMPT_TEMPLATES:
            raise ConfigurationError(f"unknown mode {mode!r}")
        return cls(mode=mode, prompt_template=PROMPT_TEMPLATES[mode], **kw)


def init_style_token(model: Backbone, seed: int = 0, seed_word: str = SEED_WORD) -> torch.Tensor:
    """Seed-word embedding plus small seeded noise."""
    base = model.word_embedding(seed_word).to(torch.float64)
    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(base.shape, generator=g, dtype=torch.float64)
    noise = noise * (TOKEN_NOISE * base.norm() / base.numel() ** 0.5)
    return (base + noise).to(model.dtype)


def hflip(image: torch.Tensor) -> torch.Tensor:
    return torch.flip(image, dims=(-1,))


def augment(image: torch.Tensor, cfg: AugmentConfig, seed: int, size: int) -> torch.Tensor:
    """Random crop (each side keeps >= 80%) and resize, then coin-flip mirror."""
    h, w = image.shape[-2:]
    if min(h, w) < size:
        raise ImageSizeError(f"image {h}x{w} is smaller than the {size}px model input")
    rng = np.random.default_rng(seed)
    flip_u, fh, fw, oy, ox = rng.random(5)
    out = image
    if cfg.random_crop:
        ch = max(1, int(round(h * (CROP_MIN_FRACTION + (1 - CROP_MIN_FRACTION) * fh))))
        cw = max(1, int(round(w * (CROP_MIN_FRACTION + (1 - CROP_MIN_FRACTION) * fw))))
        top = int(oy * (h - ch + 1))
        left = int(ox * (w - cw + 1))
        out = out[..., top : top + ch, left : left + cw]
    out = resize(out, size)
    if cfg.horizontal_flip and flip_u < cfg.flip_prob:
        out = hflip(out)
    return out


def inversion_loss(
    model: Backbone,
    predictor: OffsetPredictor,
    token: torch.Tensor,
    image_latent: torch.Tensor,
    t: int,
    noise: torch.Tensor,
    lam: float = 1.0,
    prompt_template: str = PROMPT_TEMPLATES["style"],
    extra_deltas=None,
) -> torch.Tensor:
    """Differentiable single-sample objective: MSE(noise, eps(x_t, t, tau(P_s)))."""
    x_t = model.schedule.add_noise(image_latent, noise, t)
    with apply_offsets(model, predictor, OffsetConfig(lam), extra_deltas):
        text = model.embed_prompt(prompt_template, {STYLE_TOKEN: token})
        eps = model.predict_noise(x_t, t, text)
    return F.mse_loss(eps, noise.to(eps.dtype))


def train_step(
    model: Backbone,
    predictor: OffsetPredictor,
    token: torch.Tensor,
    image_latent: torch.Tensor,
    t: int,
    noise: torch.Tensor,
    cfg: TrainConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: Optional[int] = None,
    extra_deltas=None,
) -> float:
    """Compute the loss, backpropagate and (if given) take an optimizer step."""
    loss = inversion_loss(
        model, predictor, token, image_latent, t, noise, cfg.lam, cfg.prompt_template, extra_deltas
    )
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at timestep {t}", step=step)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return value


def _build_checkpoint(model, predictor, token, cfg, steps, hashes, deltas, history) -> StyleCheckpoint:
    return StyleCheckpoint(
        token_embedding=token.detach(),
        predictor_state=predictor.state_arrays(),
        targets=list(predictor.targets),
        base_model_id=model.model_id,
        train_lambda=cfg.lam,
        steps_trained=steps,
        style_image_hashes=hashes,
        created_at=utc_now(),
        mode=cfg.mode,
        prompt_template=cfg.prompt_template,
        direct_deltas={k: v.detach() for k, v in deltas.items()},
        loss_history=list(history),
    )


def finetune(
    model: Backbone,
    style_images: Sequence[torch.Tensor],
    cfg: TrainConfig = TrainConfig(),
    targets=None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> StyleCheckpoint:
    """Fit token + offsets to one or more style images.

    Images are visited round-robin; each sample draws its augmentation,
    timestep (uniform over the schedule) and noise from generators seeded by
    ``cfg.seed``, so equal inputs give equal checkpoints.
    """
    if not style_images:
        raise ConfigurationError("finetune needs at least one style image")
    targets = list(targets) if targets is not None else default_targets(model)
    hashes = [image_digest(im) for im in style_images]
    for im in style_images:
        if min(im.shape[-2:]) < model.image_size:
            raise ImageSizeError(
                f"style image {tuple(im.shape[-2:])} is smaller than the {model.image_size}px model input"
            )

    predictor = init_predictor(targets, seed=cfg.seed, dtype=model.dtype)
    token = torch.nn.Parameter(init_style_token(model, cfg.seed, cfg.seed_word).clone())
    deltas = {}
    if cfg.train_decoder_direct:
        deltas = {
            a.key: torch.nn.Parameter(torch.zeros(a.shape, dtype=model.dtype, device=model.device))
            for a in targets
        }
    params = [*predictor.parameters(), token, *deltas.values()]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=0.0)

    g = torch.Generator().manual_seed(cfg.seed)
    aug_seeds = np.random.SeedSequence(cfg.seed)
    n_train = model.schedule.num_train_steps
    history: list[float] = []
    n = len(style_images)
    last_good = _snapshot(predictor, token, deltas)
    for step in range(cfg.steps):
        samples = []
        for b in range(cfg.batch_size):
            idx = (step * cfg.batch_size + b) % n
            seed = int(aug_seeds.spawn(1)[0].generate_state(1)[0])
            img = augment(style_images[idx], cfg.augment, seed, model.image_size)
            z0 = model.encode_image(img)
            t = int(torch.randint(0, n_train, (1,), generator=g))
            noise = torch.randn(model.latent_shape, generator=g, dtype=torch.float64).to(model.dtype)
            samples.append((z0, t, noise))
        optimizer.zero_grad(set_to_none=True)
        total = 0.0
        try:
            for z0, t, noise in samples:
                loss = inversion_loss(
                    model, predictor, token, z0, t, noise, cfg.lam, cfg.prompt_template, deltas
                ) / cfg.batch_size
                value = float(loss.detach())
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at timestep {t}", step=step)
                loss.backward()
                total += value
        except NumericError as exc:
            _restore(predictor, token, deltas, last_good)
            ckpt = _build_checkpoint(model, predictor, token, cfg, step, hashes, deltas, history)
            raise TrainingAborted(str(exc), step=step, last_good=ckpt) from exc
        optimizer.step()
        last_good = _snapshot(predictor, token, deltas)
        history.append(total)
        if progress is not None:
            progress(step, total)
        elif step % 100 == 0 or step == cfg.steps - 1:
            log.info("step %d/%d loss %.6f", step + 1, cfg.steps, total)
    return _build_checkpoint(model, predictor, token, cfg, cfg.steps, hashes, deltas, history)


def _snapshot(predictor, token, deltas):
    return (
        copy.deepcopy(predictor.state_dict()),
        token.detach().clone(),
        {k: v.detach().clone() for k, v in deltas.items()},
    )


def _restore(predictor, token, deltas, snap):
    state, tok, dl = snap
    predictor.load_state_dict(state)
    with torch.no_grad():
        token.copy_(tok)
        for k, v in dl.items():
            deltas[k].copy_(v)


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError(f"need at least {window} values")
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
