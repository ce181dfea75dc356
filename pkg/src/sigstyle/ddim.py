"""Deterministic DDIM sampling and inversion (eta = 0).

Both directions share one timestep grid of ``T + 1`` boundaries spread
evenly over ``[0, N - 1]``.  Transition ``s`` of the denoiser moves from
boundary ``T - s`` to ``T - s - 1`` and evaluates the UNet at the upper
boundary; inversion walks the same grid upwards and, as usual for DDIM
inversion, evaluates the UNet on the current latent with the *upper*
boundary's timestep label, which makes the two maps mirror each other.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import torch

from .backbone.base import AttentionHook, Backbone, TextEmbedding
from .errors import ConfigurationError, DimensionError, NumericError


class ConfigWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    guidance_scale: float = 1.0
    seed: int = 0
    eta: float = 0.0

    def __post_init__(self):
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ConfigurationError(f"num_steps must be a positive integer, got {self.num_steps}")
        if self.eta != 0:
            raise ConfigurationError("only deterministic DDIM (eta = 0) is supported")
        if self.guidance_scale < 0:
            raise ConfigurationError("guidance_scale must be non-negative")

    @property
    def branches(self) -> tuple[str, ...]:
        """Guidance branches evaluated per step, in evaluation order."""
        return ("cond",) if self.guidance_scale == 1.0 else ("uncond", "cond")


@dataclass
class Trajectory:
    """Latents at every grid boundary, in traversal order.

    ``timesteps[i]`` is the schedule timestep of ``latents[i]``; both have
    ``num_steps + 1`` entries.
    """

    latents: list[torch.Tensor]
    timesteps: list[int]
    direction: str
    guidance_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def num_steps(self) -> int:
        return len(self.latents) - 1

    @property
    def final(self) -> torch.Tensor:
        return self.latents[-1]


class StepHooks(Protocol):
    def for_step(self, step: int, branch: str) -> Optional[AttentionHook]: ...


def timestep_grid(num_train_steps: int, num_steps: int) -> list[int]:
    """Ascending boundaries ``0 = t_0 < ... < t_T = N - 1``."""
    if num_steps > num_train_steps - 1:
        raise ConfigurationError(
            f"{num_steps} steps exceed the {num_train_steps}-step schedule"
        )
    grid = torch.linspace(0, num_train_steps - 1, num_steps + 1, dtype=torch.float64)
    return [int(v) for v in grid.round()]


def ddim_transition(z, eps, ab_from, ab_to):
    """Move ``z`` from noise level ``ab_from`` to ``ab_to`` along ``eps``."""
    x0 = (z - (1 - ab_from) ** 0.5 * eps) / ab_from ** 0.5
    return ab_to ** 0.5 * x0 + (1 - ab_to) ** 0.5 * eps


def guided_noise(
    model: Backbone,
    z: torch.Tensor,
    t: int,
    text: TextEmbedding,
    cfg: SamplerConfig,
    uncond: Optional[TextEmbedding] = None,
    hook_for: Optional[Callable[[str], Optional[AttentionHook]]] = None,
) -> torch.Tensor:
    """Classifier-free-guided noise estimate; one UNet call per branch."""
    hook_for = hook_for or (lambda branch: None)
    if cfg.guidance_scale == 1.0:
        return model.predict_noise(z, t, text, hooks=hook_for("cond"))
    if uncond is None:
        uncond = model.embed_prompt("")
    eps_u = model.predict_noise(z, t, uncond, hooks=hook_for("uncond"))
    eps_c = model.predict_noise(z, t, text, hooks=hook_for("cond"))
    return eps_u + cfg.guidance_scale * (eps_c - eps_u)


class DenoiseStepper:
    """Single-step view of the DDIM denoiser, for lockstep orchestration."""

    def __init__(self, model: Backbone, text: TextEmbedding, cfg: SamplerConfig,
                 uncond: Optional[TextEmbedding] = None):
        self.model = model
        self.text = text
        self.cfg = cfg
        if cfg.guidance_scale != 1.0 and uncond is None:
            uncond = model.embed_prompt("")
        self.uncond = uncond
        self.grid = timestep_grid(model.schedule.num_train_steps, cfg.num_steps)[::-1]

    def step(self, s: int, z: torch.Tensor, hooks: Optional[StepHooks] = None) -> torch.Tensor:
        ab = self.model.schedule.alpha_bar
        t_from, t_to = self.grid[s], self.grid[s + 1]
        hook_for = None if hooks is None else (lambda b: hooks.for_step(s, b))
        eps = guided_noise(self.model, z, t_from, self.text, self.cfg, self.uncond, hook_for)
        z_next = ddim_transition(z, eps, ab[t_from].to(z.dtype), ab[t_to].to(z.dtype))
        if not bool(torch.isfinite(z_next).all()):
            raise NumericError("non-finite latent during DDIM sampling", step=s)
        return z_next


def _check_start(model: Backbone, z: torch.Tensor) -> torch.Tensor:
    z = torch.as_tensor(z)
    if tuple(z.shape) != tuple(model.latent_shape):
        raise DimensionError(f"latent shape {tuple(z.shape)}, expected {tuple(model.latent_shape)}")
    return z.to(model.device, model.dtype)


@torch.no_grad()
def ddim_sample(
    model: Backbone,
    z_T: torch.Tensor,
    text: TextEmbedding,
    cfg: SamplerConfig,
    hooks: Optional[StepHooks] = None,
    callback: Optional[Callable[[int, torch.Tensor], torch.Tensor]] = None,
    uncond: Optional[TextEmbedding] = None,
) -> Trajectory:
    """Denoise ``z_T`` to ``z_0`` in ``cfg.num_steps`` DDIM updates.

    ``callback(step, z)`` runs after every update and may return a
    replacement latent.
    """
    stepper = DenoiseStepper(model, text, cfg, uncond)
    z = _check_start(model, z_T)
    latents = [z]
    for s in range(cfg.num_steps):
        z = stepper.step(s, z, hooks)
        if callback is not None:
            z = callback(s, z)
        latents.append(z)
    return Trajectory(latents, list(stepper.grid), "denoise", cfg.guidance_scale)


@torch.no_grad()
def ddim_invert(
    model: Backbone,
    z_0: torch.Tensor,
    text: TextEmbedding,
    cfg: SamplerConfig,
    uncond: Optional[TextEmbedding] = None,
) -> Trajectory:
    """Map a clean latent to the noise latent that DDIM sampling returns from."""
    grid = timestep_grid(model.schedule.num_train_steps, cfg.num_steps)
    ab = model.schedule.alpha_bar
    if cfg.guidance_scale != 1.0 and uncond is None:
        uncond = model.embed_prompt("")
    z = _check_start(model, z_0)
    latents = [z]
    for s in range(cfg.num_steps):
        t_from, t_to = grid[s], grid[s + 1]
        eps = guided_noise(model, z, t_to, text, cfg, uncond)
        z = ddim_transition(z, eps, ab[t_from].to(z.dtype), ab[t_to].to(z.dtype))
        if not bool(torch.isfinite(z).all()):
            raise NumericError("non-finite latent during DDIM inversion", step=s)
        latents.append(z)
    return Trajectory(latents, grid, "invert", cfg.guidance_scale)


def check_guidance_match(inverted: Trajectory, cfg: SamplerConfig) -> bool:
    """Warn when a reconstruction uses a different guidance scale than its inversion."""
    if inverted.guidance_scale != cfg.guidance_scale:
        warnings.warn(
            f"inversion used guidance {inverted.guidance_scale} but reconstruction uses "
            f"{cfg.guidance_scale}; reconstruction will drift",
            ConfigWarning,
            stacklevel=2,
        )
        return False
    return True
