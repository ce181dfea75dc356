"""Time-aware self-attention swapping.

The reconstruction branch (base weights, content prompt) records each
self-attention probability map for the first ``k`` denoising steps; the
stylized branch (patched weights, target prompt) starts from the same
inverted noise and, for those steps, multiplies its *own* values by the
recorded maps instead of its own ``softmax(QK^T / sqrt(d))``.

Two execution modes give bitwise-identical results: ``lockstep`` advances
both branches one step at a time (a trace entry is written, then read in
the same step), ``replay`` records the whole reconstruction first.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .backbone.base import Backbone, LayerAddress, TextEmbedding
from .ddim import DenoiseStepper, SamplerConfig, Trajectory, check_guidance_match, _check_start
from .errors import (
    ConfigurationError,
    DimensionError,
    TraceGapError,
    TraceIncompatibleError,
    TraceValidationError,
)

ROW_SUM_TOL = 1e-4
BRANCHES = ("uncond", "cond")


@dataclass(frozen=True)
class SwapPlan:
    k: int = 25
    layers: Optional[frozenset] = None  # None: every self-attention layer
    apply_to_branches: tuple[str, ...] = BRANCHES

    def __post_init__(self):
        if self.k < 0:
            raise ConfigurationError("swap horizon k must be >= 0")
        bad = set(self.apply_to_branches) - set(BRANCHES)
        if bad:
            raise ConfigurationError(f"unknown guidance branches {sorted(bad)}")

    def check(self, num_steps: int) -> None:
        if self.k > num_steps:
            raise ConfigurationError(f"swap horizon k={self.k} exceeds the {num_steps} sampling steps")

    def resolve_layers(self, model: Backbone) -> list[LayerAddress]:
        all_layers = model.self_attention_layers()
        if self.layers is None:
            return all_layers
        wanted = {LayerAddress.parse(l) if isinstance(l, str) else l for l in self.layers}
        unknown = wanted - set(all_layers)
        if unknown:
            raise ConfigurationError(f"not self-attention layers of this model: {sorted(map(str, unknown))}")
        return [l for l in all_layers if l in wanted]


class AttentionTrace:
    """Write-once store of (step, layer, branch) -> attention map.

    Maps beyond ``memory_budget`` bytes spill to ``.npy`` files in a
    temporary directory; reads return bitwise-identical tensors either way.
    Every read is logged in ``reads`` so callers can prove which steps
    consumed the trace.
    """

    def __init__(self, meta: dict, memory_budget: Optional[int] = None):
        self.meta = dict(meta)
        self.memory_budget = memory_budget
        self._mem: dict[tuple, torch.Tensor] = {}
        self._disk: dict[tuple, str] = {}
        self._bytes = 0
        self._spill_dir: Optional[str] = None
        self.reads: list[tuple[int, LayerAddress, str]] = []

    @staticmethod
    def _key(step, layer, branch):
        return (int(step), layer, branch)

    def put(self, step: int, layer: LayerAddress, branch: str, probs: torch.Tensor) -> None:
        key = self._key(step, layer, branch)
        if key in self._mem or key in self._disk:
            raise ValueError(f"trace entry {key} already written")
        probs = probs.detach().clone()
        size = probs.numel() * probs.element_size()
        if self.memory_budget is not None and self._bytes + size > self.memory_budget:
            if self._spill_dir is None:
                self._spill_dir = tempfile.mkdtemp(prefix="sigstyle-trace-")
            path = os.path.join(self._spill_dir, f"{step}_{layer}_{branch}.npy")
            np.save(path, probs.cpu().numpy())
            self._disk[key] = path
        else:
            self._mem[key] = probs
            self._bytes += size

    def get(self, step: int, layer: LayerAddress, branch: str) -> torch.Tensor:
        key = self._key(step, layer, branch)
        self.reads.append(key)
        if key in self._mem:
            return self._mem[key]
        if key in self._disk:
            return torch.from_numpy(np.load(self._disk[key]))
        raise TraceGapError(f"no trace entry for step {step}, layer {layer}, branch {branch}")

    def peek(self, step, layer, branch) -> torch.Tensor:
        """Like ``get`` but not logged as a read."""
        key = self._key(step, layer, branch)
        if key in self._mem:
            return self._mem[key]
        if key in self._disk:
            return torch.from_numpy(np.load(self._disk[key]))
        raise TraceGapError(f"no trace entry for step {step}, layer {layer}, branch {branch}")

    def keys(self) -> list[tuple]:
        return sorted(list(self._mem) + list(self._disk), key=lambda k: (k[0], str(k[1]), k[2]))

    def __len__(self):
        return len(self._mem) + len(self._disk)

    def __contains__(self, key):
        return key in self._mem or key in self._disk

    @property
    def spilled(self) -> int:
        return len(self._disk)

    def close(self) -> None:
        if self._spill_dir is not None:
            shutil.rmtree(self._spill_dir, ignore_errors=True)
            self._spill_dir = None
            self._disk.clear()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def dump(self, directory) -> None:
        """Debug dump: one raw float file per entry plus ``index.json``."""
        os.makedirs(directory, exist_ok=True)
        index = {"meta": _jsonable(self.meta), "entries": []}
        for step, layer, branch in self.keys():
            arr = self.peek(step, layer, branch).cpu().numpy()
            name = f"step{step:04d}_{layer}_{branch}.bin"
            arr.astype(arr.dtype.newbyteorder("<")).tofile(os.path.join(directory, name))
            index["entries"].append({
                "step": step, "layer": str(layer), "branch": branch, "file": name,
                "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str,
            })
        with open(os.path.join(directory, "index.json"), "w") as fh:
            json.dump(index, fh, indent=1)

    @classmethod
    def load_dump(cls, directory) -> "AttentionTrace":
        with open(os.path.join(directory, "index.json")) as fh:
            index = json.load(fh)
        meta = index["meta"]
        meta["latent_shape"] = tuple(meta["latent_shape"])
        trace = cls(meta)
        for e in index["entries"]:
            arr = np.fromfile(os.path.join(directory, e["file"]), dtype=e["dtype"]).reshape(e["shape"])
            trace.put(e["step"], LayerAddress.parse(e["layer"]), e["branch"], torch.from_numpy(arr))
        return trace


def _jsonable(meta):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in meta.items()}


class RecordHooks:
    """Store maps of the planned layers for steps < k."""

    def __init__(self, trace: AttentionTrace, k: int, layers: Iterable[LayerAddress]):
        self.trace = trace
        self.k = k
        self.layers = frozenset(layers)

    def for_step(self, step, branch):
        if step >= self.k:
            return None

        def hook(layer, probs):
            if layer in self.layers:
                self.trace.put(step, layer, branch, probs)
            return probs

        return hook


def validate_map(traced: torch.Tensor, probs: torch.Tensor, layer, step) -> None:
    if tuple(traced.shape) != tuple(probs.shape):
        raise DimensionError(
            f"traced map for layer {layer} at step {step} has shape {tuple(traced.shape)}, "
            f"layer computes {tuple(probs.shape)}"
        )
    if bool((traced < 0).any()) or not bool(
        torch.allclose(traced.sum(-1), torch.ones((), dtype=traced.dtype), atol=ROW_SUM_TOL, rtol=0)
    ):
        raise TraceValidationError(f"traced map for layer {layer} at step {step} is not row-stochastic")


class InjectHooks:
    """Substitute traced maps for steps < k.

    ``branch_map`` names the trace branch each sampling branch reads from
    (identity unless the trace holds only the conditional branch).
    """

    def __init__(self, trace: AttentionTrace, plan: SwapPlan, layers: Iterable[LayerAddress],
                 branch_map: Optional[dict] = None):
        self.trace = trace
        self.plan = plan
        self.layers = frozenset(layers)
        self.branch_map = branch_map or {}
        self.injections: list[tuple[int, LayerAddress, str]] = []

    def for_step(self, step, branch):
        if step >= self.plan.k or branch not in self.plan.apply_to_branches:
            return None
        source = self.branch_map.get(branch, branch)

        def hook(layer, probs):
            if layer not in self.layers:
                return probs
            traced = self.trace.get(step, layer, source)
            validate_map(traced, probs, layer, step)
            self.injections.append((step, layer, branch))
            return traced.to(device=probs.device, dtype=probs.dtype)

        return hook


def new_trace(model: Backbone, cfg: SamplerConfig, plan: SwapPlan, memory_budget=None) -> AttentionTrace:
    return AttentionTrace(
        {
            "T": cfg.num_steps,
            "k_recorded": plan.k,
            "latent_shape": tuple(model.latent_shape),
            "guidance_scale": cfg.guidance_scale,
            "branches": list(cfg.branches),
        },
        memory_budget=memory_budget,
    )


def branch_mapping(trace: AttentionTrace, cfg: SamplerConfig, latent_shape) -> dict:
    """Check trace/config compatibility and return the branch map."""
    meta = trace.meta
    if meta["T"] != cfg.num_steps:
        raise TraceIncompatibleError(f"trace recorded with T={meta['T']}, sampling with T={cfg.num_steps}")
    if tuple(meta["latent_shape"]) != tuple(latent_shape):
        raise TraceIncompatibleError(
            f"trace latent shape {tuple(meta['latent_shape'])} != {tuple(latent_shape)}"
        )
    if meta["guidance_scale"] == cfg.guidance_scale:
        return {}
    if list(meta["branches"]) == ["cond"]:
        # conditional-only reconstruction feeds both guided branches
        return {"uncond": "cond"}
    raise TraceIncompatibleError(
        f"trace guidance {meta['guidance_scale']} incompatible with sampling guidance {cfg.guidance_scale}"
    )


@torch.no_grad()
def record_reconstruction(
    model_base: Backbone,
    z_T: torch.Tensor,
    content_text: TextEmbedding,
    cfg: SamplerConfig,
    plan: SwapPlan = SwapPlan(),
    inverted: Optional[Trajectory] = None,
    memory_budget: Optional[int] = None,
) -> tuple[AttentionTrace, Trajectory]:
    """Denoise the inverted content latent while recording attention maps."""
    from .ddim import ddim_sample

    plan.check(cfg.num_steps)
    if inverted is not None:
        check_guidance_match(inverted, cfg)
    layers = plan.resolve_layers(model_base)
    trace = new_trace(model_base, cfg, plan, memory_budget)
    traj = ddim_sample(model_base, z_T, content_text, cfg, hooks=RecordHooks(trace, plan.k, layers))
    return trace, traj


@torch.no_grad()
def stylized_generate(
    model_styled: Backbone,
    z_T: torch.Tensor,
    target_text: TextEmbedding,
    trace: AttentionTrace,
    plan: SwapPlan,
    cfg: SamplerConfig,
    latent_blend: Optional[Callable[[int, torch.Tensor], torch.Tensor]] = None,
    hooks_out: Optional[list] = None,
) -> Trajectory:
    """Personalized denoising with traced maps injected for steps < k."""
    from .ddim import ddim_sample

    plan.check(cfg.num_steps)
    if plan.k > trace.meta["k_recorded"]:
        raise TraceGapError(f"plan needs {plan.k} traced steps, trace holds {trace.meta['k_recorded']}")
    bmap = branch_mapping(trace, cfg, model_styled.latent_shape)
    hooks = InjectHooks(trace, plan, plan.resolve_layers(model_styled), bmap)
    if hooks_out is not None:
        hooks_out.append(hooks)
    return ddim_sample(model_styled, z_T, target_text, cfg, hooks=hooks, callback=latent_blend)


def mask_blend(mask: torch.Tensor, reconstruction: Trajectory):
    """Per-step blend ``m * z_styled + (1 - m) * z_recon`` against a recorded run."""

    def blend(step, z):
        return mask * z + (1 - mask) * reconstruction.latents[step + 1]

    return blend


@dataclass
class SwapRun:
    stylized: Trajectory
    reconstruction: Trajectory
    trace: AttentionTrace
    injector: InjectHooks
    meta: dict = field(default_factory=dict)


@torch.no_grad()
def lockstep_swap(
    model: Backbone,
    scope,
    z_T: torch.Tensor,
    content_text: TextEmbedding,
    target_text: TextEmbedding,
    cfg: SamplerConfig,
    plan: SwapPlan,
    recon_cfg: Optional[SamplerConfig] = None,
    blend_mask: Optional[torch.Tensor] = None,
    memory_budget: Optional[int] = None,
) -> SwapRun:
    """Run reconstruction and stylized branches step by step on one handle.

    ``scope`` is the styled model's :class:`~sigstyle.hypernet.PatchScope`
    (or None for an unpatched styled branch); it is suspended during each
    reconstruction step and resumed for the matching stylized step.
    """
    recon_cfg = recon_cfg or cfg
    if recon_cfg.num_steps != cfg.num_steps:
        raise ConfigurationError("both branches must use the same number of steps")
    plan.check(cfg.num_steps)
    layers = plan.resolve_layers(model)
    trace = new_trace(model, recon_cfg, plan, memory_budget)
    bmap = branch_mapping(trace, cfg, model.latent_shape)
    recorder = RecordHooks(trace, plan.k, layers)
    injector = InjectHooks(trace, plan, layers, bmap)

    if scope is not None:
        scope.suspend()
    recon = DenoiseStepper(model, content_text, recon_cfg)
    if scope is not None:
        scope.resume()
    styled = DenoiseStepper(model, target_text, cfg)
    z_r = z_s = _check_start(model, z_T)
    recon_lat, styled_lat = [z_r], [z_s]
    try:
        for s in range(cfg.num_steps):
            if scope is not None:
                scope.suspend()
            z_r = recon.step(s, z_r, recorder)
            if scope is not None:
                scope.resume()
            z_s = styled.step(s, z_s, injector)
            if blend_mask is not None:
                z_s = blend_mask * z_s + (1 - blend_mask) * z_r
            recon_lat.append(z_r)
            styled_lat.append(z_s)
    finally:
        if scope is not None and not scope.active:
            scope.resume()
    return SwapRun(
        Trajectory(styled_lat, list(styled.grid), "denoise", cfg.guidance_scale),
        Trajectory(recon_lat, list(recon.grid), "denoise", recon_cfg.guidance_scale),
        trace,
        injector,
    )
