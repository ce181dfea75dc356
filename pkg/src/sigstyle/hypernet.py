"""Hypernetwork that predicts additive offsets for attention projections.

Each targeted matrix W (dim_r x dim_c) owns a small parameter group::

    a = row_map * cons                    (dim_r,)
    b = col_map * cons                    (dim_c,)
    M = outer(a, b)
    M = M * col_scale + col_shift         per-column affine
    M = M * row_scale[:, None] + row_shift[:, None]   per-row affine
    dW = gate * M

and the patched weight is ``W + lam * dW``.  ``cons`` starts at 1 and
``gate`` at 0, so a fresh predictor is an exact no-op while every
parameter still receives gradient once the gate moves.  Before the shifts
dW has rank <= 1; the two affine shifts raise the bound to 3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np
import torch
from torch import nn

from .backbone.base import AttentionAddress, Backbone
from .errors import ConfigurationError, UnknownAddressError, UnknownTargetError

PARAM_NAMES = (
    "cons", "row_map", "col_map", "row_scale", "row_shift",
    "col_scale", "col_shift", "gate",
)
MAP_STD_GAIN = 1.0
AFFINE_NOISE = 0.01


class OffsetGroup(nn.Module):
    def __init__(self, dim_r: int, dim_c: int, generator: torch.Generator, dtype=torch.float64):
        super().__init__()

        def noise(n, std):
            return torch.randn(n, generator=generator, dtype=dtype) * std

        self.cons = nn.Parameter(torch.ones((), dtype=dtype))
        self.row_map = nn.Parameter(noise(dim_r, MAP_STD_GAIN / dim_r ** 0.5))
        self.col_map = nn.Parameter(noise(dim_c, MAP_STD_GAIN / dim_c ** 0.5))
        self.row_scale = nn.Parameter(1.0 + noise(dim_r, AFFINE_NOISE))
        self.row_shift = nn.Parameter(noise(dim_r, AFFINE_NOISE))
        self.col_scale = nn.Parameter(1.0 + noise(dim_c, AFFINE_NOISE))
        self.col_shift = nn.Parameter(noise(dim_c, AFFINE_NOISE))
        self.gate = nn.Parameter(torch.zeros((), dtype=dtype))

    def forward(self) -> torch.Tensor:
        a = self.row_map * self.cons
        b = self.col_map * self.cons
        m = torch.outer(a, b)
        m = m * self.col_scale + self.col_shift
        m = m * self.row_scale[:, None] + self.row_shift[:, None]
        return self.gate * m


def _module_key(addr_key: str) -> str:
    return addr_key.replace(".", "__")


class OffsetPredictor(nn.Module):
    """One :class:`OffsetGroup` per targeted attention projection."""

    def __init__(self, targets: Iterable[AttentionAddress], seed: int = 0, dtype=torch.float64):
        super().__init__()
        targets = list(targets)
        if not targets:
            raise ConfigurationError("offset predictor needs at least one target")
        keys = [a.key for a in targets]
        if len(set(keys)) != len(keys):
            raise ConfigurationError("duplicate offset targets")
        self.targets = targets
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        self.groups = nn.ModuleDict(
            {_module_key(a.key): OffsetGroup(a.dim_r, a.dim_c, g, dtype) for a in targets}
        )
        self._by_key = {a.key: a for a in targets}

    def group(self, addr) -> OffsetGroup:
        key = addr.key if isinstance(addr, AttentionAddress) else str(addr)
        if key not in self._by_key:
            raise UnknownTargetError(f"{key} is not a target of this predictor")
        return self.groups[_module_key(key)]

    def predict_offset(self, addr) -> torch.Tensor:
        return self.group(addr)()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- serialization ------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat ``{"<addr>/<param>": array}`` view used by checkpoints."""
        out = {}
        for a in self.targets:
            grp = self.group(a)
            for name in PARAM_NAMES:
                out[f"{a.key}/{name}"] = getattr(grp, name).detach().cpu().numpy().copy()
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        with torch.no_grad():
            for a in self.targets:
                grp = self.group(a)
                for name in PARAM_NAMES:
                    p = getattr(grp, name)
                    src = torch.as_tensor(np.asarray(arrays[f"{a.key}/{name}"]))
                    if tuple(src.shape) != tuple(p.shape):
                        raise ConfigurationError(
                            f"state for {a.key}/{name} has shape {tuple(src.shape)}, "
                            f"expected {tuple(p.shape)}"
                        )
                    p.copy_(src.to(p.dtype))

    @classmethod
    def from_state_arrays(cls, targets, arrays, dtype=torch.float64) -> "OffsetPredictor":
        p = cls(targets, seed=0, dtype=dtype)
        p.load_state_arrays(arrays)
        return p


def init_predictor(targets: Iterable[AttentionAddress], seed: int = 0, dtype=torch.float64) -> OffsetPredictor:
    return OffsetPredictor(targets, seed=seed, dtype=dtype)


def default_targets(model: Backbone) -> list[AttentionAddress]:
    """Decoder q/k/v projections of every self- and cross-attention layer."""
    return model.list_attention_addresses(region="decoder", projection=("query", "key", "value"))


@dataclass(frozen=True)
class OffsetConfig:
    lam: float = 1.0
    targets: Optional[tuple[AttentionAddress, ...]] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("offset strength must be >= 0")
        for a in self.targets or ():
            if a.region != "decoder" or a.projection == "output":
                raise ConfigurationError(
                    f"{a.key}: offsets only target decoder query/key/value projections"
                )


class PatchScope:
    """Live offset patches on a backbone; ``release()`` restores base weights.

    ``deltas`` holds the exact ``lam * dW`` matrices that were added.
    ``suspend``/``resume`` toggle the patches without recomputing them, which
    the lockstep transfer loop uses to alternate base and styled passes.
    """

    def __init__(self, model: Backbone, patched: dict[str, torch.Tensor], deltas: dict[str, torch.Tensor]):
        self.model = model
        self.patched = patched
        self.deltas = deltas
        self.active = False
        self.resume()

    def resume(self):
        for key, w in self.patched.items():
            self.model.patch_weight(key, w)
        self.active = True

    def suspend(self):
        for key in self.patched:
            self.model.unpatch_weight(key)
        self.active = False

    def release(self):
        if self.active:
            self.suspend()

    def delta(self, addr) -> torch.Tensor:
        key = addr.key if isinstance(addr, AttentionAddress) else str(addr)
        return self.deltas[key]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


def apply_offsets(
    model: Backbone,
    predictor: OffsetPredictor,
    cfg: OffsetConfig = OffsetConfig(),
    extra_deltas: Optional[Mapping[str, torch.Tensor]] = None,
) -> PatchScope:
    """Patch ``W + lam * dW`` onto every configured target.

    Autograd history is kept, so a loss computed under the scope
    differentiates into the predictor.  ``extra_deltas`` adds directly
    trained per-matrix deltas (the direct-decoder training mode).
    """
    targets = cfg.targets if cfg.targets is not None else predictor.targets
    patched, deltas = {}, {}
    for addr in targets:
        try:
            base_addr = model.address(addr.key)
        except UnknownAddressError:
            raise UnknownAddressError(f"model has no attention projection {addr.key}") from None
        delta = cfg.lam * predictor.predict_offset(addr).to(model.dtype)
        if extra_deltas and addr.key in extra_deltas:
            delta = delta + extra_deltas[addr.key].to(model.dtype)
        deltas[addr.key] = delta
        patched[addr.key] = model._base_weight(base_addr) + delta
    return PatchScope(model, patched, deltas)
