"""Backbone contract shared by the toy and Stable Diffusion adapters.

A backbone bundles the text encoder, the noise-predicting UNet with
addressable attention projections, the latent autoencoder and the noise
schedule.  Adapters implement the ``_encode``/``_decode``/``_embed``/
``_predict`` primitives; validation, weight patching and the attention
inventory live here so every adapter honours the same contract.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import torch

from ..errors import (
    DimensionError,
    NumericInputError,
    TimestepError,
    UnknownAddressError,
)

REGIONS = ("encoder", "middle", "decoder")
ATTN_KINDS = ("self", "cross")
PROJECTIONS = ("query", "key", "value", "output")

# hook(layer, probs) -> probs; probs has shape (heads, queries, keys)
AttentionHook = Callable[["LayerAddress", torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class LayerAddress:
    """One attention layer (all four of its projections)."""

    region: str
    block_index: int
    attn_kind: str

    def __str__(self):
        return f"{self.region}.{self.block_index}.{self.attn_kind}"

    @classmethod
    def parse(cls, text: str) -> "LayerAddress":
        try:
            region, block, kind = text.split(".")
            return cls(region, int(block), kind)
        except ValueError as exc:
            raise UnknownAddressError(f"malformed layer address {text!r}") from exc


@dataclass(frozen=True)
class AttentionAddress:
    """Stable identifier of one attention projection matrix.

    ``dim_r`` x ``dim_c`` is the matrix shape as stored (output features by
    input features).
    """

    region: str
    block_index: int
    attn_kind: str
    projection: str
    dim_r: int
    dim_c: int

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValueError(f"bad region {self.region!r}")
        if self.attn_kind not in ATTN_KINDS:
            raise ValueError(f"bad attention kind {self.attn_kind!r}")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"bad projection {self.projection!r}")
        if self.dim_r <= 0 or self.dim_c <= 0:
            raise ValueError("matrix dims must be positive")

    @property
    def layer(self) -> LayerAddress:
        return LayerAddress(self.region, self.block_index, self.attn_kind)

    @property
    def key(self) -> str:
        return f"{self.region}.{self.block_index}.{self.attn_kind}.{self.projection}"

    @property
    def shape(self) -> tuple[int, int]:
        return (self.dim_r, self.dim_c)

    def __str__(self):
        return self.key

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "block_index": self.block_index,
            "attn_kind": self.attn_kind,
            "projection": self.projection,
            "dim_r": self.dim_r,
            "dim_c": self.dim_c,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttentionAddress":
        return cls(
            d["region"], int(d["block_index"]), d["attn_kind"], d["projection"],
            int(d["dim_r"]), int(d["dim_c"]),
        )


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[t]`` for t = 0..N-1."""

    alpha_bar: torch.Tensor

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.ndim != 1 or ab.numel() < 2:
            raise ValueError("alpha_bar must be a 1-d tensor with >= 2 entries")
        if not bool(((ab > 0) & (ab <= 1)).all()):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if not bool((ab[1:] < ab[:-1]).all()):
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def num_train_steps(self) -> int:
        return int(self.alpha_bar.numel())

    @classmethod
    def scaled_linear(cls, num_train_steps=1000, beta_start=0.00085, beta_end=0.012):
        """Stable Diffusion's schedule: betas linear in sqrt space."""
        betas = torch.linspace(
            beta_start ** 0.5, beta_end ** 0.5, num_train_steps, dtype=torch.float64
        ) ** 2
        return cls(torch.cumprod(1.0 - betas, dim=0))

    def check_timestep(self, t) -> int:
        ti = int(t)
        if ti != t or not 0 <= ti < self.num_train_steps:
            raise TimestepError(
                f"timestep {t!r} outside [0, {self.num_train_steps - 1}]"
            )
        return ti

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, t: int) -> torch.Tensor:
        ab = self.alpha_bar[self.check_timestep(t)].to(z0.dtype)
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


@dataclass(eq=False)
class TextEmbedding:
    """Encoded prompt.

    ``token_embeddings`` is the per-position input embedding sequence (where
    token overrides land verbatim); ``hidden`` is the text-encoder output the
    UNet cross-attends to.
    """

    prompt: str
    tokens: tuple[str, ...]
    token_embeddings: torch.Tensor
    hidden: torch.Tensor
    overrides: tuple[str, ...] = field(default=())


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    layer: Optional[LayerAddress] = None,
    hook: Optional[AttentionHook] = None,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention with an observable map.

    ``q`` is (Nq, inner), ``k``/``v`` are (Nk, inner).  The probability map
    ``softmax(q k^T / sqrt(d))`` (d = per-head width) is passed through
    ``hook`` before it multiplies the values, so a hook may record it or
    substitute another map.
    """
    nq, inner = q.shape
    nk = k.shape[0]
    dh = inner // heads
    qh = q.reshape(nq, heads, dh).transpose(0, 1)
    kh = k.reshape(nk, heads, dh).transpose(0, 1)
    vh = v.reshape(nk, heads, dh).transpose(0, 1)
    scores = torch.matmul(qh, kh.transpose(1, 2)) / math.sqrt(dh)
    probs = torch.softmax(scores, dim=-1)
    if hook is not None:
        probs = hook(layer, probs)
    out = torch.matmul(probs, vh)
    return out.transpose(0, 1).reshape(nq, inner)


class Backbone:
    """Base class for latent diffusion backbones (the model handle).

    Subclasses set ``variant``, ``model_id``, ``image_size``,
    ``latent_shape``, ``schedule``, ``embed_dim`` and ``dtype`` and provide
    ``_inventory``, ``_base_weight`` and the four forward primitives.

    Weight patches are overlays: the persisted base parameters are never
    written, and the forward pass reads ``effective_weight`` instead.
    A handle is single-writer; patching and inference take the same lock.
    """

    variant: str
    model_id: str
    image_size: int
    latent_shape: tuple[int, int, int]
    schedule: NoiseSchedule
    embed_dim: int
    dtype: torch.dtype = torch.float32
    device: torch.device = torch.device("cpu")

    def __init__(self):
        self._patches: dict[str, torch.Tensor] = {}
        self._lock = threading.RLock()
        self._inventory_cache: Optional[list[AttentionAddress]] = None
        self._by_key: dict[str, AttentionAddress] = {}

    # -- inventory ---------------------------------------------------------
    def _inventory(self) -> list[AttentionAddress]:
        raise NotImplementedError

    @property
    def attention_inventory(self) -> list[AttentionAddress]:
        if self._inventory_cache is None:
            inv = list(self._inventory())
            keys = [a.key for a in inv]
            if not inv or len(set(keys)) != len(keys):
                raise RuntimeError("attention inventory must be non-empty and unique")
            self._inventory_cache = inv
            self._by_key = {a.key: a for a in inv}
        return list(self._inventory_cache)

    def list_attention_addresses(
        self,
        region: Optional[str] = None,
        attn_kind: Optional[str] = None,
        projection: Optional[str | Iterable[str]] = None,
    ) -> list[AttentionAddress]:
        """Inventory entries matching every given filter, in forward order."""
        if isinstance(projection, str):
            projection = (projection,)
        projs = None if projection is None else set(projection)
        return [
            a
            for a in self.attention_inventory
            if (region is None or a.region == region)
            and (attn_kind is None or a.attn_kind == attn_kind)
            and (projs is None or a.projection in projs)
        ]

    def address(self, key: str | AttentionAddress) -> AttentionAddress:
        if isinstance(key, AttentionAddress):
            key = key.key
        self.attention_inventory
        try:
            return self._by_key[key]
        except KeyError:
            raise UnknownAddressError(f"no attention projection {key!r}") from None

    def self_attention_layers(self) -> list[LayerAddress]:
        """Self-attention layers in forward-execution (hook) order."""
        seen: dict[LayerAddress, None] = {}
        for a in self.attention_inventory:
            if a.attn_kind == "self":
                seen.setdefault(a.layer)
        return list(seen)

    # -- weights -----------------------------------------------------------
    def _base_weight(self, addr: AttentionAddress) -> torch.Tensor:
        raise NotImplementedError

    def effective_weight(self, addr: AttentionAddress) -> torch.Tensor:
        patched = self._patches.get(addr.key)
        return self._base_weight(addr) if patched is None else patched

    def read_weight(self, addr) -> torch.Tensor:
        addr = self.address(addr)
        with self._lock:
            return self.effective_weight(addr).detach().clone()

    def patch_weight(self, addr, matrix: torch.Tensor) -> None:
        """Overlay ``matrix`` on the weight at ``addr``.

        The matrix is stored as given (autograd history included) so that
        gradients reach whatever produced it.
        """
        addr = self.address(addr)
        matrix = torch.as_tensor(matrix)
        if tuple(matrix.shape) != addr.shape:
            raise DimensionError(
                f"patch for {addr.key} has shape {tuple(matrix.shape)}, expected {addr.shape}"
            )
        if not bool(torch.isfinite(matrix).all()):
            raise NumericInputError(f"patch for {addr.key} contains non-finite values")
        with self._lock:
            self._patches[addr.key] = matrix.to(device=self.device, dtype=self.dtype)

    def unpatch_weight(self, addr) -> None:
        addr = self.address(addr)
        with self._lock:
            self._patches.pop(addr.key, None)

    def clear_patches(self) -> None:
        with self._lock:
            self._patches.clear()

    @property
    def patched_keys(self) -> list[str]:
        return list(self._patches)

    def parameter_snapshot(self) -> dict[str, torch.Tensor]:
        """Detached copies of every persisted backbone parameter."""
        raise NotImplementedError

    # -- forward primitives --------------------------------------------------
    def _encode(self, image: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _decode(self, latent: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _embed(self, prompt: str, overrides: Mapping[str, torch.Tensor]) -> TextEmbedding:
        raise NotImplementedError

    def _predict(self, latent, t: int, text: TextEmbedding, hooks) -> torch.Tensor:
        raise NotImplementedError

    def tokenize(self, prompt: str) -> list[str]:
        raise NotImplementedError

    def word_embedding(self, word: str) -> torch.Tensor:
        """Input embedding of ``word`` (mean over sub-tokens if it splits)."""
        raise NotImplementedError

    # -- public operations -----------------------------------------------
    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """RGB image (3, H, W) in [0, 1] -> latent grid (posterior mode)."""
        image = torch.as_tensor(image)
        expected = (3, self.image_size, self.image_size)
        if tuple(image.shape) != expected:
            raise DimensionError(f"image shape {tuple(image.shape)}, expected {expected}")
        _check_finite(image, "image")
        with self._lock, torch.no_grad():
            return self._encode(image.to(self.device, self.dtype))

    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent grid -> RGB image (3, H, W) in [0, 1]."""
        latent = self._check_latent(latent)
        with self._lock, torch.no_grad():
            return self._decode(latent)

    def embed_prompt(
        self, prompt: str, token_overrides: Optional[Mapping[str, torch.Tensor]] = None
    ) -> TextEmbedding:
        overrides = dict(token_overrides or {})
        for tok, vec in overrides.items():
            if tuple(torch.as_tensor(vec).shape) != (self.embed_dim,):
                raise DimensionError(
                    f"override for {tok!r} has shape {tuple(torch.as_tensor(vec).shape)}, "
                    f"expected ({self.embed_dim},)"
                )
        with self._lock:
            return self._embed(prompt, overrides)

    def predict_noise(
        self,
        latent: torch.Tensor,
        t: int,
        text: TextEmbedding,
        hooks: Optional[AttentionHook] = None,
    ) -> torch.Tensor:
        """Noise estimate for ``latent`` at timestep ``t``.

        ``hooks`` is called once per self-attention layer, in the order of
        ``self_attention_layers()``.
        """
        t = self.schedule.check_timestep(t)
        latent = self._check_latent(latent)
        with self._lock:
            return self._predict(latent, t, text, hooks)

    def _check_latent(self, latent) -> torch.Tensor:
        latent = torch.as_tensor(latent)
        if tuple(latent.shape) != tuple(self.latent_shape):
            raise DimensionError(
                f"latent shape {tuple(latent.shape)}, expected {tuple(self.latent_shape)}"
            )
        _check_finite(latent, "latent")
        return latent.to(self.device, self.dtype)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericInputError(f"{what} contains NaN or inf")


def override_positions(tokens: Sequence[str], overrides: Mapping[str, object]) -> dict[str, list[int]]:
    """Positions of each override token; raises if one is absent."""
    from ..errors import UnknownTokenError

    out = {}
    for tok in overrides:
        pos = [i for i, t in enumerate(tokens) if t == tok]
        if not pos:
            raise UnknownTokenError(f"override token {tok!r} does not occur in the prompt")
        out[tok] = pos
    return out
