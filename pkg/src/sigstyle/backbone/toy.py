"""Deterministic toy backbone for CPU-only verification.

Architecture (fixed-seed initialization, float64 throughout):

* autoencoder: 4x4 RGB patches projected onto a fixed orthonormal 4-vector
  basis (three per-channel means plus one texture direction), so a 64x64
  image maps to a 4x16x16 latent and decoding is the transposed map.
* text encoder: hashed vocabulary of 1000 rows (width 32), learned-position
  table, then ``tanh(layernorm(e + p) @ W)`` to a 24-wide context.  Prompts
  are not padded, so the context length is ``len(tokens) + 2`` (max 16).
* UNet, two resolution levels (16 channels at 16x16, 32 at 8x8)::

      encoder.0 (16x16)  ResBlock + transformer block
      encoder.1 (8x8)    downsample, ResBlock + transformer block
      middle.0, middle.1 (8x8)  ResBlock + transformer block, twice
      decoder.0 (8x8)    concat skip, ResBlock + transformer block
      decoder.1 (16x16)  upsample, concat skip, ResBlock + transformer block

  Each transformer block holds one self- and one cross-attention layer with
  two heads, so every region has 2 self + 2 cross attention layers and the
  inventory has 6 * 2 * 4 = 48 projection matrices.  Decoder q/k/v: 12.
"""

from __future__ import annotations

import math
import re
import zlib
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .base import (
    AttentionAddress,
    Backbone,
    LayerAddress,
    NoiseSchedule,
    TextEmbedding,
    attention,
    override_positions,
)

IMAGE_SIZE = 64
PATCH = 4
LATENT_CHANNELS = 4
LATENT_SIZE = IMAGE_SIZE // PATCH
EMBED_DIM = 32
CONTEXT_DIM = 24
MAX_TOKENS = 16
VOCAB = 1000
HEADS = 2
TEMB_DIM = 32
LATENT_SCALE = 0.5
# damps d(eps)/dz so DDIM inversion at T=50 stays within ~0.5 dB of the autoencoder
OUT_GAIN = 0.5
# (region, block_index, channels) in forward-execution order
BLOCKS = (
    ("encoder", 0, 16),
    ("encoder", 1, 32),
    ("middle", 0, 32),
    ("middle", 1, 32),
    ("decoder", 0, 32),
    ("decoder", 1, 16),
)
_PROJ_ATTR = {"query": "to_q", "key": "to_k", "value": "to_v", "output": "to_out"}
_TOKEN_RE = re.compile(r"\*|[a-z0-9]+|[^\sa-z0-9]")
SPECIAL = ("<bos>", "<eos>", "<pad>")


def toy_tokenize(prompt: str) -> list[str]:
    return _TOKEN_RE.findall(prompt.lower())


def _vocab_id(token: str) -> int:
    if token in SPECIAL:
        return SPECIAL.index(token)
    return len(SPECIAL) + zlib.crc32(token.encode("utf-8")) % (VOCAB - len(SPECIAL))


class _Attention(nn.Module):
    def __init__(self, query_dim, context_dim):
        super().__init__()
        self.to_q = nn.Parameter(torch.empty(query_dim, query_dim))
        self.to_k = nn.Parameter(torch.empty(query_dim, context_dim))
        self.to_v = nn.Parameter(torch.empty(query_dim, context_dim))
        self.to_out = nn.Parameter(torch.empty(query_dim, query_dim))
        self.out_bias = nn.Parameter(torch.zeros(query_dim))
        for w in (self.to_q, self.to_k, self.to_v, self.to_out):
            nn.init.normal_(w, std=1.0 / math.sqrt(w.shape[1]))


class _ResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(TEMB_DIM, cout)
        self.norm2 = nn.GroupNorm(4, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class _TransformerBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm = nn.GroupNorm(4, channels)
        self.proj_in = nn.Linear(channels, channels)
        self.ln1 = nn.LayerNorm(channels)
        self.attn1 = _Attention(channels, channels)
        self.ln2 = nn.LayerNorm(channels)
        self.attn2 = _Attention(channels, CONTEXT_DIM)
        self.ln3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(
            nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels)
        )
        self.proj_out = nn.Linear(channels, channels)


class _ToyNet(nn.Module):
    def __init__(self):
        super().__init__()
        # text encoder
        self.token_table = nn.Parameter(0.5 * torch.randn(VOCAB, EMBED_DIM))
        self.position_table = nn.Parameter(0.1 * torch.randn(MAX_TOKENS, EMBED_DIM))
        self.text_norm = nn.LayerNorm(EMBED_DIM)
        self.text_proj = nn.Linear(EMBED_DIM, CONTEXT_DIM)
        # unet
        self.time_mlp = nn.Sequential(
            nn.Linear(TEMB_DIM, TEMB_DIM), nn.SiLU(), nn.Linear(TEMB_DIM, TEMB_DIM)
        )
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, 16, 3, padding=1)
        self.down = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.up = nn.Conv2d(32, 16, 3, padding=1)
        self.res = nn.ModuleList(
            [
                _ResBlock(16, 16),
                _ResBlock(32, 32),
                _ResBlock(32, 32),
                _ResBlock(32, 32),
                _ResBlock(64, 32),
                _ResBlock(32, 16),
            ]
        )
        self.blocks = nn.ModuleList([_TransformerBlock(c) for _, _, c in BLOCKS])
        self.norm_out = nn.GroupNorm(4, 16)
        self.conv_out = nn.Conv2d(16, LATENT_CHANNELS, 3, padding=1)
        with torch.no_grad():
            self.conv_out.weight.mul_(OUT_GAIN)
            self.conv_out.bias.mul_(OUT_GAIN)


def _timestep_embedding(t: int, dim: int, dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = float(t) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


def _patch_basis(seed: int) -> torch.Tensor:
    """Orthonormal (48, 4) basis over flattened (3, 4, 4) patches."""
    n = 3 * PATCH * PATCH
    cols = []
    for c in range(3):
        v = torch.zeros(3, PATCH, PATCH, dtype=torch.float64)
        v[c] = 1.0
        cols.append(v.flatten())
    g = torch.Generator().manual_seed(seed)
    cols.append(torch.randn(n, generator=g, dtype=torch.float64))
    basis, _ = torch.linalg.qr(torch.stack(cols, dim=1))
    # qr may flip signs; pin the mean columns to positive orientation
    signs = torch.sign(basis.sum(dim=0))
    signs[signs == 0] = 1
    return basis * signs


class ToyBackbone(Backbone):
    """Small, deterministic stand-in for Stable Diffusion.

    Two handles built with the same ``seed`` hold bitwise-identical weights.
    """

    variant = "toy"
    image_size = IMAGE_SIZE
    latent_shape = (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE)
    embed_dim = EMBED_DIM
    dtype = torch.float64
    heads = HEADS
    max_tokens = MAX_TOKENS

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        self.model_id = f"toy-unet-v1-seed{seed}"
        self.schedule = NoiseSchedule.scaled_linear()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            prev = torch.get_default_dtype()
            torch.set_default_dtype(torch.float64)
            try:
                self.net = _ToyNet()
            finally:
                torch.set_default_dtype(prev)
        self.net.requires_grad_(False)
        self.net.eval()
        self._basis = _patch_basis(seed + 1)
        self._layer_modules = {
            LayerAddress(region, idx, kind): getattr(block, "attn1" if kind == "self" else "attn2")
            for (region, idx, _), block in zip(BLOCKS, self.net.blocks)
            for kind in ("self", "cross")
        }

    # -- inventory / weights -------------------------------------------------
    def _inventory(self):
        inv = []
        for layer, mod in self._layer_modules.items():
            for proj, attr in _PROJ_ATTR.items():
                w = getattr(mod, attr)
                inv.append(AttentionAddress(layer.region, layer.block_index, layer.attn_kind,
                                            proj, w.shape[0], w.shape[1]))
        return inv

    def _base_weight(self, addr):
        return getattr(self._layer_modules[addr.layer], _PROJ_ATTR[addr.projection])

    def parameter_snapshot(self):
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    # -- autoencoder ---------------------------------------------------------
    def _encode(self, image):
        x = 2.0 * image - 1.0
        patches = x.reshape(3, LATENT_SIZE, PATCH, LATENT_SIZE, PATCH)
        patches = patches.permute(1, 3, 0, 2, 4).reshape(LATENT_SIZE, LATENT_SIZE, -1)
        z = patches @ self._basis * LATENT_SCALE
        return z.permute(2, 0, 1).contiguous()

    def _decode(self, latent):
        z = latent.permute(1, 2, 0) / LATENT_SCALE
        patches = z @ self._basis.T
        x = patches.reshape(LATENT_SIZE, LATENT_SIZE, 3, PATCH, PATCH)
        x = x.permute(2, 0, 3, 1, 4).reshape(3, IMAGE_SIZE, IMAGE_SIZE)
        return ((x.clamp(-1.0, 1.0) + 1.0) / 2.0).contiguous()

    # -- text ------------------------------------------------------------------
    def tokenize(self, prompt):
        body = toy_tokenize(prompt)[: MAX_TOKENS - 2]
        return ["<bos>", *body, "<eos>"]

    def word_embedding(self, word):
        rows = [self.net.token_table[_vocab_id(t)] for t in toy_tokenize(word)]
        return torch.stack(rows).mean(dim=0).detach().clone()

    def _embed(self, prompt, overrides: Mapping[str, torch.Tensor]):
        tokens = self.tokenize(prompt)
        positions = override_positions(tokens, overrides)
        ids = torch.tensor([_vocab_id(t) for t in tokens])
        emb = self.net.token_table[ids]
        if overrides:
            rows = list(emb.unbind(0))
            for tok, pos in positions.items():
                vec = torch.as_tensor(overrides[tok]).to(self.dtype)
                for i in pos:
                    rows[i] = vec
            emb = torch.stack(rows)
        net = self.net
        pos = net.position_table[: len(tokens)]
        hidden = torch.tanh(net.text_proj(net.text_norm(emb + pos)))
        return TextEmbedding(prompt, tuple(tokens), emb, hidden, tuple(overrides))

    # -- unet ------------------------------------------------------------------
    def _transformer(self, i, x, context, hooks):
        region, idx, _ = BLOCKS[i]
        blk = self.net.blocks[i]
        c, h, w = x.shape
        tokens = blk.proj_in(blk.norm(x[None])[0].reshape(c, h * w).T)
        tokens = tokens + self._attend(LayerAddress(region, idx, "self"), blk.ln1(tokens), None, hooks)
        tokens = tokens + self._attend(LayerAddress(region, idx, "cross"), blk.ln2(tokens), context, None)
        tokens = tokens + blk.ff(blk.ln3(tokens))
        out = blk.proj_out(tokens).T.reshape(c, h, w)
        return x + out

    def _attend(self, layer, x, context, hooks):
        mod = self._layer_modules[layer]
        src = x if context is None else context
        w = {
            p: self.effective_weight(self._by_key[f"{layer}.{p}"])
            for p in _PROJ_ATTR
        }
        q = x @ w["query"].T
        k = src @ w["key"].T
        v = src @ w["value"].T
        out = attention(q, k, v, HEADS, layer, hooks if context is None else None)
        return out @ w["output"].T + mod.out_bias

    def _predict(self, latent, t, text, hooks):
        self.attention_inventory  # builds the key index used below
        net = self.net
        context = text.hidden.to(self.dtype)
        temb = net.time_mlp(_timestep_embedding(t, TEMB_DIM, self.dtype))
        h0 = net.conv_in(latent[None])[0]
        e0 = self._transformer(0, net.res[0](h0[None], temb)[0], context, hooks)
        d = net.down(e0[None])
        e1 = self._transformer(1, net.res[1](d, temb)[0], context, hooks)
        m = self._transformer(2, net.res[2](e1[None], temb)[0], context, hooks)
        m = self._transformer(3, net.res[3](m[None], temb)[0], context, hooks)
        u = torch.cat([m, e1])[None]
        d0 = self._transformer(4, net.res[4](u, temb)[0], context, hooks)
        up = net.up(F.interpolate(d0[None], scale_factor=2, mode="nearest"))
        u = torch.cat([up[0], e0])[None]
        d1 = self._transformer(5, net.res[5](u, temb)[0], context, hooks)
        return net.conv_out(F.silu(net.norm_out(d1[None])))[0]
