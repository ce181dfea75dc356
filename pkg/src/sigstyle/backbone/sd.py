"""Stable Diffusion (v1.x layout) adapter built on ``diffusers``.

Every attention module gets a processor that reads its projection weights
through :meth:`Backbone.effective_weight`, so patches are overlays and the
loaded parameters are never written.  Self-attention probabilities pass
through the active hook exactly as in the toy backbone.

Token overrides replace rows of the text encoder's input-embedding output
via a temporary forward hook, which keeps the tokenizer and vocabulary
untouched.
"""

from __future__ import annotations

import os
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

from ..errors import CapabilityError, ConfigurationError
from .base import AttentionAddress, Backbone, LayerAddress, NoiseSchedule, TextEmbedding, attention, override_positions

_REGION = {"down_blocks": "encoder", "mid_block": "middle", "up_blocks": "decoder"}
_REGION_ORDER = {"encoder": 0, "middle": 1, "decoder": 2}
_PROJ = {"query": "to_q", "key": "to_k", "value": "to_v", "output": "to_out"}
_WORD_SUFFIX = "</w>"


def _require_diffusers():
    try:
        import diffusers  # noqa: F401
        import transformers  # noqa: F401
    except ImportError as exc:
        raise CapabilityError(
            "the Stable Diffusion backbone needs 'diffusers' and 'transformers' "
            "(pip install 'artifact[sd]'); the toy backbone works without them"
        ) from exc


def _proj_module(attn, projection):
    mod = getattr(attn, _PROJ[projection])
    return mod[0] if projection == "output" else mod


class _HookedProcessor:
    """Attention processor reading overlay weights and exposing the map."""

    def __init__(self, backbone: "StableDiffusionBackbone", layer: LayerAddress):
        self.backbone = backbone
        self.layer = layer

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None,
                 *args, **kwargs):
        bb, layer = self.backbone, self.layer
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        ctx = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        if encoder_hidden_states is not None and attn.norm_cross:
            ctx = attn.norm_encoder_hidden_states(ctx)

        def w(p):
            return bb.effective_weight(bb._by_key[f"{layer}.{p}"])

        def lin(x, p):
            return F.linear(x, w(p), _proj_module(attn, p).bias)

        q, k, v = lin(hidden_states, "query"), lin(ctx, "key"), lin(ctx, "value")
        hook = bb._active_hook if layer.attn_kind == "self" else None
        out = torch.stack([
            attention(q[i], k[i], v[i], attn.heads, layer, hook) for i in range(q.shape[0])
        ])
        out = attn.to_out[1](lin(out, "output"))
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class StableDiffusionBackbone(Backbone):
    """UNet, VAE and CLIP text encoder of an SD 1.x checkpoint."""

    variant = "sd"

    def __init__(self, unet, vae, text_encoder, tokenizer, schedule: NoiseSchedule, model_id: str,
                 device=None, dtype=torch.float32):
        super().__init__()
        self.device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        self.dtype = dtype
        self.unet = self._place(unet)
        self.vae = self._place(vae)
        self.text_encoder = self._place(text_encoder)
        self.tokenizer = tokenizer
        self.schedule = schedule
        self.model_id = model_id
        self.embed_dim = int(text_encoder.config.hidden_size)
        self.max_tokens = int(min(tokenizer.model_max_length, text_encoder.config.max_position_embeddings))
        scale = 2 ** (len(vae.config.block_out_channels) - 1)
        size = int(unet.config.sample_size)
        self.latent_shape = (int(unet.config.in_channels), size, size)
        self.image_size = size * scale
        self.latent_scale = float(getattr(vae.config, "scaling_factor", 0.18215))
        self._active_hook = None
        self._modules_by_layer: dict[LayerAddress, torch.nn.Module] = {}
        self._discover()
        self.attention_inventory  # builds the key index the processors read
        self.unet.set_attn_processor(
            {f"{name}.processor": _HookedProcessor(self, layer) for layer, name in self._processor_names.items()}
        )

    def _place(self, module):
        module = module.to(self.device)
        if next(module.parameters()).dtype != self.dtype:
            module = module.to(self.dtype)
        return module.eval().requires_grad_(False)

    # -- construction --------------------------------------------------------
    @classmethod
    def from_pretrained(cls, weights_dir, device=None, dtype=None):
        """Load from a diffusers-layout directory (unet/, vae/, text_encoder/, tokenizer/, scheduler/)."""
        _require_diffusers()
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        if not weights_dir or not os.path.isdir(weights_dir):
            raise ConfigurationError(f"backbone directory {weights_dir!r} does not exist")
        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        dtype = dtype or (torch.float16 if str(device).startswith("cuda") else torch.float32)
        unet = UNet2DConditionModel.from_pretrained(weights_dir, subfolder="unet")
        vae = AutoencoderKL.from_pretrained(weights_dir, subfolder="vae")
        text = CLIPTextModel.from_pretrained(weights_dir, subfolder="text_encoder")
        tok = CLIPTokenizer.from_pretrained(weights_dir, subfolder="tokenizer")
        schedule = _schedule_from_dir(weights_dir)
        return cls(unet, vae, text, tok, schedule, model_id=f"sd:{os.path.basename(os.path.normpath(weights_dir))}",
                   device=device, dtype=dtype)

    def _discover(self):
        from diffusers.models.attention_processor import Attention

        found = []
        counters = {r: 0 for r in _REGION_ORDER}
        last_block = {}
        for name, mod in self.unet.named_modules():
            if not isinstance(mod, Attention) or not name.endswith(("attn1", "attn2")):
                continue
            region = _REGION[name.split(".")[0]]
            block_name = name.rsplit(".", 1)[0]
            if block_name not in last_block:
                last_block[block_name] = counters[region]
                counters[region] += 1
            kind = "self" if name.endswith("attn1") else "cross"
            found.append((region, last_block[block_name], kind, name, mod))
        found.sort(key=lambda r: (_REGION_ORDER[r[0]], r[1], r[2] != "self"))
        self._processor_names = {}
        for region, idx, kind, name, mod in found:
            layer = LayerAddress(region, idx, kind)
            self._modules_by_layer[layer] = mod
            self._processor_names[layer] = name

    # -- inventory / weights -------------------------------------------------
    def _inventory(self):
        inv = []
        for layer, mod in self._modules_by_layer.items():
            for proj in _PROJ:
                wt = _proj_module(mod, proj).weight
                inv.append(AttentionAddress(layer.region, layer.block_index, layer.attn_kind, proj,
                                            int(wt.shape[0]), int(wt.shape[1])))
        return inv

    def _base_weight(self, addr):
        return _proj_module(self._modules_by_layer[addr.layer], addr.projection).weight

    def parameter_snapshot(self):
        out = {}
        for prefix, mod in (("unet", self.unet), ("vae", self.vae), ("text", self.text_encoder)):
            out.update({f"{prefix}.{k}": v.detach().clone() for k, v in mod.state_dict().items()})
        return out

    # -- autoencoder -----------------------------------------------------------
    def _encode(self, image):
        dist = self.vae.encode((2 * image - 1)[None]).latent_dist
        return (dist.mode() * self.latent_scale)[0]

    def _decode(self, latent):
        x = self.vae.decode((latent / self.latent_scale)[None]).sample[0]
        return ((x.clamp(-1, 1) + 1) / 2).contiguous()

    # -- text ------------------------------------------------------------------
    def _ids(self, prompt):
        return self.tokenizer(
            prompt, padding="max_length", max_length=self.max_tokens, truncation=True
        ).input_ids

    def tokenize(self, prompt):
        toks = self.tokenizer.convert_ids_to_tokens(self._ids(prompt))
        return [t[: -len(_WORD_SUFFIX)] if t.endswith(_WORD_SUFFIX) else t for t in toks]

    def word_embedding(self, word):
        ids = self.tokenizer(word, add_special_tokens=False).input_ids
        table = self.text_encoder.get_input_embeddings().weight
        return table[torch.tensor(ids, device=table.device)].mean(0).detach().clone()

    def _embed(self, prompt, overrides: Mapping[str, torch.Tensor]):
        ids = self._ids(prompt)
        tokens = self.tokenize(prompt)
        positions = override_positions(tokens, overrides)
        emb_mod = self.text_encoder.get_input_embeddings()
        captured = {}

        def replace_rows(module, inputs, output):
            rows = list(output[0].unbind(0))
            for tok, pos in positions.items():
                vec = torch.as_tensor(overrides[tok]).to(output.device, output.dtype)
                for i in pos:
                    rows[i] = vec
            out = torch.stack(rows)[None]
            captured["emb"] = out[0]
            return out

        handle = emb_mod.register_forward_hook(replace_rows)
        try:
            ids_t = torch.tensor([ids], device=self.device)
            hidden = self.text_encoder(input_ids=ids_t).last_hidden_state[0]
        finally:
            handle.remove()
        return TextEmbedding(prompt, tuple(tokens), captured["emb"], hidden, tuple(overrides))

    # -- unet ----------------------------------------------------------------
    def _predict(self, latent, t, text, hooks):
        self._active_hook = hooks
        try:
            ts = torch.tensor([t], device=self.device)
            out = self.unet(latent[None], ts, encoder_hidden_states=text.hidden.to(self.dtype)[None]).sample
        finally:
            self._active_hook = None
        return out[0]


def _schedule_from_dir(weights_dir) -> NoiseSchedule:
    import json

    path = os.path.join(weights_dir, "scheduler", "scheduler_config.json")
    cfg = {}
    if os.path.exists(path):
        with open(path) as fh:
            cfg = json.load(fh)
    if cfg.get("beta_schedule", "scaled_linear") != "scaled_linear":
        raise ConfigurationError(f"unsupported beta schedule {cfg['beta_schedule']!r}")
    return NoiseSchedule.scaled_linear(
        cfg.get("num_train_timesteps", 1000), cfg.get("beta_start", 0.00085), cfg.get("beta_end", 0.012)
    )
