"""Adapter conformance on a tiny randomly initialised Stable Diffusion layout."""

import numpy as np
import pytest
import torch

pytest.importorskip("diffusers")
pytest.importorskip("transformers")

from diffusers.models.attention_processor import AttnProcessor  # noqa: E402
from tiny_sd import tiny_sd_backbone  # noqa: E402

from sigstyle.backbone.sd import StableDiffusionBackbone  # noqa: E402
from sigstyle.checkpoint import identity_checkpoint  # noqa: E402
from sigstyle.ddim import SamplerConfig  # noqa: E402
from sigstyle.hypernet import apply_offsets, default_targets, init_predictor  # noqa: E402
from sigstyle.swap import SwapPlan, lockstep_swap, record_reconstruction, stylized_generate  # noqa: E402

T = 4


@pytest.fixture(scope="module")
def sd():
    return tiny_sd_backbone(0)


def _z(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(model.latent_shape, generator=g).to(model.dtype)


def _perturbed(model, seed=1):
    pred = init_predictor(default_targets(model), seed=seed, dtype=model.dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in pred.parameters():
            p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return pred


class TestInventory:
    def test_layers_and_targets(self, sd):
        layers = [str(l) for l in sd.self_attention_layers()]
        assert layers == ["encoder.0.self", "middle.0.self", "decoder.0.self", "decoder.1.self"]
        assert len(sd.attention_inventory) == 8 * 4
        targets = default_targets(sd)
        assert len(targets) == 2 * 2 * 3 and {a.region for a in targets} == {"decoder"}
        cross_k = sd.address("decoder.0.cross.key")
        assert cross_k.dim_c == sd.embed_dim

    def test_sizes(self, sd):
        assert sd.image_size == 16 and sd.latent_shape == (4, 8, 8)


class TestForward:
    def test_matches_stock_processor(self, sd):
        ref = tiny_sd_backbone(0)
        ref.unet.set_attn_processor(AttnProcessor())
        text = sd.embed_prompt("a photo")
        z = _z(sd)
        with torch.no_grad():
            ours = sd.predict_noise(z, 500, text)
            stock = ref.unet(z[None], torch.tensor([500]), encoder_hidden_states=text.hidden[None]).sample[0]
        np.testing.assert_allclose(ours.numpy(), stock.numpy(), rtol=1e-4, atol=1e-5)

    def test_identity_hook_is_transparent(self, sd):
        text = sd.embed_prompt("a photo")
        seen = []

        def hook(layer, probs):
            seen.append(layer)
            return probs

        with torch.no_grad():
            a = sd.predict_noise(_z(sd), 300, text)
            b = sd.predict_noise(_z(sd), 300, text, hook)
        assert torch.equal(a, b)
        assert seen == sd.self_attention_layers()

    def test_patch_is_overlay(self, sd):
        before = sd.parameter_snapshot()
        text = sd.embed_prompt("a photo")
        with torch.no_grad():
            base = sd.predict_noise(_z(sd), 300, text)
            with apply_offsets(sd, _perturbed(sd)):
                patched = sd.predict_noise(_z(sd), 300, text)
            after = sd.predict_noise(_z(sd), 300, text)
        assert not torch.equal(base, patched)
        assert torch.equal(base, after)
        assert all(torch.equal(v, sd.parameter_snapshot()[k]) for k, v in before.items())

    def test_token_override(self, sd):
        assert sd.tokenize("a photo")[:3] == ["<|startoftext|>", "a", "photo"]
        vec = torch.full((sd.embed_dim,), 0.5)
        plain = sd.embed_prompt("a photo of *")
        over = sd.embed_prompt("a photo of *", {"*": vec})
        pos = sd.tokenize("a photo of *").index("*")
        assert torch.equal(over.token_embeddings[pos], vec)
        assert torch.equal(over.token_embeddings[:pos], plain.token_embeddings[:pos])
        assert not torch.equal(over.hidden, plain.hidden)

    def test_round_trip_shapes(self, sd):
        img = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            z = sd.encode_image(img)
            out = sd.decode_latent(z)
        assert z.shape == sd.latent_shape and out.shape == (3, 16, 16)
        assert float(out.min()) >= 0 and float(out.max()) <= 1


class TestSwapOnSD:
    def test_full_swap_identity(self, sd):
        cfg = SamplerConfig(num_steps=T)
        text = sd.embed_prompt("a photo")
        with torch.no_grad():
            trace, recon = record_reconstruction(sd, _z(sd), text, cfg, SwapPlan(k=T))
            out = stylized_generate(sd, _z(sd), text, trace, SwapPlan(k=T), cfg)
        assert len(trace) == T * 4
        assert torch.equal(out.final, recon.final)

    def test_lockstep_matches_replay(self, sd):
        cfg = SamplerConfig(num_steps=T, guidance_scale=3.0)
        plan = SwapPlan(k=2)
        content, target = sd.embed_prompt("a photo"), sd.embed_prompt("a photo in the style of art")
        with torch.no_grad():
            scope = apply_offsets(sd, _perturbed(sd))
            try:
                run = lockstep_swap(sd, scope, _z(sd, 2), content, target, cfg, plan)
                scope.suspend()
                trace, _ = record_reconstruction(sd, _z(sd, 2), content, cfg, plan)
                scope.resume()
                styled = stylized_generate(sd, _z(sd, 2), target, trace, plan, cfg)
            finally:
                scope.release()
        assert torch.equal(run.stylized.final, styled.final)

    def test_identity_checkpoint_fits(self, sd):
        ck = identity_checkpoint(sd)
        ck.check_compatible(sd)
        assert ck.token(sd).shape == (sd.embed_dim,)


def test_from_pretrained_directory(sd, tmp_path):
    sd.unet.save_pretrained(tmp_path / "unet")
    sd.vae.save_pretrained(tmp_path / "vae")
    sd.text_encoder.save_pretrained(tmp_path / "text_encoder")
    sd.tokenizer.save_pretrained(tmp_path / "tokenizer")
    loaded = StableDiffusionBackbone.from_pretrained(str(tmp_path), device="cpu")
    assert loaded.model_id == f"sd:{tmp_path.name}"
    text = sd.embed_prompt("a photo")
    with torch.no_grad():
        a = sd.predict_noise(_z(sd), 100, text)
        b = loaded.predict_noise(_z(sd), 100, loaded.embed_prompt("a photo"))
    np.testing.assert_allclose(a.numpy(), b.numpy(), rtol=1e-5, atol=1e-6)
