import json

import numpy as np
import pytest
import torch

from oracles import GRAM_HAND_F, GRAM_HAND_G, PUBLISHED_LPIPS, PUBLISHED_STYLE_LOSS, gram_numpy
from sigstyle.apps import TransferConfig
from sigstyle.checkpoint import identity_checkpoint
from sigstyle.ddim import SamplerConfig
from sigstyle.errors import CapabilityError, DimensionError, SigStyleError
from sigstyle.metrics import (
    REFERENCE_LPIPS,
    REFERENCE_STYLE_LOSS,
    LpipsAdapter,
    MetricsReport,
    MetricsRow,
    StyleEntry,
    ToyFeatureExtractor,
    ToyLPIPS,
    evaluate_suite,
    gram,
    layer_grams,
    perceptual_distance,
    read_rows,
    style_loss,
    write_rows,
)
from sigstyle.plotting import render_loss_curve, render_report_figure
from sigstyle.swap import SwapPlan


class TestGram:
    def test_hand_case(self):
        np.testing.assert_allclose(gram(torch.tensor(GRAM_HAND_F)).numpy(), GRAM_HAND_G, rtol=0, atol=0)

    def test_matches_numpy_and_is_psd(self, rng):
        f = rng.standard_normal((6, 5, 7))
        g = gram(torch.tensor(f)).numpy()
        np.testing.assert_allclose(g, gram_numpy(f.reshape(6, -1)), rtol=1e-12)
        np.testing.assert_array_equal(g, g.T)
        assert np.linalg.eigvalsh(g).min() > -1e-12

    def test_constant_map(self):
        g = gram(torch.full((3, 4, 4), 2.0, dtype=torch.float64))
        np.testing.assert_allclose(g.numpy(), np.full((3, 3), 4.0 / 3.0))

    @pytest.mark.parametrize("shape", [(0, 4), (3, 0), (2, 0, 0), (5,)])
    def test_empty_or_bad(self, shape):
        with pytest.raises(DimensionError):
            gram(torch.zeros(shape))


class TestStyleLoss:
    def test_identity_and_symmetry(self, test_images):
        a, b = test_images["astronaut"], test_images["coffee"]
        assert style_loss(a, a) == 0.0
        assert style_loss(a, b) == style_loss(b, a)
        assert style_loss(a, b) > 0

    def test_recompute_from_dumped_grams(self, test_images, tmp_path):
        a, b = test_images["chelsea"], test_images["rocket"]
        ext = ToyFeatureExtractor()
        for name, img in (("a", a), ("b", b)):
            np.savez(tmp_path / f"{name}.npz", *[g.numpy() for g in layer_grams(img, ext)])
        ga, gb = np.load(tmp_path / "a.npz"), np.load(tmp_path / "b.npz")
        expected = sum(((ga[k] - gb[k]) ** 2).mean() for k in ga.files)
        assert abs(style_loss(a, b, ext) - expected) <= 1e-6

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            style_loss(torch.zeros(3, 64, 64), torch.zeros(3, 32, 32))

    def test_extractor_is_seeded(self, test_images):
        img = test_images["coffee"]
        for fa, fb in zip(ToyFeatureExtractor(3)(img), ToyFeatureExtractor(3)(img)):
            assert torch.equal(fa, fb)


class TestPerceptual:
    def test_properties(self, test_images):
        a, b = test_images["astronaut"], test_images["immunohistochemistry"]
        assert perceptual_distance(a, a) == 0.0
        assert perceptual_distance(a, b) == pytest.approx(perceptual_distance(b, a), rel=1e-12)
        assert perceptual_distance(a, b) > 0

    @pytest.mark.parametrize("name", ["astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry"])
    def test_monotone_under_noise(self, test_images, name):
        img = test_images[name]
        g = torch.Generator().manual_seed(0)
        noise = torch.randn(img.shape, generator=g, dtype=img.dtype)
        metric = ToyLPIPS()
        d = [metric(img, (img + s * noise).clamp(0, 1)) for s in (0.02, 0.1, 0.3)]
        assert d[0] < d[1] < d[2]

    def test_lpips_adapter_missing(self):
        try:
            import lpips  # noqa: F401
        except ImportError:
            with pytest.raises(CapabilityError):
                LpipsAdapter()
        else:
            pytest.skip("lpips is installed")


class TestReport:
    def test_csv_round_trip(self, tmp_path):
        rows = [MetricsRow("a", "s", 0.1, 0.2, 0.3), MetricsRow("b", "s", error="boom")]
        write_rows(rows, tmp_path / "r.csv")
        back = read_rows(tmp_path / "r.csv")
        assert back[0] == rows[0]
        assert back[1].error == "boom" and not back[1].ok

    def test_summary_and_figure(self, tmp_path):
        rows = [MetricsRow(c, s, i + 1.0, 0.5, 0.25) for i, (c, s) in enumerate([("a", "x"), ("a", "y"), ("b", "x")])]
        rows.append(MetricsRow("b", "y", error="failed"))
        rep = MetricsReport(rows, {"k": 5})
        agg = rep.aggregates
        assert agg["mean_style_loss"] == 2.0 and agg["failed_pairs"] == 1 and agg["pairs"] == 4
        rep.write(tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["reference"]["style_loss"] == REFERENCE_STYLE_LOSS == PUBLISHED_STYLE_LOSS
        assert summary["reference"]["lpips"] == REFERENCE_LPIPS == PUBLISHED_LPIPS
        render_report_figure(rep, tmp_path / "metrics.png")
        first = (tmp_path / "metrics.png").read_bytes()
        render_report_figure(rep, tmp_path / "metrics.png")
        assert first[:8] == b"\x89PNG\r\n\x1a\n"
        assert first == (tmp_path / "metrics.png").read_bytes()

    def test_loss_curve(self, tmp_path):
        render_loss_curve(list(np.linspace(1, 0, 50)), tmp_path / "loss.png")
        assert (tmp_path / "loss.png").stat().st_size > 0


def _suite_cfg(**kw):
    return TransferConfig(sampler=SamplerConfig(num_steps=5), swap=SwapPlan(k=2), caption="a photo", **kw)


@pytest.fixture(scope="module")
def styles(toy, trained, style_image):
    return [
        StyleEntry("trained", trained["ckpt"], style_image),
        StyleEntry("identity", identity_checkpoint(toy, seed=0), style_image),
        StyleEntry("noimage", identity_checkpoint(toy, seed=1), None),
    ]


class TestEvaluateSuite:
    def test_grid_of_rows(self, toy, test_images, styles, tmp_path):
        contents = [("astronaut", test_images["astronaut"]), ("rocket", test_images["rocket"])]
        rep = evaluate_suite(toy, contents, styles, _suite_cfg(), out_dir=tmp_path)
        assert len(rep.rows) == 6
        assert [(r.content_id, r.style_id) for r in rep.rows][:3] == [
            ("astronaut", "trained"), ("astronaut", "identity"), ("astronaut", "noimage")]
        assert sum(not r.ok for r in rep.rows) == 2
        assert all(np.isfinite(r.style_loss) for r in rep.rows if r.ok)
        assert len(read_rows(tmp_path / "report.csv")) == 6

    def test_identity_style_matches_reconstruction(self, toy, test_images, styles):
        cfg = _suite_cfg(content_prompt_template="{caption} in the style of *")
        rep = evaluate_suite(toy, [("chelsea", test_images["chelsea"])], styles[1:2], cfg)
        assert rep.aggregates["mean_lpips"] == rep.aggregates["mean_recon_lpips"]

    def test_resume_skips_done_pairs(self, toy, test_images, styles, tmp_path, monkeypatch):
        contents = [("coffee", test_images["coffee"])]
        first = evaluate_suite(toy, contents, styles[:2], _suite_cfg(), out_dir=tmp_path)
        import sigstyle.apps

        def boom(*a, **k):
            raise AssertionError("should not rerun a finished pair")

        monkeypatch.setattr(sigstyle.apps, "run_transfer", boom)
        again = evaluate_suite(toy, contents, styles[:2], _suite_cfg(), out_dir=tmp_path)
        assert again.rows == first.rows

    def test_failures_are_recorded(self, toy, test_images, style_image):
        bad = identity_checkpoint(toy)
        bad.token_embedding = np.zeros(3, np.float32)
        rep = evaluate_suite(toy, [("coffee", test_images["coffee"])], [StyleEntry("bad", bad, style_image)],
                             _suite_cfg())
        assert rep.rows[0].error and rep.aggregates["failed_pairs"] == 1

    def test_empty_inputs(self, toy):
        with pytest.raises(SigStyleError):
            evaluate_suite(toy, [], [], _suite_cfg())
