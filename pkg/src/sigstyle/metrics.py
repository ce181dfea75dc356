"""Style loss (Gram matrices), perceptual distance and the content x style
evaluation protocol.

Two feature extractors ship: a fixed-seed random convolutional stack that
needs no downloads, and a VGG-19 adapter that needs torchvision weights.
The perceptual distance likewise has a toy stand-in (unit-normalized
feature differences over the toy stack) and an adapter for the ``lpips``
package when it is installed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CapabilityError, DimensionError, SigStyleError

log = logging.getLogger(__name__)

# context values reported in the literature for this method; not a contract
REFERENCE_STYLE_LOSS = 0.7641
REFERENCE_LPIPS = 0.5191
EPS = 1e-10


def gram(features: torch.Tensor) -> torch.Tensor:
    """``F F^T / (C N)`` for features of shape (C, N) or (C, H, W)."""
    if features.ndim == 3:
        features = features.reshape(features.shape[0], -1)
    if features.ndim != 2 or features.shape[0] == 0 or features.shape[1] == 0:
        raise DimensionError(f"gram needs non-empty (C, N) features, got {tuple(features.shape)}")
    c, n = features.shape
    return features @ features.T / (c * n)


class FeatureExtractor(Protocol):
    name: str
    channels: tuple[int, ...]

    def __call__(self, image: torch.Tensor) -> list[torch.Tensor]: ...


class ToyFeatureExtractor(nn.Module):
    """Three random 3x3 conv + ReLU layers with 8, 16 and 32 channels.

    Input is mapped from [0, 1] to [-1, 1]; weights come from ``seed`` so
    every instance with the same seed is identical.
    """

    name = "toy-conv3"
    channels = (8, 16, 32)

    def __init__(self, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        specs = [(3, 8, 1), (8, 16, 2), (16, 32, 2)]
        self.convs = nn.ModuleList()
        for cin, cout, stride in specs:
            conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1).to(torch.float64)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g, dtype=torch.float64)
                                  * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            self.convs.append(conv)
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        x = (image.to(torch.float64) * 2 - 1)[None]
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x[0])
        return feats


class VGGFeatureExtractor(nn.Module):
    """relu1_1 ... relu5_1 of an ImageNet VGG-19 (torchvision weights)."""

    name = "vgg19"
    channels = (64, 128, 256, 512, 512)
    _cut = (2, 7, 12, 21, 30)

    def __init__(self, device="cpu"):
        super().__init__()
        try:
            from torchvision.models import VGG19_Weights, vgg19
        except ImportError as exc:
            raise CapabilityError("VGG features need torchvision; use ToyFeatureExtractor instead") from exc
        try:
            net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[: self._cut[-1]]
        except Exception as exc:
            raise CapabilityError(f"VGG-19 weights unavailable ({exc}); use ToyFeatureExtractor instead") from exc
        self.net = net.eval().to(device).requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1))

    @torch.no_grad()
    def forward(self, image):
        x = ((image.to(self.mean) - self.mean) / self.std)[None]
        feats, start = [], 0
        for cut in self._cut:
            x = self.net[start:cut](x)
            feats.append(x[0].to(torch.float64))
            start = cut
        return feats


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"image sizes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def layer_grams(image: torch.Tensor, extractor) -> list[torch.Tensor]:
    return [gram(f) for f in extractor(image)]


def style_loss(img_a: torch.Tensor, img_b: torch.Tensor, extractor=None) -> float:
    """Sum over layers of the mean squared Gram-matrix difference."""
    _check_pair(img_a, img_b)
    extractor = extractor or ToyFeatureExtractor()
    total = 0.0
    for ga, gb in zip(layer_grams(img_a, extractor), layer_grams(img_b, extractor)):
        total += float(((ga - gb) ** 2).mean())
    return total


class PerceptualMetric(Protocol):
    name: str

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> float: ...


class ToyLPIPS:
    """LPIPS-shaped distance with unit weights over a toy extractor.

    Per layer: normalize each spatial feature vector to unit length, take
    the squared difference summed over channels, average over positions;
    then sum layers.
    """

    name = "toy-lpips"

    def __init__(self, extractor=None):
        self.extractor = extractor or ToyFeatureExtractor()

    def __call__(self, a, b) -> float:
        total = 0.0
        for fa, fb in zip(self.extractor(a), self.extractor(b)):
            na = fa / (fa.norm(dim=0, keepdim=True) + EPS)
            nb = fb / (fb.norm(dim=0, keepdim=True) + EPS)
            total += float(((na - nb) ** 2).sum(0).mean())
        return total


class LpipsAdapter:
    """Learned LPIPS (AlexNet) from the ``lpips`` package."""

    name = "lpips-alex"

    def __init__(self, net: str = "alex"):
        try:
            import lpips
        except ImportError as exc:
            raise CapabilityError("the 'lpips' package is not installed; use ToyLPIPS instead") from exc
        try:
            self._fn = lpips.LPIPS(net=net, verbose=False).eval()
        except Exception as exc:
            raise CapabilityError(f"LPIPS weights unavailable ({exc}); use ToyLPIPS instead") from exc

    @torch.no_grad()
    def __call__(self, a, b) -> float:
        # lpips expects inputs in [-1, 1]
        d = self._fn(a.float()[None] * 2 - 1, b.float()[None] * 2 - 1)
        return float(d.reshape(()))


def perceptual_distance(img_a: torch.Tensor, img_b: torch.Tensor, adapter=None) -> float:
    _check_pair(img_a, img_b)
    adapter = adapter or ToyLPIPS()
    return max(0.0, adapter(img_a, img_b))


# -- evaluation protocol -----------------------------------------------------

ROW_FIELDS = ("content_id", "style_id", "style_loss", "lpips", "recon_lpips", "error")


@dataclass
class MetricsRow:
    content_id: str
    style_id: str
    style_loss: float = float("nan")
    lpips: float = float("nan")
    recon_lpips: float = float("nan")
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    protocol: dict = field(default_factory=dict)

    def _mean(self, attr) -> float:
        vals = [getattr(r, attr) for r in self.rows if r.ok and math.isfinite(getattr(r, attr))]
        return sum(vals) / len(vals) if vals else float("nan")

    @property
    def aggregates(self) -> dict:
        return {
            "mean_style_loss": self._mean("style_loss"),
            "mean_lpips": self._mean("lpips"),
            "mean_recon_lpips": self._mean("recon_lpips"),
            "pairs": len(self.rows),
            "failed_pairs": sum(not r.ok for r in self.rows),
        }

    def summary(self) -> dict:
        return {
            "aggregates": self.aggregates,
            "protocol": self.protocol,
            "reference": {
                "style_loss": REFERENCE_STYLE_LOSS,
                "lpips": REFERENCE_LPIPS,
                "note": "published values on the full pretrained backbone with an unspecified "
                        "feature extractor; shown for context only, absolute parity is not expected",
            },
        }

    def write(self, out_dir) -> dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"csv": os.path.join(out_dir, "report.csv"), "json": os.path.join(out_dir, "summary.json")}
        write_rows(self.rows, paths["csv"])
        with open(paths["json"], "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        return paths


def write_rows(rows: Sequence[MetricsRow], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    os.replace(tmp, path)


def read_rows(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [
            MetricsRow(
                r["content_id"], r["style_id"], float(r["style_loss"]), float(r["lpips"]),
                float(r["recon_lpips"]), r["error"],
            )
            for r in csv.DictReader(fh)
        ]


@dataclass
class StyleEntry:
    style_id: str
    checkpoint: object  # StyleCheckpoint
    image: Optional[torch.Tensor] = None


def evaluate_suite(
    model,
    contents: Sequence[tuple[str, torch.Tensor]],
    styles: Sequence[StyleEntry],
    cfg=None,
    out_dir=None,
    extractor=None,
    lpips_adapter=None,
    resume: bool = True,
) -> MetricsReport:
    """Run a global transfer for every (content, style) pair and score it.

    Style loss compares the stylized image with the style image; LPIPS
    compares it with the content image, and ``recon_lpips`` gives the
    reconstruction-only baseline for the same content.  With ``out_dir``
    the CSV is rewritten after every pair and completed pairs are skipped
    on a rerun.
    """
    from .apps import TransferConfig, run_transfer
    from .imageio import prepare

    if not contents or not styles:
        raise SigStyleError("evaluation needs at least one content image and one style")
    cfg = cfg or TransferConfig(caption="a photo")
    extractor = extractor or ToyFeatureExtractor()
    lpips_adapter = lpips_adapter or ToyLPIPS(extractor)
    done: dict[tuple[str, str], MetricsRow] = {}
    csv_path = os.path.join(out_dir, "report.csv") if out_dir else None
    if csv_path and resume and os.path.exists(csv_path):
        done = {(r.content_id, r.style_id): r for r in read_rows(csv_path) if r.ok}
        log.info("resuming: %d pairs already complete", len(done))
    rows: list[MetricsRow] = []
    for cid, content in contents:
        target = prepare(content.to(model.dtype), model.image_size)
        for entry in styles:
            if (cid, entry.style_id) in done:
                rows.append(done[(cid, entry.style_id)])
                continue
            row = MetricsRow(cid, entry.style_id)
            try:
                res = run_transfer(model, content, entry.checkpoint, cfg)
                res.run.trace.close()
                row.lpips = perceptual_distance(res.image, target, lpips_adapter)
                row.recon_lpips = perceptual_distance(res.reconstruction_image, target, lpips_adapter)
                if entry.image is None:
                    row.error = "style image missing"
                else:
                    style = prepare(entry.image.to(model.dtype), model.image_size)
                    row.style_loss = style_loss(res.image, style, extractor)
            except (SigStyleError, RuntimeError, ValueError) as exc:
                log.warning("pair (%s, %s) failed: %s", cid, entry.style_id, exc)
                row.error = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            if csv_path:
                os.makedirs(out_dir, exist_ok=True)
                write_rows(rows, csv_path)
    protocol = {
        "contents": [c for c, _ in contents],
        "styles": [s.style_id for s in styles],
        "num_steps": cfg.sampler.num_steps,
        "guidance_scale": cfg.sampler.guidance_scale,
        "k": cfg.swap.k,
        "lambda": cfg.lam,
        "extractor": getattr(extractor, "name", type(extractor).__name__),
        "perceptual": getattr(lpips_adapter, "name", type(lpips_adapter).__name__),
        "backbone": model.model_id,
    }
    report = MetricsReport(rows, protocol)
    if out_dir:
        report.write(out_dir)
    return report
