import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from sigstyle.backbone import ToyBackbone  # noqa: E402
from sigstyle.imageio import center_square, prepare, resize, to_tensor  # noqa: E402
from sigstyle.styletune import TrainConfig, finetune  # noqa: E402

IMAGE_NAMES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_RESULTS: dict = {}


def skimage_image(name: str) -> torch.Tensor:
    from skimage import data

    return to_tensor(getattr(data, name)())


@pytest.fixture(scope="session")
def toy():
    return ToyBackbone(seed=0)


@pytest.fixture(scope="session")
def test_images(toy):
    """Five natural images, center-cropped and resized to the toy input."""
    return {n: prepare(skimage_image(n), toy.image_size) for n in IMAGE_NAMES}


@pytest.fixture(scope="session")
def style_image():
    return resize(center_square(skimage_image("coffee")), 80)


TOY_TRAIN = TrainConfig(learning_rate=1e-2, steps=100, seed=0)


@pytest.fixture(scope="session")
def trained(style_image):
    """A 100-step toy fine-tune with instrumentation of every patched address.

    Runs on its own backbone handle so the frozen-set check sees only this
    training run.
    """
    model = ToyBackbone(seed=0)
    before = model.parameter_snapshot()
    patched = set()
    original = model.patch_weight

    def recording_patch(addr, matrix):
        patched.add(model.address(addr).key)
        return original(addr, matrix)

    model.patch_weight = recording_patch
    try:
        ckpt = finetune(model, [style_image], TOY_TRAIN)
    finally:
        del model.patch_weight
    return {"model": model, "ckpt": ckpt, "before": before, "patched": patched}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
