import sys

import numpy as np
import pytest

from aemim.model import ModelConfig, init_params

TOY = ModelConfig(image_size=8, patch_size=4, channels=1, enc_dim=8, enc_depth=2, enc_heads=2,
                  dec_dim=8, dec_depth=2, dec_heads=2, mask_ratio=0.5)
SMALL = ModelConfig(image_size=16, patch_size=4, channels=3, enc_dim=16, enc_depth=2, enc_heads=2,
                    dec_dim=16, dec_depth=1, dec_heads=2, mask_ratio=0.75)


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_store():
    return init_params(SMALL, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_images(rng, n, cfg):
    return rng.uniform(0, 255, size=(n, cfg.channels, cfg.image_size, cfg.image_size)).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
