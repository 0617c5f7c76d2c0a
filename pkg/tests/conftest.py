from pathlib import Path

import numpy as np
import pytest

from visctrl import denoiser as dn
from visctrl.demo import write_demo

# Small enough that full edits take milliseconds.
TINY = dn.DenoiserConfig(latent_h=2, latent_w=2, latent_c=4, d=8, l_max=3, prompt_dim=8,
                         timestep_dim=4, patch=4, ff_mult=2, seed=11)


@pytest.fixture(scope="session")
def weights():
    return dn.init_weights(dn.DenoiserConfig())


@pytest.fixture(scope="session")
def tiny_weights():
    return dn.init_weights(TINY)


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("demo")
    write_demo(root)
    return root


@pytest.fixture(scope="session")
def demo_weights(demo_dir, weights) -> Path:
    path = demo_dir / "weights.vtsr"
    dn.save_weights(weights, path)
    return path


def random_latent(cfg: dn.DenoiserConfig, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(cfg.latent_shape)


def random_image(cfg: dn.DenoiserConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(cfg.image_h, cfg.image_w, 3)) / 255.0


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
