import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from subguide.model import DenoiserModel, ModelConfig


def fd_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x (float64)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


MICRO_CONFIG = ModelConfig(
    image_size=8,
    base_width=8,
    channel_mult=(1, 2, 2),
    num_concepts=4,
    num_styles=3,
    time_dim=16,
    token_dim=16,
    norm_groups=4,
)


@pytest.fixture(scope="session")
def micro_model() -> DenoiserModel:
    """Untrained micro instance (8x8 images, 16ch attention) for fast tests."""
    return DenoiserModel.initialize(MICRO_CONFIG, rng_seed=7)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
