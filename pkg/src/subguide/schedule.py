"""Forward-process noise schedule (linear beta, cumulative alpha_bar)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients of the forward noising process.

    alpha_bar[t] is the cumulative signal power at step t, strictly
    decreasing; sigma[t] = sqrt(1 - alpha_bar[t]) exactly.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 2:
        raise ContractViolation(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ContractViolation(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def forward_noise(x0: Tensor, t: int, noise: Tensor, sched: NoiseSchedule) -> Tensor:
    """Noise a clean image to step t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise."""
    if not 0 <= t < sched.T:
        raise ContractViolation(f"timestep {t} outside [0, {sched.T})")
    if noise.shape != x0.shape:
        raise ContractViolation(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar[t]
    return Tensor(np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * noise.data)


def forward_noise_batch(x0: np.ndarray, t: np.ndarray, noise: np.ndarray,
                        sched: NoiseSchedule) -> np.ndarray:
    """Vectorized forward noising with a per-sample timestep (training path)."""
    ab = sched.alpha_bar[t][:, None, None, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
