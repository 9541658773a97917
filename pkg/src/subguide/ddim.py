"""Deterministic DDIM stepping, inversion, and trajectory runner.

Plans are strictly decreasing timestep subsequences; trajectories carry one
extra latent because both directions include a virtual endpoint at
alpha_bar = 1 (the clean image): sampling ends with the final x0 prediction,
inversion starts from the clean image. Every transition evaluates eps at its
upper timestep, so inversion exactly mirrors sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation, DomainError
from .model import ConceptPrompt, DenoiserModel, FeatureRecord, cfg_eps, eval_denoiser
from .schedule import NoiseSchedule
from .tensor import Tensor

DIRECTIONS = ("sample", "invert")


@dataclass(frozen=True)
class StepPlan:
    timesteps: tuple[int, ...]  # strictly decreasing, within [0, T)
    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ContractViolation(f"direction must be one of {DIRECTIONS}")
        ts = self.timesteps
        if len(ts) < 1:
            raise ContractViolation("plan needs at least one timestep")
        if any(ts[i] <= ts[i + 1] for i in range(len(ts) - 1)):
            raise ContractViolation("plan timesteps must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return len(self.timesteps)


def uniform_plan(T: int, n_steps: int, direction: str = "sample") -> StepPlan:
    """Evenly spaced plan covering both t=0 and t=T-1."""
    if not 1 <= n_steps <= T:
        raise ContractViolation(f"n_steps {n_steps} outside [1, {T}]")
    ts = np.unique(np.round(np.linspace(0, T - 1, n_steps)).astype(int))
    if ts[-1] >= T or ts[0] < 0:
        raise ContractViolation("plan endpoints outside schedule range")
    return StepPlan(tuple(int(t) for t in ts[::-1]), direction)


@dataclass
class Trajectory:
    latents: list[np.ndarray]  # n_steps + 1 entries
    feature_records: Optional[list[FeatureRecord]] = None


def _check_alpha(ab: float) -> float:
    if ab <= 0.0:
        raise DomainError("alpha_bar must be positive for a DDIM transition")
    return ab


def _transition(x: np.ndarray, eps: np.ndarray, ab_from: float, ab_to: float) -> np.ndarray:
    """x0-prediction form of the deterministic (eta=0) DDIM update."""
    _check_alpha(ab_from)
    x0_pred = (x - np.sqrt(1.0 - ab_from) * eps) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * x0_pred + np.sqrt(1.0 - ab_to) * eps


def ddim_step(x_t: Tensor, eps_hat: Tensor, t: int, t_prev: int,
              sched: NoiseSchedule) -> Tensor:
    """One deterministic denoising step t -> t_prev (t == t_prev is a no-op)."""
    if t < t_prev:
        raise ContractViolation(f"ddim_step needs t >= t_prev, got {t} -> {t_prev}")
    if not 0 <= t < sched.T or t_prev < 0:
        raise ContractViolation(f"timestep {t} outside schedule")
    return Tensor(_transition(x_t.data, eps_hat.data,
                              sched.alpha_bar[t], sched.alpha_bar[t_prev]))


def ddim_invert_step(x_t: Tensor, eps: Tensor, t: int, t_next: int,
                     sched: NoiseSchedule) -> Tensor:
    """Algebraic reversal of ddim_step under locally constant eps (t_next >= t)."""
    if t_next < t:
        raise ContractViolation(f"invert step needs t_next >= t, got {t} -> {t_next}")
    if not 0 <= t < sched.T or t_next >= sched.T:
        raise ContractViolation("timesteps outside schedule")
    return Tensor(_transition(x_t.data, eps.data,
                              sched.alpha_bar[t], sched.alpha_bar[t_next]))


ScoreHook = Callable[[np.ndarray, dict], np.ndarray]


def run(model: DenoiserModel, x_start: Tensor, prompt: ConceptPrompt,
        plan: StepPlan, sched: NoiseSchedule, s: float = 0.0,
        score_hook: Optional[ScoreHook] = None, capture: bool = False,
        site: str = "keys") -> Trajectory:
    """Run a full sampling or inversion pass along the plan.

    Sampling starts from x_start at the highest plan timestep and ends with
    the clean prediction; inversion starts from a clean image and ends at
    the highest plan timestep. score_hook(eps_hat, ctx) may replace the
    noise estimate before each transition; ctx carries step/t/x/alpha_bar.
    """
    if any(t >= sched.T for t in plan.timesteps):
        raise ContractViolation("plan timesteps outside schedule range")
    if s < 0:
        raise ContractViolation("cfg scale must be >= 0")
    sampling = plan.direction == "sample"
    order = list(plan.timesteps) if sampling else list(plan.timesteps)[::-1]
    x = np.array(x_start.data, copy=True)
    latents = [x.copy()]
    records: list[FeatureRecord] = []
    n = len(order)
    for i, t in enumerate(order):
        ab_t = sched.alpha_bar[t]
        if sampling:
            ab_from, ab_to = ab_t, (sched.alpha_bar[order[i + 1]] if i + 1 < n else 1.0)
        else:
            ab_from, ab_to = (sched.alpha_bar[order[i - 1]] if i > 0 else 1.0), ab_t
        if capture:
            eps_t, rec = eval_denoiser(model, Tensor(x), t, prompt, capture=True, site=site)
            if s > 0 and not prompt.is_null:
                eps_null, _ = eval_denoiser(model, Tensor(x), t, ConceptPrompt())
                eps_hat = (1.0 + s) * eps_t.data - s * eps_null.data
            else:
                eps_hat = eps_t.data
            records.append(rec)
        else:
            eps_hat = cfg_eps(model, Tensor(x), t, prompt, s).data
        if score_hook is not None:
            eps_hat = score_hook(eps_hat, {
                "step": i, "t": t, "x": x, "alpha_bar_from": ab_from,
                "alpha_bar_to": ab_to, "n_steps": n,
            })
            if np.shape(eps_hat) != x.shape:
                raise ContractViolation(
                    f"score_hook returned shape {np.shape(eps_hat)}, expected {x.shape}")
        x = _transition(x, np.asarray(eps_hat), ab_from, ab_to)
        latents.append(x.copy())
    return Trajectory(latents=latents, feature_records=records if capture else None)
