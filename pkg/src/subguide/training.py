"""DDPM training of the toy denoiser with classifier-free condition dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, TrainingDiverged
from .model import DenoiserModel, NULL_PROMPT, denoiser_forward, prompt_token_ids
from .schedule import forward_noise_batch, make_schedule
from .tensor import Tape, Tensor, backward, reduce_mean


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 16
    batch_size: int = 32
    learning_rate: float = 2e-3
    cfg_dropout_prob: float = 0.1
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.T) < 1 or self.learning_rate <= 0:
            raise ContractViolation("train config values must be positive")
        if not 0.0 <= self.cfg_dropout_prob < 1.0:
            raise ContractViolation("cfg_dropout_prob must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """In-place Adam update with bias correction; missing grads are zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractViolation(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def train(model: DenoiserModel, dataset, cfg: TrainConfig):
    """Minimize E||eps - eps_theta(x_t; t, c)||^2 with prompt dropout to null.

    Returns (model, loss_history) with one mean loss per epoch. Deterministic
    per cfg.rng_seed; aborts with TrainingDiverged on a non-finite loss.
    """
    if not dataset:
        raise ContractViolation("dataset must be non-empty")
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    images = np.stack([img.data for img, _ in dataset])
    ids_all = np.stack([prompt_token_ids(model.config, p) for _, p in dataset])
    null_ids = prompt_token_ids(model.config, NULL_PROMPT)
    n = len(dataset)
    rng = np.random.default_rng(cfg.rng_seed)
    state = init_adam(model.params)
    name_of = {id(t): k for k, t in model.params.items()}
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x0 = images[idx]
            ids = ids_all[idx].copy()
            t_vec = rng.integers(0, cfg.T, len(idx))
            noise = rng.standard_normal(x0.shape)
            drop = rng.random(len(idx)) < cfg.cfg_dropout_prob
            ids[drop] = null_ids
            x_t = forward_noise_batch(x0, t_vec, noise, sched)
            with Tape() as tape:
                eps, _ = denoiser_forward(model, Tensor(x_t), t_vec, ids)
                diff = eps - Tensor(noise)
                loss_t = reduce_mean(diff * diff)
                leaf_grads = backward(loss_t, tape)
            loss = float(loss_t.data)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, batch offset {lo}")
            grads = {name_of[id(t)]: g.data for t, g in leaf_grads.items()
                     if id(t) in name_of}
            adam_step(model.params, grads, state, cfg.learning_rate)
            for p in model.params.values():
                p.grad = None
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return model, history
