"""Synthesis stage: mask extraction, structure/appearance guidance energies,
guidance-image targets, and the lockstep guided/sibling DDIM sampler.

The guided score is eps_hat = (1+s) eps(c) - s eps(null)
+ lambda_s * grad_x g_s + lambda_a * grad_x g_a, where both energy gradients
are taken through the denoiser evaluation at the current latent; adding the
positive gradient descends the energy under the DDIM update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basis import BasisEntry, SemanticBasis, project
from .ddim import uniform_plan, _transition
from .errors import ContractViolation, DomainError, GuidanceAborted
from .model import (
    ConceptPrompt, DenoiserModel, NULL_PROMPT, denoiser_forward, eval_denoiser,
    prompt_token_ids,
)
from .schedule import NoiseSchedule
from .serialize import model_fingerprint
from .shapes import ConditionImage
from .tensor import (
    Tape, Tensor, backward, max_with_scalar, reduce_sum, reshape, sigmoid,
    take_rows,
)

log = logging.getLogger(__name__)

MASK_MODES = ("xattn", "provided", "ones")
THRESHOLD_MODES = ("dynamic", "hard")


@dataclass(frozen=True)
class GuidanceConfig:
    """All synthesis-stage knobs; defaults follow the reference setup
    (lambda_s in [400, 1000], lambda_a = 0.2 lambda_s, N_a = 2, guidance over
    the first 60% of 200 sampling steps, keys of the first decoder
    self-attention as features)."""

    lambda_s: float = 600.0
    lambda_a: Optional[float] = None  # None means 0.2 * lambda_s
    w: float = 1.0
    s: float = 2.0
    n_steps: int = 200
    invert_steps: int = 1000
    guidance_fraction: float = 0.6
    n_a: int = 2
    n_b_used: Optional[int] = None  # None means the basis's full N_b
    mask_mode: str = "xattn"
    threshold_mode: str = "dynamic"
    hard_threshold: float = 0.5
    feature_site: str = "keys"
    i2i_fixed_seed: bool = False
    i2i_no_mask: bool = False
    invert_cfg_scale: float = 0.0

    def __post_init__(self):
        if self.lambda_s < 0 or self.s < 0 or self.w < 0:
            raise ContractViolation("guidance strengths must be non-negative")
        if not 0.0 <= self.guidance_fraction <= 1.0:
            raise ContractViolation("guidance_fraction must lie in [0, 1]")
        if self.mask_mode not in MASK_MODES:
            raise ContractViolation(f"mask_mode must be one of {MASK_MODES}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ContractViolation(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if self.n_a < 1:
            raise ContractViolation("n_a must be >= 1")

    @property
    def lambda_a_value(self) -> float:
        return 0.2 * self.lambda_s if self.lambda_a is None else self.lambda_a

    def guided_steps(self, n_steps: Optional[int] = None) -> int:
        n = self.n_steps if n_steps is None else n_steps
        return int(math.floor(self.guidance_fraction * n + 0.5))

    def effective_n_b(self, basis: SemanticBasis) -> int:
        n_b = basis.n_basis if self.n_b_used is None else self.n_b_used
        if not self.n_a <= n_b <= basis.n_basis:
            raise ContractViolation(
                f"need n_a <= n_b_used <= {basis.n_basis}, got {n_b} (n_a={self.n_a})")
        return n_b


@dataclass
class GuidanceTarget:
    """Inverted guidance image expressed in the semantic basis."""

    coords_by_t: dict[int, np.ndarray]          # t -> (N_b, H, W)
    mask: np.ndarray                            # (H, W) in {0, 1}
    tau_by_t: Optional[dict[int, np.ndarray]]   # t -> (N_b,); None iff mask all ones
    start_latent: Optional[np.ndarray] = None   # inverted x_T of the condition
    concept_key: str = ""

    def __post_init__(self):
        all_fg = bool(np.all(self.mask == 1.0))
        if all_fg and self.tau_by_t is not None:
            raise ContractViolation("tau must be absent when the mask is all ones")
        if not all_fg and self.tau_by_t is None:
            raise ContractViolation("tau required when the mask has background")


@dataclass
class AppearanceVec:
    vectors: list[Tensor]  # n_a tensors of shape (C,)


@dataclass
class StepDiagnostics:
    step: int
    t: int
    g_s: float
    g_a: float
    fwd_dist: float       # masked coordinate distance of the guided path
    sib_fwd_dist: float   # same distance for the sibling path


def extract_mask(xattn_maps: np.ndarray, concept_token_index: int,
                 out_hw: tuple[int, int]) -> np.ndarray:
    """Binarize the concept token's attention map at its spatial mean after
    nearest upsampling; a degenerate all-zero mask falls back to all ones."""
    maps = np.asarray(xattn_maps, dtype=np.float64)
    if maps.ndim != 3:
        raise ContractViolation("xattn_maps must be (n_tokens, H', W')")
    if not 0 <= concept_token_index < maps.shape[0]:
        raise ContractViolation(f"token index {concept_token_index} out of range")
    m = maps[concept_token_index]
    H, W = out_hw
    ri = np.minimum((np.arange(H) * m.shape[0]) // H, m.shape[0] - 1)
    ci = np.minimum((np.arange(W) * m.shape[1]) // W, m.shape[1] - 1)
    up = m[np.ix_(ri, ci)]
    mask = (up > up.mean()).astype(np.float64)
    if mask.sum() == 0:
        log.warning("degenerate all-zero attention mask; falling back to global (all-ones)")
        return np.ones(out_hw)
    return mask


def compute_tau(coords_g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-channel max of the guidance coordinates over background positions."""
    bg = mask == 0
    if not bg.any():
        raise DomainError("tau undefined: mask has no background positions")
    return coords_g[:, bg].max(axis=1)


def _structure_terms(coords: Tensor, target: GuidanceTarget, t: int,
                     n_b: int):
    """(forward, backward) energy terms at timestep t; backward is None for
    an all-foreground mask."""
    if t not in target.coords_by_t:
        raise ContractViolation(f"target has no coordinates for timestep {t}")
    ref = target.coords_by_t[t][:n_b]
    if coords.shape != ref.shape:
        raise ContractViolation(f"coordinate shapes differ: {coords.shape} vs {ref.shape}")
    m = target.mask
    fg = float(m.sum())
    if fg == 0:
        raise DomainError("mask has no foreground: forward term undefined")
    diff = coords - Tensor(ref)
    d2 = reduce_sum(diff * diff, axes=0)
    forward = reduce_sum(d2 * Tensor(m)) * (1.0 / fg)
    if target.tau_by_t is None:
        return forward, None
    tau = target.tau_by_t[t][:n_b]
    bg_count = float(m.size - fg)
    excess = max_with_scalar(coords - Tensor(tau[:, None, None]), 0.0)
    e2 = reduce_sum(excess * excess, axes=0)
    backward_term = reduce_sum(e2 * Tensor(1.0 - m)) * (1.0 / bg_count)
    return forward, backward_term


def structure_energy(coords: Tensor, target: GuidanceTarget, t: int, w: float,
                     n_b: Optional[int] = None) -> Tensor:
    """Forward + w * backward structure guidance energy at timestep t."""
    n_b = coords.shape[0] if n_b is None else n_b
    forward, backward_term = _structure_terms(coords, target, t, n_b)
    if backward_term is None:
        return forward
    return forward + backward_term * w


def appearance_vec(coords: Tensor, features: Tensor, n_a: int) -> AppearanceVec:
    """Sigmoid-weighted spatial means of the features, one per leading
    coordinate channel."""
    if n_a > coords.shape[0]:
        raise ContractViolation(f"n_a={n_a} exceeds {coords.shape[0]} coordinate channels")
    c, h, w = features.shape
    feats = reshape(features, (c, h * w))
    logits = reshape(coords, (coords.shape[0], h * w))
    vecs = []
    for k in range(n_a):
        wgt = sigmoid(take_rows(logits, np.array([k])))       # (1, HW)
        numer = reduce_sum(feats * wgt, axes=1)               # (C,)
        denom = reduce_sum(wgt)
        vecs.append(numer / denom)
    return AppearanceVec(vecs)


def appearance_energy(v: AppearanceVec, v_ref: Sequence[np.ndarray]) -> Tensor:
    """Mean squared distance between appearance vectors."""
    if len(v.vectors) != len(v_ref):
        raise ContractViolation("appearance representations have different N_a")
    total = None
    for vk, rk in zip(v.vectors, v_ref):
        rk = np.asarray(rk, dtype=np.float64)
        if vk.shape != rk.shape:
            raise ContractViolation("appearance vector dimensions differ")
        d = vk - Tensor(rk)
        term = reduce_sum(d * d)
        total = term if total is None else total + term
    return total * (1.0 / len(v.vectors))


def prepare_target(model: DenoiserModel, cond: ConditionImage,
                   basis: SemanticBasis, prompt: ConceptPrompt,
                   cfg: GuidanceConfig, sched: NoiseSchedule,
                   provided_mask: Optional[np.ndarray] = None) -> GuidanceTarget:
    """DDIM-invert the condition image, project its features onto the basis,
    and derive the mask / dynamic thresholds."""
    own_hash = model_fingerprint(model)
    if basis.model_hash != own_hash:
        raise ContractViolation("basis was built for a different checkpoint")
    wanted = set(basis.entries.keys())
    plan = uniform_plan(sched.T, cfg.invert_steps, "invert")
    missing = wanted - set(plan.timesteps)
    if missing:
        raise ContractViolation(
            f"{cfg.invert_steps}-step inversion never visits basis timesteps "
            f"{sorted(missing)[:4]}")
    n_b = cfg.effective_n_b(basis)
    size = model.config.image_size
    x = np.array(cond.pixels.data, copy=True).reshape(1, 1, size, size)
    grid = model.config.feature_size
    coords_by_t: dict[int, np.ndarray] = {}
    xattn_sum = np.zeros((2, grid, grid))
    xattn_n = 0
    order = list(plan.timesteps)[::-1]
    ids = np.tile(prompt_token_ids(model.config, prompt), (1, 1))
    s_inv = cfg.invert_cfg_scale
    for i, t in enumerate(order):
        ab_from = sched.alpha_bar[order[i - 1]] if i > 0 else 1.0
        ab_to = sched.alpha_bar[t]
        want = t in wanted
        eps, cap = denoiser_forward(model, Tensor(x), np.array([t]), ids,
                                    capture=want, site=cfg.feature_site)
        eps_hat = eps.data
        if s_inv > 0 and not prompt.is_null:
            null_ids = np.tile(prompt_token_ids(model.config, NULL_PROMPT), (1, 1))
            eps_null, _ = denoiser_forward(model, Tensor(x), np.array([t]), null_ids)
            eps_hat = (1.0 + s_inv) * eps_hat - s_inv * eps_null.data
        if want:
            feats = Tensor(cap["features"].data[0])
            coords_by_t[t] = project(feats, basis.entry(t)).data
            xattn_sum += cap["xattn"].data[0]
            xattn_n += 1
        x = _transition(x, eps_hat, ab_from, ab_to)
    # mask per configured mode; the i2i "w/o mask" variant forces all-ones
    if cfg.i2i_no_mask or cfg.mask_mode == "ones":
        mask = np.ones((grid, grid))
    elif cfg.mask_mode == "provided":
        if provided_mask is None:
            raise ContractViolation("mask_mode='provided' needs provided_mask")
        mask = np.asarray(provided_mask, dtype=np.float64)
        if mask.shape != (grid, grid) or not set(np.unique(mask)) <= {0.0, 1.0}:
            raise ContractViolation(f"provided mask must be binary {grid}x{grid}")
        if mask.sum() == 0:
            raise ContractViolation("provided mask has no foreground")
    else:
        mask = extract_mask(xattn_sum / max(xattn_n, 1), 0, (grid, grid))
    tau_by_t = None
    if not np.all(mask == 1.0):
        if cfg.threshold_mode == "dynamic":
            tau_by_t = {t: compute_tau(c, mask) for t, c in coords_by_t.items()}
        else:
            nb_full = basis.n_basis
            tau_by_t = {t: np.full(nb_full, cfg.hard_threshold) for t in coords_by_t}
    return GuidanceTarget(coords_by_t=coords_by_t, mask=mask, tau_by_t=tau_by_t,
                          start_latent=x.copy(), concept_key=basis.concept_key)


def _eval_rows(model, x_rows: np.ndarray, t: int, prompts, capture: bool,
               site: str):
    """One batched evaluation with per-row prompts."""
    ids = np.stack([prompt_token_ids(model.config, p) for p in prompts])
    t_vec = np.full(len(prompts), t, dtype=np.int64)
    return denoiser_forward(model, Tensor(x_rows), t_vec, ids, capture=capture,
                            site=site)


def guided_sample(model: DenoiserModel, prompt: ConceptPrompt,
                  targets: Sequence[GuidanceTarget], basis: SemanticBasis,
                  cfg: GuidanceConfig, rng_seed: int, sched: NoiseSchedule):
    """Generate (image, sibling, diagnostics) with structure/appearance
    guidance over the leading guidance_fraction of the sampling steps.

    Both trajectories consume the same start latent; the sibling always runs
    plain CFG and never records gradients.
    """
    if not targets:
        raise ContractViolation("guided_sample needs at least one target")
    if basis.model_hash != model_fingerprint(model):
        raise ContractViolation("basis was built for a different checkpoint")
    if basis.feature_site != cfg.feature_site:
        raise ContractViolation(
            f"basis was built on site {basis.feature_site!r}, config wants {cfg.feature_site!r}")
    n_b = cfg.effective_n_b(basis)
    lam_s, lam_a = cfg.lambda_s, cfg.lambda_a_value
    plan = uniform_plan(sched.T, cfg.n_steps, "sample")
    n = plan.n_steps
    guided_count = cfg.guided_steps(n)
    size = model.config.image_size
    if cfg.i2i_fixed_seed:
        if targets[0].start_latent is None:
            raise ContractViolation("i2i_fixed_seed needs a target with start_latent")
        x_main = np.array(targets[0].start_latent, copy=True)
    else:
        rng = np.random.default_rng(rng_seed)
        x_main = rng.standard_normal((1, model.config.in_channels, size, size))
    x_sib = x_main.copy()
    null = NULL_PROMPT
    s = cfg.s
    diagnostics: list[StepDiagnostics] = []
    for i, t in enumerate(plan.timesteps):
        ab_from = sched.alpha_bar[t]
        ab_to = sched.alpha_bar[plan.timesteps[i + 1]] if i + 1 < n else 1.0
        in_prefix = i < guided_count
        guiding = in_prefix and (lam_s > 0 or lam_a > 0)
        if in_prefix:
            # sibling step with feature capture (appearance source + diagnostics)
            rows = [prompt, null] if s > 0 else [prompt]
            eps_sib_all, cap = _eval_rows(model, np.concatenate([x_sib] * len(rows)),
                                          t, rows, capture=True, site=cfg.feature_site)
            eps_sib = eps_sib_all.data[0:1] if s == 0 else \
                (1.0 + s) * eps_sib_all.data[0:1] - s * eps_sib_all.data[1:2]
            sib_feats = Tensor(cap["features"].data[0])
            sib_coords = project(sib_feats, basis.entry(t), n_b)
            v_ref = [v.data for v in
                     appearance_vec(sib_coords, sib_feats, cfg.n_a).vectors]
            sib_fwd = sum(_structure_terms(sib_coords, tgt, t, n_b)[0].item()
                          for tgt in targets)
        else:
            rows = [prompt, null] if s > 0 else [prompt]
            eps_sib_all, _ = _eval_rows(model, np.concatenate([x_sib] * len(rows)),
                                        t, rows, capture=False, site=cfg.feature_site)
            eps_sib = eps_sib_all.data[0:1] if s == 0 else \
                (1.0 + s) * eps_sib_all.data[0:1] - s * eps_sib_all.data[1:2]
            sib_fwd = float("nan")
        if guiding:
            with Tape() as tape:
                x_in = Tensor(x_main, requires_grad=True)
                eps_c, rec = eval_denoiser(model, x_in, t, prompt, capture=True,
                                           site=cfg.feature_site)
                coords = project(rec.features, basis.entry(t), n_b)
                g_s_total = None
                fwd_total = 0.0
                for tgt in targets:
                    fwd, bwd = _structure_terms(coords, tgt, t, n_b)
                    fwd_total += fwd.item()
                    term = fwd if bwd is None else fwd + bwd * cfg.w
                    g_s_total = term if g_s_total is None else g_s_total + term
                v = appearance_vec(coords, rec.features, cfg.n_a)
                g_a = appearance_energy(v, v_ref)
                g_s_val, g_a_val = g_s_total.item(), g_a.item()
                if not (np.isfinite(g_s_val) and np.isfinite(g_a_val)):
                    raise GuidanceAborted(i, t, f"g_s={g_s_val}, g_a={g_a_val}")
                total = g_s_total * lam_s + g_a * lam_a
                grads = backward(total, tape)
            grad_x = grads[x_in].data
            if s > 0:
                eps_null, _ = eval_denoiser(model, Tensor(x_main), t, null)
                eps_hat = (1.0 + s) * eps_c.data - s * eps_null.data + grad_x
            else:
                eps_hat = eps_c.data + grad_x
            diagnostics.append(StepDiagnostics(i, t, g_s_val, g_a_val,
                                               fwd_total, sib_fwd))
        else:
            rows = [prompt, null] if s > 0 else [prompt]
            eps_main_all, _ = _eval_rows(model, np.concatenate([x_main] * len(rows)),
                                         t, rows, capture=False, site=cfg.feature_site)
            eps_hat = eps_main_all.data[0:1] if s == 0 else \
                (1.0 + s) * eps_main_all.data[0:1] - s * eps_main_all.data[1:2]
            if in_prefix:
                diagnostics.append(StepDiagnostics(i, t, 0.0, 0.0, float("nan"), sib_fwd))
        x_main = _transition(x_main, eps_hat, ab_from, ab_to)
        x_sib = _transition(x_sib, eps_sib, ab_from, ab_to)
    image = Tensor(np.clip(x_main[0], 0.0, 1.0))
    sibling = Tensor(np.clip(x_sib[0], 0.0, 1.0))
    return image, sibling, diagnostics


def write_diagnostics(path, diagnostics: Sequence[StepDiagnostics]) -> None:
    """Line-oriented per-guided-step energies: step, t, g_s, g_a."""
    with open(path, "w", encoding="utf-8") as f:
        for d in diagnostics:
            f.write(f"{d.step}\t{d.t}\t{d.g_s:.10g}\t{d.g_a:.10g}\n")
