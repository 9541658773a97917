"""Analysis stage: seed generation, feature collection over DDIM inversion,
and per-timestep PCA semantic bases.

Covariances are accumulated as streaming moments (sum / outer-product sum)
so that a 20-seed collection never materializes the per-timestep feature
matrices; fit_pca and build_basis share the same moment -> eigenpair path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .ddim import StepPlan, run, uniform_plan
from .linalg import jacobi_eigh
from .model import ConceptPrompt, DenoiserModel, DEFAULT_FEATURE_SITE
from .schedule import NoiseSchedule
from .serialize import model_fingerprint
from .shapes import CONCEPTS, STYLES
from .tensor import Tensor, matmul, reshape

DEFAULT_N_SEEDS = 20
DEFAULT_N_BASIS = 64
DEFAULT_INVERT_STEPS = 200


@dataclass(frozen=True)
class BasisEntry:
    mu: np.ndarray           # (C,)
    components: np.ndarray   # (N_b, C), rows orthonormal
    eigenvalues: np.ndarray  # (N_b,), descending


@dataclass
class SemanticBasis:
    concept_key: str
    model_hash: bytes
    feature_site: str
    n_seeds: int
    n_basis: int
    entries: dict[int, BasisEntry] = field(default_factory=dict)

    def entry(self, t: int) -> BasisEntry:
        if t not in self.entries:
            raise ContractViolation(f"basis has no entry for timestep {t}")
        return self.entries[t]


@dataclass
class SeedSet:
    concept_id: int
    prompts: list[ConceptPrompt]
    images: np.ndarray  # (N_s, 1, H, W)
    rng_seed: int


def generate_seeds(model: DenoiserModel, concept_id: int, n_seeds: int,
                   style_pool: Optional[Sequence[int]], rng_seed: int,
                   sched: NoiseSchedule, n_steps: int = DEFAULT_INVERT_STEPS,
                   cfg_scale: float = 2.0) -> SeedSet:
    """Sample n_seeds exemplars of the concept via plain CFG DDIM, cycling
    styles from the pool to diversify appearance."""
    if n_seeds < 1:
        raise ContractViolation("need n_seeds >= 1")
    if not 0 <= concept_id < model.config.num_concepts:
        raise ContractViolation(f"unknown concept {concept_id}")
    pool = list(style_pool) if style_pool else list(range(model.config.num_styles))
    prompts = [ConceptPrompt(concept_id, pool[i % len(pool)]) for i in range(n_seeds)]
    rng = np.random.default_rng(rng_seed)
    size = model.config.image_size
    x_T = rng.standard_normal((n_seeds, model.config.in_channels, size, size))
    plan = uniform_plan(sched.T, n_steps, "sample")
    images = np.empty_like(x_T)
    by_style: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_style.setdefault(p.style_id, []).append(i)
    for style_id, idx in by_style.items():
        traj = run(model, Tensor(x_T[idx]), ConceptPrompt(concept_id, style_id),
                   plan, sched, s=cfg_scale)
        images[idx] = traj.latents[-1]
    return SeedSet(concept_id=concept_id, prompts=prompts, images=images,
                   rng_seed=rng_seed)


def _feature_stream(model: DenoiserModel, images: np.ndarray,
                    prompts: list[ConceptPrompt], sched: NoiseSchedule,
                    invert_steps: int, site: str, chunk: int = 8):
    """Yield (t, matrix) feature blocks per inversion chunk; matrix rows are
    the chunk's spatial feature vectors at timestep t."""
    plan = uniform_plan(sched.T, invert_steps, "invert")
    by_style: dict[Optional[int], list[int]] = {}
    for i, p in enumerate(prompts):
        by_style.setdefault(p.style_id, []).append(i)
    for style_id, idx in by_style.items():
        concept_id = prompts[idx[0]].concept_id
        for lo in range(0, len(idx), chunk):
            sel = idx[lo:lo + chunk]
            traj = run(model, Tensor(images[sel]), ConceptPrompt(concept_id, style_id),
                       plan, sched, s=0.0, capture=True, site=site)
            for rec in traj.feature_records:
                feats = rec.features.data
                if feats.ndim == 3:
                    feats = feats[None]
                b, c = feats.shape[0], feats.shape[1]
                mat = feats.reshape(b, c, -1).transpose(0, 2, 1).reshape(-1, c)
                yield rec.t, mat


def collect_features(model: DenoiserModel, seeds: SeedSet, invert_steps: int,
                     sched: NoiseSchedule, keep_timesteps: Optional[Iterable[int]] = None,
                     site: str = DEFAULT_FEATURE_SITE, chunk: int = 8):
    """Map t -> (N_s*H*W, C) feature matrix gathered during DDIM inversion.

    keep_timesteps limits the map (the full 200-step map for 20 seeds is
    ~0.5 GB); None keeps every visited timestep.
    """
    keep = None if keep_timesteps is None else set(int(t) for t in keep_timesteps)
    blocks: dict[int, list[np.ndarray]] = {}
    for t, mat in _feature_stream(model, seeds.images, seeds.prompts, sched,
                                  invert_steps, site, chunk):
        if keep is None or t in keep:
            blocks.setdefault(t, []).append(mat)
    return {t: np.concatenate(parts, axis=0) for t, parts in blocks.items()}


def _orient_rows(components: np.ndarray) -> np.ndarray:
    """Deterministic sign: first coordinate of magnitude > 1e-12 is positive."""
    out = components.copy()
    for row in out:
        for v in row:
            if abs(v) > 1e-12:
                if v < 0:
                    row *= -1.0
                break
    return out


def _fit_from_moments(mu: np.ndarray, cov: np.ndarray, n_basis: int) -> BasisEntry:
    evals, evecs = jacobi_eigh(cov)
    comp = _orient_rows(evecs[:, :n_basis].T)
    return BasisEntry(mu=mu, components=np.ascontiguousarray(comp),
                      eigenvalues=np.maximum(evals[:n_basis], 0.0))


def fit_pca(vectors: np.ndarray, n_basis: int) -> BasisEntry:
    """Top-n_basis eigenpairs of the sample covariance of the centered rows."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ContractViolation("fit_pca expects an N x C matrix")
    n, c = vectors.shape
    if not 1 <= n_basis <= c:
        raise ContractViolation(f"need 1 <= n_basis <= {c}, got {n_basis}")
    if n < n_basis:
        raise ContractViolation(f"need at least {n_basis} rows, got {n}")
    if not np.all(np.isfinite(vectors)):
        raise ContractViolation("fit_pca input must be finite")
    mu = vectors.mean(axis=0)
    xc = vectors - mu
    cov = (xc.T @ xc) / max(n - 1, 1)
    return _fit_from_moments(mu, cov, n_basis)


def default_basis_timesteps(sched: NoiseSchedule, n_steps: int = 200,
                            guidance_fraction: float = 0.6,
                            extra: Sequence[int] = ()) -> tuple[int, ...]:
    """Guided prefix of the sampling plan plus any extra probe timesteps."""
    plan = uniform_plan(sched.T, n_steps, "sample")
    k = int(round(guidance_fraction * plan.n_steps))
    ts = set(plan.timesteps[:k]) | set(int(t) for t in extra)
    return tuple(sorted(ts, reverse=True))


def build_basis(model: DenoiserModel, concept_id: int, sched: NoiseSchedule,
                guidance_timesteps: Sequence[int],
                n_seeds: int = DEFAULT_N_SEEDS, n_basis: int = DEFAULT_N_BASIS,
                invert_steps: int = DEFAULT_INVERT_STEPS, rng_seed: int = 0,
                site: str = DEFAULT_FEATURE_SITE,
                style_pool: Optional[Sequence[int]] = None,
                cfg_scale: float = 2.0, chunk: int = 8,
                seeds: Optional[SeedSet] = None) -> SemanticBasis:
    """Analysis stage: seeds -> inverted features -> per-timestep PCA."""
    C = model.config.attn_channels
    if not 1 <= n_basis <= C:
        raise ContractViolation(f"n_basis must lie in [1, {C}], got {n_basis}")
    wanted = set(int(t) for t in guidance_timesteps)
    if not wanted:
        raise ContractViolation("guidance_timesteps must be non-empty")
    if any(t < 0 or t >= sched.T for t in wanted):
        raise ContractViolation("guidance timesteps outside schedule range")
    plan_ts = set(uniform_plan(sched.T, invert_steps, "invert").timesteps)
    missing = wanted - plan_ts
    if missing:
        raise ContractViolation(
            f"inversion plan of {invert_steps} steps never visits timesteps {sorted(missing)[:4]}...")
    if seeds is None:
        seeds = generate_seeds(model, concept_id, n_seeds, style_pool, rng_seed,
                               sched, n_steps=invert_steps, cfg_scale=cfg_scale)
    # streaming covariance moments per wanted timestep
    stats: dict[int, list] = {t: [0, None, None] for t in wanted}  # n, sum, outer
    for t, mat in _feature_stream(model, seeds.images, seeds.prompts, sched,
                                  invert_steps, site, chunk):
        if t not in stats:
            continue
        st = stats[t]
        st[0] += mat.shape[0]
        s1 = mat.sum(axis=0)
        s2 = mat.T @ mat
        st[1] = s1 if st[1] is None else st[1] + s1
        st[2] = s2 if st[2] is None else st[2] + s2
    basis = SemanticBasis(
        concept_key=CONCEPTS[concept_id] if concept_id < len(CONCEPTS) else str(concept_id),
        model_hash=model_fingerprint(model),
        feature_site=site,
        n_seeds=n_seeds,
        n_basis=n_basis,
    )
    for t in sorted(wanted, reverse=True):
        n, s1, s2 = stats[t]
        if n < n_basis:
            raise ContractViolation(f"only {n} feature vectors at t={t}, need {n_basis}")
        mu = s1 / n
        cov = (s2 - n * np.outer(mu, mu)) / (n - 1)
        cov = 0.5 * (cov + cov.T)
        basis.entries[t] = _fit_from_moments(mu, cov, n_basis)
    return basis


def project(features: Tensor, entry: BasisEntry, n_b_used: Optional[int] = None) -> Tensor:
    """Semantic coordinates: coords[k, i, j] = <F[:, i, j] - mu, components[k]>.

    Differentiable in `features`; the basis is a constant.
    """
    c, h, w = features.shape
    if c != entry.mu.shape[0]:
        raise ContractViolation(
            f"feature channels {c} != basis dimension {entry.mu.shape[0]}")
    comp = entry.components if n_b_used is None else entry.components[:n_b_used]
    centered = reshape(features, (c, h * w)) - Tensor(entry.mu[:, None])
    coords = matmul(Tensor(comp), centered)
    return reshape(coords, (comp.shape[0], h, w))


def reconstruct(coords: np.ndarray, entry: BasisEntry) -> np.ndarray:
    """Inverse of project for complete bases (numpy, test/diagnostic use)."""
    k, h, w = coords.shape
    flat = entry.components[:k].T @ coords.reshape(k, h * w)
    return (flat + entry.mu[:, None]).reshape(-1, h, w)
