"""Evaluation proxies: feature-space structural similarity, a linear concept
probe on bottleneck features, appearance distance, and the exact structure
overlap oracle available because conditions come from vector specs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .basis import SemanticBasis, project
from .errors import ContractViolation
from .guidance import appearance_energy, appearance_vec
from .model import ConceptPrompt, DenoiserModel, NULL_PROMPT, eval_denoiser
from .schedule import NoiseSchedule, forward_noise
from .shapes import ShapeSpec, silhouette_mask
from .tensor import Tensor

PROBE_NOISE_SEED = 77113


@dataclass
class EvalReport:
    self_sim: float = float("nan")
    concept_acc: float = float("nan")
    appearance_dist: float = float("nan")
    fg_iou: float = float("nan")
    bg_leakage: float = float("nan")

    def lines(self) -> list[str]:
        return [f"{k}={v:.6g}" for k, v in vars(self).items()]


def default_probe_t(sched: NoiseSchedule) -> int:
    # lightly noised: features there are structure-dominated
    return max(1, sched.T // 20)


def _probe_features(model: DenoiserModel, img: Tensor, probe_t: int,
                    sched: NoiseSchedule, site: str = "keys"):
    """Deterministically noise to probe_t and capture a feature record."""
    noise = Tensor(np.random.default_rng(PROBE_NOISE_SEED)
                   .standard_normal((1, *img.shape)))
    x = forward_noise(Tensor(img.data[None]), probe_t, noise, sched)
    _, rec = eval_denoiser(model, x, probe_t, NULL_PROMPT, capture=True, site=site)
    return rec


def self_similarity_dist(model: DenoiserModel, img_a: Tensor, img_b: Tensor,
                         sched: NoiseSchedule, probe_t: Optional[int] = None) -> float:
    """Mean absolute difference of cosine self-similarity Grams of the two
    images' diffusion features at the probe step."""
    pt = default_probe_t(sched) if probe_t is None else probe_t
    grams = []
    for img in (img_a, img_b):
        feats = _probe_features(model, img, pt, sched).features.data
        v = feats.reshape(feats.shape[0], -1)
        v = v / np.maximum(np.linalg.norm(v, axis=0, keepdims=True), 1e-12)
        grams.append(v.T @ v)
    return float(np.abs(grams[0] - grams[1]).mean())


def appearance_dist(model: DenoiserModel, basis: SemanticBasis, img_a: Tensor,
                    img_b: Tensor, sched: NoiseSchedule, n_a: int = 2,
                    probe_t: Optional[int] = None) -> float:
    """Mean squared distance between the two images' appearance vectors at
    the probe step (the LPIPS stand-in; never compared to LPIPS numbers)."""
    pt = default_probe_t(sched) if probe_t is None else probe_t
    vecs = []
    for img in (img_a, img_b):
        rec = _probe_features(model, img, pt, sched, site=basis.feature_site)
        coords = project(rec.features, basis.entry(pt))
        vecs.append(appearance_vec(coords, rec.features, n_a))
    ref = [v.data for v in vecs[1].vectors]
    return appearance_energy(vecs[0], ref).item()


# ---------------------------------------------------------------------------
# concept probe: multinomial logistic regression on pooled bottleneck features

@dataclass
class ConceptProbe:
    weights: np.ndarray  # (D + 1, n_concepts), last row is the bias
    probe_t: int
    trained: bool = False


def _bottleneck_vec(model: DenoiserModel, img: Tensor, probe_t: int,
                    sched: NoiseSchedule) -> np.ndarray:
    # flattened, not pooled: the probe needs the spatial layout
    rec = _probe_features(model, img, probe_t, sched)
    return rec.bottleneck.data.reshape(-1)


def train_concept_probe(model: DenoiserModel, dataset, sched: NoiseSchedule,
                        probe_t: Optional[int] = None, steps: int = 300,
                        lr: float = 0.5) -> ConceptProbe:
    """Fit softmax regression with full-batch gradient descent (deterministic)."""
    if not dataset:
        raise ContractViolation("probe training needs a non-empty dataset")
    pt = default_probe_t(sched) if probe_t is None else probe_t
    feats = np.stack([_bottleneck_vec(model, img, pt, sched)
                      for img, _ in dataset])
    labels = np.array([p.concept_id for _, p in dataset])
    if any(l is None for l in labels):
        raise ContractViolation("probe training prompts must carry a concept")
    n, d = feats.shape
    k = model.config.num_concepts
    mu, sd = feats.mean(axis=0), feats.std(axis=0) + 1e-8
    x = np.concatenate([(feats - mu) / sd, np.ones((n, 1))], axis=1)
    y = np.eye(k)[labels]
    w = np.zeros((d + 1, k))
    for _ in range(steps):
        logits = x @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (x.T @ (p - y)) / n
    # fold the normalization into the weights
    w_full = np.zeros((d + 1, k))
    w_full[:d] = w[:d] / sd[:, None]
    w_full[d] = w[d] - (mu / sd) @ w[:d]
    return ConceptProbe(weights=w_full, probe_t=pt, trained=True)


def concept_accuracy(probe: ConceptProbe, model: DenoiserModel,
                     images: Sequence[Tensor], prompts: Sequence[ConceptPrompt],
                     sched: NoiseSchedule) -> float:
    """Fraction of images whose predicted concept matches the prompt."""
    if not probe.trained:
        raise ContractViolation("concept probe has not been trained")
    if len(images) == 0:
        raise ContractViolation("accuracy over an empty image set is undefined")
    if len(images) != len(prompts):
        raise ContractViolation("images and prompts differ in length")
    hits = 0
    for img, prompt in zip(images, prompts):
        f = _bottleneck_vec(model, img, probe.probe_t, sched)
        logits = np.concatenate([f, [1.0]]) @ probe.weights
        hits += int(np.argmax(logits) == prompt.concept_id)
    return hits / len(images)


# ---------------------------------------------------------------------------
# exact structure oracle

def otsu_threshold(img: np.ndarray) -> Optional[float]:
    """Maximum inter-class-variance threshold; None for a flat image."""
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-9:
        return None
    hist, edges = np.histogram(img, bins=128, range=(lo, hi))
    total = img.size
    probs = hist / total
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(probs)
    mu_cum = np.cumsum(probs * centers)
    mu_tot = mu_cum[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    sigma_b = np.zeros_like(w0)
    sigma_b[valid] = (mu_tot * w0[valid] - mu_cum[valid]) ** 2 / (w0[valid] * w1[valid])
    return float(centers[int(np.argmax(sigma_b))])


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 0.0


def structure_overlap(generated: np.ndarray, cond_spec: ShapeSpec) -> tuple[float, float]:
    """(fg_iou, bg_leakage) of an Otsu foreground segmentation against the
    spec's exact silhouette; invariant to gray-level inversion (both
    labelings are tried and the better IoU kept)."""
    img = np.asarray(generated, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    size = img.shape[0]
    thr = otsu_threshold(img)
    if thr is None:
        return 0.0, 0.0
    truth = silhouette_mask(cond_spec, size)
    cand = img > thr
    fg = cand if _iou(cand, truth) >= _iou(~cand, truth) else ~cand
    fg_iou = _iou(fg, truth)
    outside = ~_dilate(truth)
    bg_leakage = float((fg & outside).sum() / outside.sum()) if outside.any() else 0.0
    return fg_iou, bg_leakage


def report_table(reports: Sequence[EvalReport]) -> str:
    """Aggregate table: one row per report plus a mean row."""
    keys = ["self_sim", "concept_acc", "appearance_dist", "fg_iou", "bg_leakage"]
    lines = ["\t".join(["row"] + keys)]
    for i, r in enumerate(reports):
        lines.append("\t".join([str(i)] + [f"{getattr(r, k):.6g}" for k in keys]))
    if reports:
        means = []
        for k in keys:
            vals = [getattr(r, k) for r in reports if np.isfinite(getattr(r, k))]
            means.append(float(np.mean(vals)) if vals else float("nan"))
        lines.append("\t".join(["mean"] + [f"{m:.6g}" for m in means]))
    return "\n".join(lines) + "\n"
