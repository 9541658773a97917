"""Procedural toy corpus: gray shapes (concept) textured in a style, plus
condition images derived analytically from the vector spec.

Conditions are computed from the spec geometry, never by filtering pixels,
so the silhouette/edge/depth maps are exact structure oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .model import ConceptPrompt
from .tensor import Tensor

CONCEPTS = ("circle", "square", "triangle", "cross")
STYLES = ("solid", "gradient", "speckle")
MODALITIES = ("edge", "silhouette", "depthlike", "natural")

# one fixed texture shared by every speckle shape; placement varies the crop
_SPECKLE = np.random.default_rng(901238).random((64, 64))


@dataclass(frozen=True)
class ShapeSpec:
    concept: str
    style: str
    fg_color: float
    center: tuple[float, float]
    scale: float
    rotation: float
    bg_level: float

    def __post_init__(self):
        if self.concept not in CONCEPTS:
            raise ContractViolation(f"unknown concept {self.concept!r}")
        if self.style not in STYLES:
            raise ContractViolation(f"unknown style {self.style!r}")
        if not (0.0 <= self.fg_color <= 1.0 and 0.0 <= self.bg_level <= 1.0):
            raise ContractViolation("colors must lie in [0, 1]")
        cx, cy = self.center
        if not (0.25 <= cx <= 0.75 and 0.25 <= cy <= 0.75):
            raise ContractViolation(f"center {self.center} outside [0.25, 0.75]^2")
        if not 0.2 <= self.scale <= 0.4:
            raise ContractViolation(f"scale {self.scale} outside [0.2, 0.4]")
        margin = min(cx, cy, 1.0 - cx, 1.0 - cy)
        if bounding_radius(self.concept, self.scale) > margin - 0.01:
            raise ContractViolation(
                f"shape of scale {self.scale} at {self.center} would leave the canvas")

    @property
    def concept_id(self) -> int:
        return CONCEPTS.index(self.concept)

    @property
    def style_id(self) -> int:
        return STYLES.index(self.style)

    def prompt(self) -> ConceptPrompt:
        return ConceptPrompt(self.concept_id, self.style_id)


@dataclass(frozen=True)
class ConditionImage:
    modality: str
    pixels: Tensor  # 1 x H x W in [0, 1]


def bounding_radius(concept: str, scale: float) -> float:
    """Radius of the smallest circle containing the shape.

    `scale` is the circle radius, the square half-side (so a square of scale
    s spans 2*s of the canvas), the triangle circumradius, or the cross
    bounding radius.
    """
    return scale * math.sqrt(2.0) if concept == "square" else scale


def _grid(size: int):
    coords = (np.arange(size) + 0.5) / size
    return np.meshgrid(coords, coords)  # x (columns), y (rows)


def signed_distance(spec: ShapeSpec, size: int) -> np.ndarray:
    """Signed distance (negative inside) sampled at pixel centers."""
    xs, ys = _grid(size)
    cx, cy = spec.center
    px, py = xs - cx, ys - cy
    c, s = math.cos(-spec.rotation), math.sin(-spec.rotation)
    rx = c * px - s * py
    ry = s * px + c * py
    r = spec.scale
    if spec.concept == "circle":
        return np.hypot(px, py) - r
    if spec.concept == "square":
        return np.maximum(np.abs(rx), np.abs(ry)) - r
    if spec.concept == "triangle":
        # equilateral: max over the three outward edge half-planes
        d = np.full((size, size), -np.inf)
        for k in range(3):
            ang = -math.pi / 2 + 2.0 * math.pi * k / 3.0
            d = np.maximum(d, rx * math.cos(ang) + ry * math.sin(ang))
        return d - r / 2.0
    # cross: union of two rectangles sized to a bounding radius of `scale`
    arm = r / math.sqrt(1.0 + 1.0 / 9.0)
    w = arm / 3.0
    d1 = np.maximum(np.abs(rx) - arm, np.abs(ry) - w)
    d2 = np.maximum(np.abs(rx) - w, np.abs(ry) - arm)
    return np.minimum(d1, d2)


def silhouette_mask(spec: ShapeSpec, size: int) -> np.ndarray:
    return signed_distance(spec, size) <= 0.0


def render(spec: ShapeSpec, size: int = 32) -> Tensor:
    """Deterministic rasterization of a spec to a 1 x size x size image."""
    inside = silhouette_mask(spec, size)
    img = np.full((size, size), spec.bg_level)
    if spec.style == "solid":
        img[inside] = spec.fg_color
    elif spec.style == "gradient":
        xs, ys = _grid(size)
        cx, cy = spec.center
        c, s = math.cos(spec.rotation), math.sin(spec.rotation)
        proj = c * (xs - cx) + s * (ys - cy)
        ramp = np.clip((proj + spec.scale) / (2.0 * spec.scale), 0.0, 1.0)
        img[inside] = spec.fg_color * (0.4 + 0.6 * ramp[inside])
    else:  # speckle
        ii, jj = np.nonzero(inside)
        tex = _SPECKLE[ii % 64, jj % 64]
        img[inside] = spec.fg_color * (0.55 + 0.45 * tex)
    return Tensor(img[None, :, :])


def derive_condition(spec: ShapeSpec, modality: str, size: int = 32) -> ConditionImage:
    if modality not in MODALITIES:
        raise ContractViolation(f"unsupported modality {modality!r}")
    if modality == "natural":
        return ConditionImage("natural", render(spec, size))
    inside = silhouette_mask(spec, size)
    if modality == "silhouette":
        pix = inside.astype(np.float64)
    elif modality == "edge":
        shifted_out = np.zeros_like(inside)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rolled = np.roll(inside, (dy, dx), axis=(0, 1))
            if dy == 1:
                rolled[0, :] = False
            elif dy == -1:
                rolled[-1, :] = False
            if dx == 1:
                rolled[:, 0] = False
            elif dx == -1:
                rolled[:, -1] = False
            shifted_out |= ~rolled
        pix = (inside & shifted_out).astype(np.float64)
    else:  # depthlike
        d = signed_distance(spec, size)
        depth = np.where(inside, -d, 0.0)
        peak = depth.max()
        if peak > 0:
            depth = depth / peak
        pix = depth
    return ConditionImage(modality, Tensor(pix[None, :, :]))


def sample_specs(n: int, rng_seed: int) -> list[ShapeSpec]:
    """Round-robin over concept x style (exactly uniform), random pose."""
    if n < 1:
        raise ContractViolation("need n >= 1")
    rng = np.random.default_rng(rng_seed)
    specs = []
    for i in range(n):
        concept = CONCEPTS[i % len(CONCEPTS)]
        style = STYLES[(i // len(CONCEPTS)) % len(STYLES)]
        scale = rng.uniform(0.2, 0.33 if concept == "square" else 0.4)
        bound = bounding_radius(concept, scale)
        lo = max(0.25, bound + 0.015)
        hi = min(0.75, 1.0 - bound - 0.015)
        center = (rng.uniform(lo, hi), rng.uniform(lo, hi))
        specs.append(ShapeSpec(
            concept=concept,
            style=style,
            fg_color=rng.uniform(0.65, 1.0),
            center=center,
            scale=scale,
            rotation=rng.uniform(0.0, 2.0 * math.pi),
            bg_level=rng.uniform(0.0, 0.25),
        ))
    return specs


def sample_dataset(n: int, rng_seed: int, size: int = 32):
    """Deterministic corpus of (image, prompt) pairs."""
    return [(render(spec, size), spec.prompt()) for spec in sample_specs(n, rng_seed)]
