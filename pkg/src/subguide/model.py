"""Tiny conditional U-Net noise predictor.

Three resolution levels (32 -> 16 -> 8 for 32x32 inputs), single-conv
residual blocks with additive skip connections, one single-head
self-attention and one cross-attention over the two prompt tokens at the
first decoder block (16x16, 64 channels). The self-attention keys at that
block are the default diffusion features; queries, values or the block's
conv input can be captured instead for the feature-site ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation
from .tensor import (
    Tensor, conv2d, group_norm, matmul, reduce_mean, reshape, silu, softmax,
    take_rows, transpose, upsample_nearest2x,
)

FEATURE_SITES = ("keys", "queries", "values", "conv")
DEFAULT_FEATURE_SITE = "keys"

# Unit scale of captured diffusion features. Chosen so that the default
# guidance strengths (lambda_s in [400, 1000]) land in the effective band:
# energies are quadratic in the features, so the latent gradients scale with
# the square of this constant. Never affects the eps prediction itself.
FEATURE_SCALE = 3.0 / 32.0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 1
    base_width: int = 32
    channel_mult: tuple[int, int, int] = (1, 2, 2)
    num_concepts: int = 4
    num_styles: int = 3
    time_dim: int = 64
    token_dim: int = 64
    norm_groups: int = 8

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(self.base_width * m for m in self.channel_mult)

    @property
    def attn_channels(self) -> int:
        # channel count at the first decoder block, where features are read
        return self.widths[1]

    @property
    def feature_size(self) -> int:
        return self.image_size // 2

    @property
    def num_tokens(self) -> int:
        # one shared null token + concept tokens + style tokens
        return 1 + self.num_concepts + self.num_styles


@dataclass(frozen=True)
class ConceptPrompt:
    """Discrete stand-in for a text prompt: a concept slot and a style slot.

    None in both slots is the unconditional prompt.
    """

    concept_id: Optional[int] = None
    style_id: Optional[int] = None

    @property
    def is_null(self) -> bool:
        return self.concept_id is None and self.style_id is None


NULL_PROMPT = ConceptPrompt(None, None)


@dataclass
class FeatureRecord:
    """Diffusion features captured at one denoiser evaluation.

    Shapes drop the batch axis when the evaluation batch is 1:
    features (C, H', W'), xattn (2, H', W'), bottleneck (C2, H'', W'').
    """

    t: int
    features: Tensor
    xattn: Tensor
    bottleneck: Tensor
    site: str = DEFAULT_FEATURE_SITE


class DenoiserModel:
    """Parameter container; evaluation never mutates it."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, rng_seed: int = 0) -> "DenoiserModel":
        rng = np.random.default_rng(rng_seed)
        p: dict[str, Tensor] = {}

        def conv(name, cin, cout, zero=False, k=3):
            std = math.sqrt(2.0 / (cin * k * k))
            w = np.zeros((cout, cin, k, k)) if zero else rng.normal(0.0, std, (cout, cin, k, k))
            p[f"{name}.w"] = Tensor(w, requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

        def linear(name, din, dout):
            p[f"{name}.w"] = Tensor(rng.normal(0.0, math.sqrt(1.0 / din), (din, dout)),
                                    requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(dout), requires_grad=True)

        def norm(name, c):
            p[f"{name}.g"] = Tensor(np.ones(c), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(c), requires_grad=True)

        def block(name, c):
            norm(f"{name}.gn", c)
            conv(f"{name}.conv", c, c)
            linear(f"{name}.temb", config.time_dim, c)

        c0, c1, c2 = config.widths
        d = config.time_dim
        linear("time_mlp.l1", d, d)
        linear("time_mlp.l2", d, d)
        # row 0 is the dedicated null token; starting it at zero (with the
        # zero-initialized conditioning projections below) keeps the whole
        # conditioning pathway exactly inert until real tokens appear
        table = rng.normal(0.0, 1.0, (config.num_tokens, config.token_dim))
        table[0] = 0.0
        p["tokens.table"] = Tensor(table, requires_grad=True)
        # pooled-token injection into the time embedding; zero-init weight
        p["cond.w"] = Tensor(np.zeros((config.token_dim, d)), requires_grad=True)
        p["cond.b"] = Tensor(np.zeros(d), requires_grad=True)
        conv("conv_in", config.in_channels, c0)
        conv("down1", c0, c1)
        block("enc2", c1)
        conv("down2", c1, c2)
        block("mid", c2)
        conv("up1", c2, c1)
        block("dec1", c1)
        C = config.attn_channels
        norm("sattn.gn", C)
        # 0.5x scaled projections keep early-training attention logits tame
        for nm in ("sattn.wq", "sattn.wk", "sattn.wv", "sattn.wo"):
            p[nm] = Tensor(rng.normal(0.0, 0.5 * math.sqrt(1.0 / C), (C, C)), requires_grad=True)
        norm("xattn.gn", C)
        p["xattn.wq"] = Tensor(rng.normal(0.0, 0.5 * math.sqrt(1.0 / C), (C, C)), requires_grad=True)
        p["xattn.wk"] = Tensor(rng.normal(0.0, math.sqrt(1.0 / config.token_dim),
                                          (config.token_dim, C)), requires_grad=True)
        p["xattn.wv"] = Tensor(rng.normal(0.0, math.sqrt(1.0 / config.token_dim),
                                          (config.token_dim, C)), requires_grad=True)
        p["xattn.wo"] = Tensor(np.zeros((C, C)), requires_grad=True)
        conv("up2", c1, c0)
        block("dec2", c0)
        norm("out.gn", c0)
        conv("out", c0, config.in_channels, zero=True, k=1)
        return cls(config, p)


def prompt_token_ids(config: ModelConfig, prompt: ConceptPrompt) -> np.ndarray:
    """Map a prompt to its two embedding-table rows (0 is the null token)."""
    cid, sid = prompt.concept_id, prompt.style_id
    if cid is not None and not 0 <= cid < config.num_concepts:
        raise ContractViolation(f"concept_id {cid} outside [0, {config.num_concepts})")
    if sid is not None and not 0 <= sid < config.num_styles:
        raise ContractViolation(f"style_id {sid} outside [0, {config.num_styles})")
    concept_tok = 0 if cid is None else 1 + cid
    style_tok = 0 if sid is None else 1 + config.num_concepts + sid
    return np.array([concept_tok, style_tok], dtype=np.int64)


def sinusoidal_embedding(t_vec: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t_vec, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _linear(p, name, x: Tensor) -> Tensor:
    return matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def _conv(p, name, x: Tensor, stride=1) -> Tensor:
    w = p[f"{name}.w"]
    pad = w.shape[2] // 2
    y = conv2d(x, w, stride=stride, padding=pad)
    return y + reshape(p[f"{name}.b"], (w.shape[0], 1, 1))


def _block(p, name, x: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = _conv(p, f"{name}.conv", silu(group_norm(x, p[f"{name}.gn.g"], p[f"{name}.gn.b"], groups)))
    tproj = _linear(p, f"{name}.temb", silu(temb))
    B, c = tproj.shape
    return x + h + reshape(tproj, (B, c, 1, 1))


def denoiser_forward(model: DenoiserModel, x: Tensor, t_vec: np.ndarray,
                     token_ids: np.ndarray, capture: bool = False,
                     site: str = DEFAULT_FEATURE_SITE):
    """Batched forward pass. Returns (eps, captured) where captured is a dict
    with raw batched tensors {features, xattn, bottleneck} or None."""
    cfg = model.config
    p = model.params
    if site not in FEATURE_SITES:
        raise ContractViolation(f"unknown feature site {site!r}; one of {FEATURE_SITES}")
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.image_size \
            or x.shape[3] != cfg.image_size:
        raise ContractViolation(
            f"input shape {x.shape} != (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
    B = x.shape[0]
    g = cfg.norm_groups

    temb = Tensor(sinusoidal_embedding(t_vec, cfg.time_dim))
    temb = _linear(p, "time_mlp.l2", silu(_linear(p, "time_mlp.l1", temb)))

    ids = np.asarray(token_ids, dtype=np.int64).reshape(B * 2)
    tok = reshape(take_rows(p["tokens.table"], ids), (B, 2, cfg.token_dim))
    # second conditioning path: pooled tokens shift the time embedding
    temb = temb + _linear(p, "cond", reduce_mean(tok, axes=(1,)))

    e1 = _conv(p, "conv_in", x)
    h = _conv(p, "down1", e1, stride=2)
    e2 = _block(p, "enc2", h, temb, g)
    h = _conv(p, "down2", e2, stride=2)
    mid = _block(p, "mid", h, temb, g)

    h = upsample_nearest2x(_conv(p, "up1", mid))
    h = _block(p, "dec1", h + e2, temb, g)

    captured: Optional[dict] = {"bottleneck": mid} if capture else None
    if capture and site == "conv":
        captured["features"] = h * FEATURE_SCALE

    # self-attention over the feature grid, single head
    C = cfg.attn_channels
    Hf = Wf = cfg.feature_size
    N = Hf * Wf
    hn = group_norm(h, p["sattn.gn.g"], p["sattn.gn.b"], g)
    hf = transpose(reshape(hn, (B, C, N)), (0, 2, 1))
    q = matmul(hf, p["sattn.wq"])
    k = matmul(hf, p["sattn.wk"])
    v = matmul(hf, p["sattn.wv"])
    if capture and site in ("keys", "queries", "values"):
        chosen = {"keys": k, "queries": q, "values": v}[site]
        captured["features"] = reshape(transpose(chosen, (0, 2, 1)), (B, C, Hf, Wf)) * FEATURE_SCALE
    att = softmax(matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(C)), axis=-1)
    o = matmul(matmul(att, v), p["sattn.wo"])
    h = h + reshape(transpose(o, (0, 2, 1)), (B, C, Hf, Wf))

    # cross-attention: queries from the grid, keys/values from the 2 tokens
    hn = group_norm(h, p["xattn.gn.g"], p["xattn.gn.b"], g)
    hf = transpose(reshape(hn, (B, C, N)), (0, 2, 1))
    q = matmul(hf, p["xattn.wq"])
    tk = matmul(tok, p["xattn.wk"])
    tv = matmul(tok, p["xattn.wv"])
    xatt = softmax(matmul(q, transpose(tk, (0, 2, 1))) * (1.0 / math.sqrt(C)), axis=-1)
    o = matmul(matmul(xatt, tv), p["xattn.wo"])
    h = h + reshape(transpose(o, (0, 2, 1)), (B, C, Hf, Wf))
    if capture:
        captured["xattn"] = reshape(transpose(xatt, (0, 2, 1)), (B, 2, Hf, Wf))

    h = upsample_nearest2x(_conv(p, "up2", h))
    h = _block(p, "dec2", h + e1, temb, g)
    eps = _conv(p, "out", silu(group_norm(h, p["out.gn.g"], p["out.gn.b"], g)))
    return eps, captured


def _squeeze_feature(t: Tensor) -> Tensor:
    return reshape(t, t.shape[1:]) if t.shape[0] == 1 else t


def eval_denoiser(model: DenoiserModel, x_t: Tensor, t: int, c: ConceptPrompt,
                  capture: bool = False, site: str = DEFAULT_FEATURE_SITE):
    """Evaluate eps_theta(x_t; t, c); optionally capture diffusion features.

    Capture never perturbs eps. With a batch of 1 the record's arrays drop
    the batch axis.
    """
    sched_t = int(t)
    if sched_t < 0:
        raise ContractViolation(f"negative timestep {t}")
    B = x_t.shape[0]
    t_vec = np.full(B, sched_t, dtype=np.int64)
    ids = np.tile(prompt_token_ids(model.config, c), (B, 1))
    eps, cap = denoiser_forward(model, x_t, t_vec, ids, capture=capture, site=site)
    rec = None
    if capture:
        rec = FeatureRecord(
            t=sched_t,
            features=_squeeze_feature(cap["features"]),
            xattn=_squeeze_feature(cap["xattn"]),
            bottleneck=_squeeze_feature(cap["bottleneck"]),
            site=site,
        )
    return eps, rec


def cfg_eps(model: DenoiserModel, x_t: Tensor, t: int, c: ConceptPrompt,
            s: float) -> Tensor:
    """Classifier-free guided noise estimate (1+s)*eps(c) - s*eps(null)."""
    if s < 0:
        raise ContractViolation(f"cfg scale must be >= 0, got {s}")
    if s == 0 or c.is_null:
        eps, _ = eval_denoiser(model, x_t, t, c)
        return eps
    B = x_t.shape[0]
    stacked = Tensor(np.concatenate([x_t.data, x_t.data], axis=0))
    ids = np.concatenate([
        np.tile(prompt_token_ids(model.config, c), (B, 1)),
        np.tile(prompt_token_ids(model.config, NULL_PROMPT), (B, 1)),
    ])
    t_vec = np.full(2 * B, int(t), dtype=np.int64)
    eps_pair, _ = denoiser_forward(model, stacked, t_vec, ids)
    cond, uncond = eps_pair.data[:B], eps_pair.data[B:]
    return Tensor((1.0 + s) * cond - s * uncond)
