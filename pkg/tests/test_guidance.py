import logging

import numpy as np
import pytest

from conftest import fd_gradient, rel_err
from subguide.basis import BasisEntry, SemanticBasis, build_basis, project
from subguide.errors import ContractViolation, DomainError
from subguide.guidance import (
    AppearanceVec, GuidanceConfig, GuidanceTarget, appearance_energy,
    appearance_vec, compute_tau, extract_mask, guided_sample, prepare_target,
    structure_energy,
)
from subguide.model import ConceptPrompt, eval_denoiser
from subguide.schedule import make_schedule
from subguide.shapes import ShapeSpec, derive_condition, silhouette_mask
from subguide.tensor import Tape, Tensor, backward


# ---------------------------------------------------------------------------
# config defaults

def test_config_defaults_match_reference_setup():
    cfg = GuidanceConfig(lambda_s=600.0)
    assert cfg.lambda_a_value == pytest.approx(120.0)
    assert cfg.n_a == 2
    assert cfg.n_steps == 200
    assert cfg.guided_steps() == 120
    assert cfg.feature_site == "keys"
    assert 400 <= cfg.lambda_s <= 1000


def test_config_explicit_lambda_a_wins():
    cfg = GuidanceConfig(lambda_s=500.0, lambda_a=7.0)
    assert cfg.lambda_a_value == 7.0
    assert GuidanceConfig(lambda_s=500.0, lambda_a=0.0).lambda_a_value == 0.0


def test_config_validation():
    with pytest.raises(ContractViolation):
        GuidanceConfig(guidance_fraction=1.5)
    with pytest.raises(ContractViolation):
        GuidanceConfig(mask_mode="magic")
    with pytest.raises(ContractViolation):
        GuidanceConfig(lambda_s=-1.0)


# ---------------------------------------------------------------------------
# mask extraction

def test_extract_mask_quadrant():
    maps = np.zeros((2, 4, 4))
    maps[0, :2, :2] = 1.0  # concept token attends to one quadrant
    maps[1] = 1.0 - maps[0]
    mask = extract_mask(maps, 0, (8, 8))
    expected = np.zeros((8, 8))
    expected[:4, :4] = 1.0
    assert np.array_equal(mask, expected)


def test_extract_mask_uniform_degenerates_to_ones(caplog):
    maps = np.full((2, 4, 4), 0.5)
    with caplog.at_level(logging.WARNING):
        mask = extract_mask(maps, 0, (4, 4))
    assert np.all(mask == 1.0)
    assert any("degenerate" in r.message for r in caplog.records)


def test_extract_mask_bad_token_index():
    with pytest.raises(ContractViolation):
        extract_mask(np.zeros((2, 4, 4)), 5, (4, 4))


# ---------------------------------------------------------------------------
# tau

def test_tau_is_background_max_per_channel():
    coords = np.zeros((2, 2, 2))
    coords[0] = [[0.2, 0.5], [9.0, 9.0]]  # 9.0s sit in the foreground
    coords[1] = [[-1.0, -3.0], [9.0, 9.0]]
    mask = np.array([[0.0, 0.0], [1.0, 1.0]])
    tau = compute_tau(coords, mask)
    assert tau[0] == pytest.approx(0.5)
    assert tau[1] == pytest.approx(-1.0)  # negative, no clamping


def test_tau_all_foreground_is_domain_error():
    with pytest.raises(DomainError):
        compute_tau(np.zeros((2, 2, 2)), np.ones((2, 2)))


# ---------------------------------------------------------------------------
# structure energy

def _target(coords_ref, mask, tau=None, t=5):
    return GuidanceTarget(coords_by_t={t: coords_ref}, mask=mask,
                          tau_by_t=None if tau is None else {t: tau})


def test_structure_energy_zero_on_exact_match():
    ref = np.random.default_rng(0).standard_normal((3, 4, 4))
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1.0
    tau = compute_tau(ref, mask)
    tgt = _target(ref, mask, tau)
    coords = ref.copy()
    # background at/below tau and foreground matching => exactly zero
    coords[:, mask == 0] = tau[:, None] - 0.1
    tgt2 = _target(coords, mask, compute_tau(coords, mask))
    e = structure_energy(Tensor(coords), tgt2, 5, w=1.0)
    assert e.item() == 0.0


def test_structure_energy_all_ones_mask_is_plain_mse():
    ref = np.random.default_rng(1).standard_normal((3, 4, 4))
    tgt = _target(ref, np.ones((4, 4)))
    delta = 0.25
    e = structure_energy(Tensor(ref + delta), tgt, 5, w=17.0)
    # mean over pixels of squared channel-norm: 3 channels * delta^2
    assert e.item() == pytest.approx(3 * delta ** 2, rel=1e-12)


def test_structure_energy_backward_hand_value():
    # one of four background pixels exceeds tau by 0.3 in one channel:
    # backward = 0.3^2 / 4 = 0.0225; foreground matches so forward = 0
    ref = np.zeros((1, 2, 4))
    mask = np.zeros((2, 4))
    mask[:, :2] = 1.0  # 4 fg, 4 bg
    tau = np.array([0.5])
    coords = ref.copy()
    coords[0, 0, 2] = 0.8  # bg pixel, exceeds tau by 0.3
    tgt = GuidanceTarget(coords_by_t={5: ref}, mask=mask, tau_by_t={5: tau})
    e = structure_energy(Tensor(coords), tgt, 5, w=1.0)
    assert e.item() == pytest.approx(0.0225, rel=1e-12)
    e2 = structure_energy(Tensor(coords), tgt, 5, w=2.0)
    assert e2.item() == pytest.approx(0.045, rel=1e-12)


def test_structure_energy_additive_over_targets():
    rng = np.random.default_rng(2)
    coords = Tensor(rng.standard_normal((2, 3, 3)))
    mask = np.ones((3, 3))
    t1 = _target(rng.standard_normal((2, 3, 3)), mask)
    t2 = _target(rng.standard_normal((2, 3, 3)), mask)
    total = sum(structure_energy(coords, t, 5, 1.0).item() for t in (t1, t2))
    # additivity is by construction: the combined energy is the plain sum
    assert total == pytest.approx(
        structure_energy(coords, t1, 5, 1.0).item()
        + structure_energy(coords, t2, 5, 1.0).item())


def test_structure_energy_mask_all_zero_is_domain_error():
    tgt = GuidanceTarget(coords_by_t={5: np.zeros((1, 2, 2))},
                         mask=np.zeros((2, 2)), tau_by_t={5: np.zeros(1)})
    with pytest.raises(DomainError):
        structure_energy(Tensor(np.zeros((1, 2, 2))), tgt, 5, 1.0)


def test_structure_energy_monotone_in_tau():
    rng = np.random.default_rng(3)
    ref = rng.standard_normal((2, 4, 4))
    mask = np.zeros((4, 4))
    mask[0, 0] = 1.0
    coords = Tensor(rng.standard_normal((2, 4, 4)))
    base_tau = compute_tau(ref, mask)
    energies = []
    for bump in (0.0, 0.5, 2.0):
        tgt = GuidanceTarget(coords_by_t={5: ref}, mask=mask,
                             tau_by_t={5: base_tau + bump})
        energies.append(structure_energy(coords, tgt, 5, 1.0).item())
    assert energies[0] >= energies[1] >= energies[2]


def test_target_tau_mask_consistency_enforced():
    with pytest.raises(ContractViolation):
        GuidanceTarget(coords_by_t={}, mask=np.ones((2, 2)), tau_by_t={})
    with pytest.raises(ContractViolation):
        GuidanceTarget(coords_by_t={}, mask=np.zeros((2, 2)), tau_by_t=None)


# ---------------------------------------------------------------------------
# appearance

def test_appearance_vec_uniform_weights_is_plain_mean():
    rng = np.random.default_rng(4)
    feats = rng.standard_normal((3, 2, 2))
    coords = np.zeros((1, 2, 2))
    v = appearance_vec(Tensor(coords), Tensor(feats), 1)
    assert np.allclose(v.vectors[0].data, feats.mean(axis=(1, 2)), atol=1e-12)


def test_appearance_vec_constant_features():
    feats = np.tile(np.array([2.0, -1.0])[:, None, None], (1, 3, 3))
    coords = np.random.default_rng(5).standard_normal((2, 3, 3))
    v = appearance_vec(Tensor(coords), Tensor(feats), 2)
    for vk in v.vectors:
        assert np.allclose(vk.data, [2.0, -1.0], atol=1e-12)


def test_appearance_vec_two_pixel_hand_value():
    # logits (ln 3, 0) -> sigmoid (0.75, 0.5) -> weights (0.6, 0.4)
    coords = np.array([[[np.log(3.0), 0.0]]])  # (1, 1, 2)
    feats = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])  # (2, 1, 2)
    v = appearance_vec(Tensor(coords), Tensor(feats), 1)
    assert np.allclose(v.vectors[0].data, [0.6, 0.4], atol=1e-12)


def test_appearance_energy_values():
    v = AppearanceVec([Tensor([0.3, -0.4])])
    assert appearance_energy(v, [np.zeros(2)]).item() == pytest.approx(0.25)
    assert appearance_energy(v, [np.array([0.3, -0.4])]).item() == 0.0
    v2 = AppearanceVec([Tensor([0.6, -0.8])])
    assert appearance_energy(v2, [np.zeros(2)]).item() == pytest.approx(1.0)


def test_appearance_vec_too_many_channels():
    with pytest.raises(ContractViolation):
        appearance_vec(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((3, 2, 2))), 2)


# ---------------------------------------------------------------------------
# gradient integrity of the energies through the denoiser (micro model)

def _micro_basis(micro_model, ts=(49, 24), n_basis=6, n_seeds=2):
    sched = make_schedule(50)
    return build_basis(micro_model, 0, sched, guidance_timesteps=ts,
                       n_seeds=n_seeds, n_basis=n_basis, invert_steps=5,
                       rng_seed=1), sched


def _lat_energy(micro_model, basis, sched, t, kind, target):
    def f(x):
        with_tape = Tape()
        with with_tape:
            xt = Tensor(x, requires_grad=True)
            _, rec = eval_denoiser(micro_model, xt, t, ConceptPrompt(0, 0), capture=True)
            coords = project(rec.features, basis.entries[t])
            if kind == "g_s":
                e = structure_energy(coords, target, t, w=1.0)
            else:
                v = appearance_vec(coords, rec.features, 2)
                e = appearance_energy(v, [np.linspace(0, 1, rec.features.shape[0]),
                                          np.ones(rec.features.shape[0])])
            grads = backward(e, with_tape)
            return e.item(), grads[xt].data

    return f


@pytest.mark.parametrize("kind", ["g_s", "g_a"])
def test_latent_gradient_matches_fd(micro_model, kind):
    basis, sched = _micro_basis(micro_model)
    t = 49
    rng = np.random.default_rng(6)
    g = micro_model.config.feature_size
    ref = rng.standard_normal((basis.n_basis, g, g))
    mask = np.zeros((g, g))
    mask[:2] = 1.0
    target = GuidanceTarget(coords_by_t={t: ref}, mask=mask,
                            tau_by_t={t: compute_tau(ref, mask)})
    f = _lat_energy(micro_model, basis, sched, t, kind, target)
    x0 = rng.standard_normal((1, 1, 8, 8))
    _, analytic = f(x0.copy())

    def scalar(x):
        return f(x)[0]

    numeric = fd_gradient(scalar, x0.copy(), h=1e-4)
    assert rel_err(analytic, numeric) < 1e-4


# ---------------------------------------------------------------------------
# prepare_target + guided_sample on the micro model

def _micro_spec():
    return ShapeSpec("circle", "solid", 0.9, (0.5, 0.5), 0.3, 0.0, 0.05)


def _micro_cfg(**kw):
    base = dict(lambda_s=30.0, s=1.0, n_steps=6, invert_steps=6,
                guidance_fraction=0.5, n_a=2, mask_mode="provided")
    base.update(kw)
    return GuidanceConfig(**base)


@pytest.fixture(scope="module")
def micro_stack(micro_model):
    sched = make_schedule(50)
    from subguide.ddim import uniform_plan

    plan = uniform_plan(50, 6, "sample")
    ts = plan.timesteps  # cover all six steps so any fraction works
    basis = build_basis(micro_model, 0, sched, guidance_timesteps=ts, n_seeds=2,
                        n_basis=6, invert_steps=6, rng_seed=2)
    return sched, basis


def test_prepare_target_shapes_and_determinism(micro_model, micro_stack):
    sched, basis = micro_stack
    spec = _micro_spec()
    cond = derive_condition(spec, "edge", size=8)
    cfg = _micro_cfg()
    mask = silhouette_mask(spec, 4).astype(float)
    t1 = prepare_target(micro_model, cond, basis, spec.prompt(), cfg, sched,
                        provided_mask=mask)
    t2 = prepare_target(micro_model, cond, basis, spec.prompt(), cfg, sched,
                        provided_mask=mask)
    for t in basis.entries:
        assert t1.coords_by_t[t].shape == (6, 4, 4)
        assert np.array_equal(t1.coords_by_t[t], t2.coords_by_t[t])
    assert t1.tau_by_t is not None
    assert t1.start_latent.shape == (1, 1, 8, 8)


def test_prepare_target_no_mask_variant(micro_model, micro_stack):
    sched, basis = micro_stack
    cond = derive_condition(_micro_spec(), "silhouette", size=8)
    cfg = _micro_cfg(i2i_no_mask=True)
    tgt = prepare_target(micro_model, cond, basis, ConceptPrompt(0, 0), cfg, sched)
    assert np.all(tgt.mask == 1.0)
    assert tgt.tau_by_t is None


def test_prepare_target_hard_threshold_mode(micro_model, micro_stack):
    sched, basis = micro_stack
    spec = _micro_spec()
    cond = derive_condition(spec, "silhouette", size=8)
    mask = silhouette_mask(spec, 4).astype(float)
    cfg = _micro_cfg(threshold_mode="hard", hard_threshold=0.25)
    tgt = prepare_target(micro_model, cond, basis, spec.prompt(), cfg, sched,
                         provided_mask=mask)
    for tau in tgt.tau_by_t.values():
        assert np.all(tau == 0.25)


def test_prepare_target_rejects_wrong_model(micro_model, micro_stack):
    sched, basis = micro_stack
    import dataclasses

    bad = dataclasses.replace(basis) if False else basis
    wrong = SemanticBasis(concept_key=basis.concept_key, model_hash=b"\0" * 32,
                          feature_site=basis.feature_site, n_seeds=1, n_basis=6,
                          entries=basis.entries)
    with pytest.raises(ContractViolation):
        prepare_target(micro_model, derive_condition(_micro_spec(), "edge", size=8),
                       wrong, ConceptPrompt(0, 0), _micro_cfg(mask_mode="ones"), sched)


def test_guided_sample_off_equals_sibling_bitwise(micro_model, micro_stack):
    sched, basis = micro_stack
    spec = _micro_spec()
    cond = derive_condition(spec, "edge", size=8)
    cfg = _micro_cfg(lambda_s=0.0, lambda_a=0.0, mask_mode="ones")
    tgt = prepare_target(micro_model, cond, basis, spec.prompt(), cfg, sched)
    img, sib, diags = guided_sample(micro_model, spec.prompt(), [tgt], basis,
                                    cfg, rng_seed=3, sched=sched)
    assert np.array_equal(img.data, sib.data)


def test_guided_sample_off_equals_plain_run_bitwise(micro_model, micro_stack):
    from subguide.ddim import run, uniform_plan

    sched, basis = micro_stack
    spec = _micro_spec()
    cond = derive_condition(spec, "edge", size=8)
    cfg = _micro_cfg(lambda_s=0.0, lambda_a=0.0, mask_mode="ones")
    tgt = prepare_target(micro_model, cond, basis, spec.prompt(), cfg, sched)
    img, sib, _ = guided_sample(micro_model, spec.prompt(), [tgt], basis, cfg,
                                rng_seed=3, sched=sched)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((1, 1, 8, 8))
    plain = run(micro_model, Tensor(x0), spec.prompt(),
                uniform_plan(50, cfg.n_steps, "sample"), sched, s=cfg.s)
    assert np.array_equal(img.data, np.clip(plain.latents[-1][0], 0, 1))


def test_guided_sample_deterministic_and_diagnosed(micro_model, micro_stack):
    sched, basis = micro_stack
    spec = _micro_spec()
    cond = derive_condition(spec, "silhouette", size=8)
    cfg = _micro_cfg()
    mask = silhouette_mask(spec, 4).astype(float)
    tgt = prepare_target(micro_model, cond, basis, spec.prompt(), cfg, sched,
                         provided_mask=mask)
    out1 = guided_sample(micro_model, spec.prompt(), [tgt], basis, cfg, 4, sched)
    out2 = guided_sample(micro_model, spec.prompt(), [tgt], basis, cfg, 4, sched)
    assert np.array_equal(out1[0].data, out2[0].data)
    assert np.array_equal(out1[1].data, out2[1].data)
    assert len(out1[2]) == cfg.guided_steps(cfg.n_steps)
    for d in out1[2]:
        assert np.isfinite(d.g_s) and np.isfinite(d.g_a)
        assert d.g_s >= 0.0 and d.g_a >= 0.0


def test_guided_sample_fixed_seed_variant(micro_model, micro_stack):
    sched, basis = micro_stack
    spec = _micro_spec()
    cond = derive_condition(spec, "natural", size=8)
    cfg = _micro_cfg(i2i_fixed_seed=True, mask_mode="ones")
    tgt = prepare_target(micro_model, cond, basis, spec.prompt(), cfg, sched)
    img, sib, _ = guided_sample(micro_model, spec.prompt(), [tgt], basis, cfg,
                                rng_seed=0, sched=sched)
    cfg2 = _micro_cfg(i2i_fixed_seed=False, mask_mode="ones")
    img2, _, _ = guided_sample(micro_model, spec.prompt(), [tgt], basis, cfg2,
                               rng_seed=0, sched=sched)
    assert not np.array_equal(img.data, img2.data)  # start latent differs


def test_guided_sample_compositional_targets(micro_model, micro_stack):
    # at the first guided step both runs share the same latent, so the
    # two-target energy is exactly the sum of the single-target energies
    sched, basis = micro_stack
    spec = _micro_spec()
    cfg = _micro_cfg(lambda_s=1.0, guidance_fraction=0.5)
    mask = silhouette_mask(spec, 4).astype(float)
    t_edge = prepare_target(micro_model, derive_condition(spec, "edge", 8), basis,
                            spec.prompt(), cfg, sched, provided_mask=mask)
    t_sil = prepare_target(micro_model, derive_condition(spec, "silhouette", 8),
                           basis, spec.prompt(), cfg, sched, provided_mask=mask)
    _, _, d_both = guided_sample(micro_model, spec.prompt(), [t_edge, t_sil],
                                 basis, cfg, 11, sched)
    _, _, d_edge = guided_sample(micro_model, spec.prompt(), [t_edge], basis,
                                 cfg, 11, sched)
    _, _, d_sil = guided_sample(micro_model, spec.prompt(), [t_sil], basis,
                                cfg, 11, sched)
    assert d_both[0].g_s == pytest.approx(d_edge[0].g_s + d_sil[0].g_s, rel=1e-10)
    assert d_both[0].fwd_dist == pytest.approx(
        d_edge[0].fwd_dist + d_sil[0].fwd_dist, rel=1e-10)


def test_guided_sample_mismatched_site_rejected(micro_model, micro_stack):
    sched, basis = micro_stack
    cfg = _micro_cfg(feature_site="queries", mask_mode="ones")
    tgt = GuidanceTarget(coords_by_t={t: np.zeros((6, 4, 4)) for t in basis.entries},
                         mask=np.ones((4, 4)), tau_by_t=None)
    with pytest.raises(ContractViolation):
        guided_sample(micro_model, ConceptPrompt(0, 0), [tgt], basis, cfg, 0, sched)
