import json

import numpy as np
import pytest

from habench.core import HabenchError, assemble_dataset, build_design_matrix
from habench.harmonize import (Combat, CombatFit, GlobalScalingFit, MethodError, apply_combat, apply_global_scaling,
                               available_methods, fit_combat, fit_global_scaling, get_method, identity_method,
                               load_model, register_method, unregister_method)
from habench.harmonize.combat import CombatError
from habench.synth import SiteSpec, SynthSpec, generate
from conftest import make_dataset, random_dataset


# -- global scaling ---------------------------------------------------------

def test_global_scaling_identity_when_sites_match_grand_mean():
    vals = np.array([[1.0, 2.0, 4.0], [1.0, 2.0, 4.0], [1.0, 2.0, 4.0], [1.0, 2.0, 4.0]])
    fit = fit_global_scaling(make_dataset(vals, ["A", "A", "B", "B"]))
    assert np.allclose(fit.theta_loc, 0, atol=1e-12) and np.allclose(fit.theta_scl, 1, rtol=1e-12)


def test_global_scaling_exact_linear_relation():
    g = np.array([1.0, 2.0, 5.0, 7.0])
    # site A: 2 g + 1; B and C chosen so the grand mean is g
    a = 2 * g + 1
    b = 0.5 * g + 2
    c = 3 * g - a - b
    ds = make_dataset(np.vstack([a, a, b, b, c, c]), ["A", "A", "B", "B", "C", "C"])
    fit = fit_global_scaling(ds)
    assert fit.theta_loc[0] == pytest.approx(1.0, abs=1e-12)
    assert fit.theta_scl[0] == pytest.approx(2.0, rel=1e-12)
    assert fit.sigma2 == pytest.approx(0.0, abs=1e-20)


def test_global_scaling_matches_normal_equations(rng):
    ds = random_dataset(rng, n_sites=3, V=40)
    fit = fit_global_scaling(ds)
    grand = ds.values.mean(axis=0)
    A = np.column_stack([np.ones_like(grand), grand])
    for i in range(3):
        yi = ds.values[ds.layout.rows_of(i)].mean(axis=0)
        coef = np.linalg.solve(A.T @ A, A.T @ yi)
        assert fit.theta_loc[i] == pytest.approx(coef[0], abs=1e-10)
        assert fit.theta_scl[i] == pytest.approx(coef[1], rel=1e-10)


def test_apply_global_scaling_arithmetic_and_inverse(rng):
    ds = make_dataset([[5.0, 1.0], [3.0, 3.0]], ["A", "B"])
    fit = GlobalScalingFit(("A", "B"), np.array([1.0, 0.0]), np.array([2.0, 1.0]), 0.0)
    out = apply_global_scaling(fit, ds)
    assert out.tolist() == [[2.0, 0.0], [3.0, 3.0]]
    ds = random_dataset(rng, V=30)
    fit = fit_global_scaling(ds)
    out = apply_global_scaling(fit, ds)
    rows = ds.layout.membership
    back = fit.theta_scl[rows][:, None] * out + fit.theta_loc[rows][:, None]
    assert np.allclose(back, ds.values, rtol=1e-12, atol=0)
    # affine per site with positive slope keeps voxel rank order in every image
    assert np.array_equal(np.argsort(out, axis=1, kind="stable"), np.argsort(ds.values, axis=1, kind="stable"))


def test_global_scaling_refit_exact_when_model_holds():
    # Every site scans the same subjects through its own affine intensity map,
    # so site-mean images are exactly affine in the grand mean.
    rng = np.random.default_rng(5)
    subjects = rng.normal(0.5, 0.1, size=(6, 200))
    maps = [(0.0, 1.0), (0.05, 1.1), (-0.03, 0.9)]
    vals = np.vstack([loc + scl * subjects for loc, scl in maps])
    ds = make_dataset(vals, np.repeat(["A", "B", "C"], 6))
    refit = fit_global_scaling(ds.with_values(apply_global_scaling(fit_global_scaling(ds), ds)))
    assert np.max(np.abs(refit.theta_loc)) <= 1e-12
    assert np.max(np.abs(refit.theta_scl - 1)) <= 1e-12


def test_global_scaling_errors():
    with pytest.raises(HabenchError, match="zero regressor variance"):
        fit_global_scaling(make_dataset(np.ones((4, 3)), ["A", "A", "B", "B"]))
    with pytest.raises(HabenchError, match="at least 2 sites"):
        fit_global_scaling(make_dataset(np.eye(3), ["A", "A", "A"]))
    fit = GlobalScalingFit(("A",), np.zeros(1), np.ones(1), 0.0)
    with pytest.raises(HabenchError, match="not present"):
        apply_global_scaling(fit, make_dataset([[1.0], [2.0]], ["A", "B"]))


# -- ComBat -----------------------------------------------------------------

def test_combat_hand_example():
    ds = make_dataset([[1.0], [3.0], [5.0], [7.0]], ["A", "A", "B", "B"])
    fit = fit_combat(ds, eb=False)
    assert fit.alpha_hat[0] == pytest.approx(4.0)
    assert fit.sigma_hat[0] ** 2 == pytest.approx(1.0)
    assert fit.gamma_hat[:, 0].tolist() == pytest.approx([-2.0, 2.0])
    assert np.array_equal(fit.gamma_star, fit.gamma_hat)
    assert np.array_equal(fit.delta_star2, fit.delta_hat2)
    assert apply_combat(fit, ds)[:, 0] == pytest.approx([3.0, 5.0, 3.0, 5.0], abs=1e-12)


def test_combat_single_site_is_identity(rng):
    ds = make_dataset(rng.normal(size=(10, 25)), ["A"] * 10)
    fit = fit_combat(ds, eb=False)
    assert np.allclose(fit.gamma_star, 0, atol=1e-12)
    assert np.allclose(apply_combat(fit, ds), ds.values, atol=1e-8)


def test_combat_equalizes_site_moments(rng):
    ds = random_dataset(rng, n_sites=4, V=60)
    out = apply_combat(fit_combat(ds, eb=False), ds)
    means = np.vstack([out[ds.layout.rows_of(i)].mean(axis=0) for i in range(4)])
    variances = np.vstack([out[ds.layout.rows_of(i)].var(axis=0) for i in range(4)])
    fit = fit_combat(ds, eb=False)
    assert np.max(np.abs(means - fit.alpha_hat)) <= 1e-8
    assert np.max(np.ptp(variances, axis=0) / variances.mean(axis=0)) <= 1e-6


def test_combat_idempotent_without_covariates(rng):
    ds = random_dataset(rng, n_sites=3, V=40)
    once = apply_combat(fit_combat(ds, eb=False), ds)
    ds1 = ds.with_values(once)
    twice = apply_combat(fit_combat(ds1, eb=False), ds1)
    assert np.max(np.abs(twice - once)) <= 1e-8


def _covariate_dataset(rng, equal_scales):
    n_per, S, V = 15, 3, 40
    sites = np.repeat(["A", "B", "C"], n_per)
    age = rng.uniform(9, 11, size=n_per * S)
    covs = [{"age": float(a)} for a in age]
    idx = np.repeat(np.arange(S), n_per)
    scale = np.ones((S, V)) if equal_scales else rng.uniform(0.5, 2.0, size=(S, V))
    vals = (rng.normal(size=V) + 0.3 * np.outer(age - 10, rng.normal(size=V))
            + rng.normal(size=(S, V))[idx] + scale[idx] * rng.normal(size=(n_per * S, V)))
    ds = make_dataset(vals, sites, covs, {"age": "continuous"})
    return ds, build_design_matrix(ds.table, ["age"])


@pytest.mark.xfail(strict=True, reason="site scale division breaks within-site orthogonality of residuals to the "
                                        "design when site scales differ; see the decisions ledger")
def test_combat_restores_beta_with_unequal_site_scales(rng):
    ds, design = _covariate_dataset(rng, equal_scales=False)
    fit = fit_combat(ds, design, eb=False)
    refit = fit_combat(ds.with_values(apply_combat(fit, ds, design)), design, eb=False)
    assert np.max(np.abs(refit.beta_hat - fit.beta_hat)) <= 1e-6


@pytest.mark.xfail(strict=True, reason="same cause as the beta-recovery case: idempotence needs residuals that stay "
                                        "orthogonal to the design after per-site rescaling")
def test_combat_idempotent_with_covariates(rng):
    ds, design = _covariate_dataset(rng, equal_scales=False)
    once = apply_combat(fit_combat(ds, design, eb=False), ds, design)
    ds1 = ds.with_values(once)
    twice = apply_combat(fit_combat(ds1, design, eb=False), ds1, design)
    assert np.max(np.abs(twice - once)) <= 1e-8


def test_combat_eb_shrinks_toward_site_means():
    spec = SynthSpec(seed=11, dims=(20, 20, 5), sites=(
        SiteSpec("A", 12, 0.05, 0.8), SiteSpec("B", 12, 0.05, 1.2), SiteSpec("C", 12, 0.05, 1.0)),
        affected_fraction=0.5)
    res = generate(spec)
    ds = assemble_dataset(res.volumes, res.mask, res.table)
    fit = fit_combat(ds, eb=True)
    assert fit.eb_used and fit.iterations >= 1
    gbar = np.array([h.gamma_bar for h in fit.hyperparams])[:, None]
    shrunk = np.abs(fit.gamma_star - gbar) <= np.abs(fit.gamma_hat - gbar) + 1e-15
    assert shrunk.mean() >= 0.99
    assert np.all(fit.delta_star2 > 0) and np.all(fit.sigma_hat > 0)
    assert fit.eb_monotone()


def test_combat_eb_thread_count_does_not_change_fit():
    spec = SynthSpec(seed=2, dims=(40, 30, 8), sites=(SiteSpec("A", 5, 0.05, 0.9), SiteSpec("B", 5, 0.05, 1.1)),
                     affected_fraction=0.3)
    res = generate(spec)
    ds = assemble_dataset(res.volumes, res.mask, res.table)
    one = fit_combat(ds, eb=True, threads=1)
    four = fit_combat(ds, eb=True, threads=4)
    assert np.array_equal(one.gamma_star, four.gamma_star)
    assert np.array_equal(one.delta_star2, four.delta_star2)
    assert one.eb_history == four.eb_history


def test_combat_errors():
    with pytest.raises(CombatError, match="fewer than 2"):
        fit_combat(make_dataset([[1.0], [2.0], [3.0]], ["A", "A", "B"]))


def test_combat_estimability_and_design_mismatch():
    covs = [{"g": v} for v in ["x", "x", "y", "y"]]
    ds = make_dataset([[1.0], [2.0], [3.0], [5.0]], ["A", "A", "B", "B"], covs, {"g": "categorical"})
    design = build_design_matrix(ds.table, ["g"])
    with pytest.raises(CombatError, match="not estimable"):
        fit_combat(ds, design, eb=False)
    fit = fit_combat(ds, eb=False)
    with pytest.raises(CombatError, match="do not match"):
        apply_combat(fit, ds, design)


def test_combat_model_json_round_trip(rng):
    ds = random_dataset(rng, n_sites=3, V=20)
    fit = fit_combat(ds, eb=True)
    obj = json.loads(json.dumps(fit.to_dict()))
    method, loaded = load_model(obj)
    assert isinstance(loaded, CombatFit)
    assert np.array_equal(method.apply(loaded, ds), apply_combat(fit, ds))


# -- registry ---------------------------------------------------------------

def test_builtin_methods_registered():
    assert {"none", "global_scaling", "combat"} <= set(available_methods())


def test_identity_is_bit_identical(rng):
    ds = random_dataset(rng)
    out = identity_method(ds)
    assert out.tobytes() == ds.values.tobytes()
    gs = get_method("global_scaling")
    assert np.array_equal(gs.apply(gs.fit(ds), ds), gs.apply(gs.fit(ds.with_values(out)), ds.with_values(out)))


def test_register_custom_method(rng):
    class Halve:
        name = "halve"

        def fit(self, dataset, design):
            return None

        def apply(self, fitted, dataset, design=None):
            return dataset.values / 2

    register_method("halve", Halve())
    try:
        from habench.tabular_io import parse_run_config
        cfg = parse_run_config({"method": "halve"})
        m = get_method(cfg.method, cfg)
        ds = random_dataset(rng)
        assert np.array_equal(m.apply(m.fit(ds, None), ds), ds.values / 2)
        with pytest.raises(MethodError, match="already registered"):
            register_method("halve", Halve())
    finally:
        unregister_method("halve")
    with pytest.raises(MethodError, match="available"):
        get_method("halve")


def test_configure_from_run_config():
    from habench.tabular_io import parse_run_config
    cfg = parse_run_config({"method": "combat", "combat_eb": False, "combat_tol": 1e-6})
    m = get_method("combat", cfg)
    assert isinstance(m, Combat) and m.eb is False and m.tol == 1e-6
