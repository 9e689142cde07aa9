import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clusterdyn import (
    Bernoulli,
    ClusterData,
    Coarsening,
    EmpiricalLaw,
    InsufficientBurnIn,
    OptimalTarget,
    PositivityViolated,
    RegimeSpec,
    SubCluster,
    TabularLaw,
    compositional_gformula_expectation,
    eif_phi,
    eif_psi,
    empirical_cate_and_eta,
    fit_empirical,
    ipw_estimate,
    large_cluster_density,
    large_cluster_value,
    make_model,
    one_step_estimate,
    online_estimate,
    optimal_regime,
    plugin_estimate,
    simulate_cluster,
    z_quantile,
)

from conftest import random_model


def data_of(L, A, Y):
    return ClusterData(np.array(L), np.array(A), np.array(Y))


def exact_empirical(model, prop1, n):
    """Counts whose ratios reproduce the model tables exactly (requires integral cells)."""
    prop = np.stack([1 - np.asarray(prop1), np.asarray(prop1)])
    counts_o = np.rint(n * model.q_l[None, :, None] * prop[:, :, None] * model.q_y).astype(np.int64)
    assert np.allclose(counts_o, n * model.q_l[None, :, None] * prop[:, :, None] * model.q_y, atol=1e-9)
    counts_b = counts_o.sum(axis=2)
    return EmpiricalLaw(n, counts_b.sum(axis=0), counts_b, counts_o, model.scores)


def data_from_counts(counts_o):
    rows = [(l, a, y) for (a, l, y), c in np.ndenumerate(counts_o) for _ in range(c)]
    arr = np.array(rows).T
    return ClusterData(arr[0], arr[1], arr[2])


@pytest.fixture
def dyadic_model():
    return make_model([0.25, 0.75], [[[0.5, 0.5], [0.75, 0.25]], [[0.25, 0.75], [0.5, 0.5]]])


# -- empirical law ----------------------------------------------------------


def test_fit_counts():
    emp = fit_empirical(data_of([0, 0, 1], [1, 0, 1], [1, 0, 1]), levels=2)
    np.testing.assert_allclose(emp.q_l_hat, [2 / 3, 1 / 3])
    assert emp.q_hat[1, 0] == 0.5
    assert emp.q_y_hat[1, 0, 1] == 1.0
    assert np.all(np.isnan(emp.q_y_hat[0, 1]))
    assert (0, 1) in emp.undefined_cells


def test_fit_single_observation():
    emp = fit_empirical(data_of([1], [0], [1]), levels=2)
    assert emp.q_l_hat[1] == 1.0 and emp.q_hat[0, 1] == 1.0 and emp.q_y_hat[0, 1, 1] == 1.0


def test_fit_empty_data():
    with pytest.raises(ValueError):
        fit_empirical(data_of([], [], []), levels=2)


@given(st.integers(0, 10_000))
def test_empirical_rows_normalize(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    data = data_of(rng.integers(0, 3, n), rng.integers(0, 2, n), rng.integers(0, 3, n))
    emp = fit_empirical(data, 3, 3)
    assert emp.counts_l.sum() == n
    assert emp.q_l_hat.sum() == pytest.approx(1, abs=1e-12)
    q = emp.q_hat[:, emp.counts_l > 0]
    np.testing.assert_allclose(q.sum(axis=0), 1, atol=1e-12)
    rows = emp.q_y_hat.sum(axis=2)
    np.testing.assert_allclose(rows[emp.counts_b > 0], 1, atol=1e-12)


# -- plug-in and IPW --------------------------------------------------------


def test_plugin_on_exact_tables_equals_evaluation(dyadic_model):
    emp = exact_empirical(dyadic_model, [0.5, 0.5], 64)
    for kappa in range(5):
        spec = RegimeSpec.rank_preserving([0.0, 1.0], kappa=kappa)
        truth = compositional_gformula_expectation(dyadic_model, spec, 4).value
        assert plugin_estimate(emp, spec, n_star=4).point == pytest.approx(truth, abs=1e-12)
    spec = RegimeSpec.rank_preserving([0.0, 1.0], kappa_star=0.5)
    assert plugin_estimate(emp, spec).point == pytest.approx(large_cluster_value(dyadic_model, spec), abs=1e-12)


def test_plugin_never_treat_is_weighted_control_mean():
    rng = np.random.default_rng(0)
    data = simulate_cluster(random_model(rng, 3), Bernoulli(np.full(3, 0.5)), 300, 1)
    emp = fit_empirical(data, 3)
    spec = RegimeSpec.rank_preserving([0, 1, 2], kappa=0)
    want = float(emp.q_l_hat @ emp.q_y_hat[0, :, 1])
    assert plugin_estimate(emp, spec, n_star=5).point == pytest.approx(want, abs=1e-12)


def test_plugin_reports_missing_cells():
    data = data_of([0, 0, 1, 1], [0, 1, 0, 0], [0, 1, 1, 0])
    emp = fit_empirical(data, 2)
    with pytest.raises(PositivityViolated) as exc:
        plugin_estimate(emp, RegimeSpec.rank_preserving([0, 1], kappa_star=1.0))
    assert exc.value.cells == [(1, 1)]
    with pytest.raises(PositivityViolated):
        ipw_estimate(data, emp, RegimeSpec.rank_preserving([0, 1], kappa_star=1.0))


@given(st.integers(0, 10_000), st.booleans())
def test_ipw_equals_plugin(seed, large):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 3)
    data = simulate_cluster(m, Bernoulli(np.full(3, 0.5)), 200, seed)
    emp = fit_empirical(data, 3)
    lam = rng.integers(-1, 3, 3).astype(float)
    if large:
        spec, n_star = RegimeSpec.rank_preserving(lam, kappa_star=float(rng.random())), None
    else:
        spec, n_star = RegimeSpec.rank_preserving(lam, kappa=int(rng.integers(0, 6))), 5
    try:
        plug = plugin_estimate(emp, spec, n_star).point
    except PositivityViolated:
        return
    assert ipw_estimate(data, emp, spec, n_star).point == pytest.approx(plug, abs=1e-12)


def test_ipw_with_unit_weights_is_sample_mean():
    rng = np.random.default_rng(3)
    data = simulate_cluster(random_model(rng, 2), Bernoulli(np.ones(2)), 100, 3)
    emp = fit_empirical(data, 2)
    spec = RegimeSpec.rank_preserving([0, 1], kappa_star=1.0)
    assert ipw_estimate(data, emp, spec).point == pytest.approx(data.Y.mean(), abs=1e-15)


# -- influence function -----------------------------------------------------


def one_level_law():
    return TabularLaw(np.array([1.0]), np.array([[0.5], [0.5]]), np.array([[[0.5, 0.5]], [[0.3, 0.7]]]), np.array([0.0, 1.0]))


def test_eif_worked_example():
    law = one_level_law()
    phi1 = eif_phi(law, [1.0], 0.0, 0.5, [0], [1], [1])[0]
    assert phi1 == pytest.approx(0.6, abs=1e-15)
    phi0 = eif_phi(law, [1.0], 0.2, 0.5, [0], [1], [1])[0]
    assert phi0 - phi1 == pytest.approx(-0.1, abs=1e-15)
    assert phi0 == pytest.approx(0.5, abs=1e-15)


def test_eif_zero_residual_and_off_rule():
    law = TabularLaw(np.array([0.4, 0.6]), np.array([[0.5, 0.5], [0.5, 0.5]]),
                     np.array([[[1, 0], [0, 1]], [[0, 1], [1, 0]]], dtype=float), np.array([0.0, 1.0]))
    g = np.array([1.0, 0.0])
    m = law.mean_outcome()
    psi = eif_psi(law, g)
    # on-rule observation with y equal to its regression value
    assert eif_phi(law, g, 0.0, 0.5, [0], [1], [1])[0] == pytest.approx(m[1, 0] - psi, abs=1e-15)
    # off-rule observation: only the centered regression remains
    assert eif_phi(law, g, 0.0, 0.5, [1], [1], [0])[0] == pytest.approx(m[0, 1] - psi, abs=1e-15)


@given(st.integers(0, 10_000))
def test_eif_mean_zero(seed):
    rng = np.random.default_rng(seed)
    k, mo = int(rng.integers(1, 5)), int(rng.integers(2, 4))
    prop1 = rng.uniform(0.05, 0.95, k)
    m = random_model(rng, k, mo, scores=rng.normal(size=mo))
    law = TabularLaw.from_model(m, prop1)
    g = rng.random(k)
    a, l, y = np.indices((2, k, mo))
    phi = eif_phi(law, g, 0.0, 0.5, l, a, y)
    weight = m.q_l[None, :, None] * np.stack([1 - prop1, prop1])[:, :, None] * m.q_y
    assert abs(float(np.sum(weight * phi))) <= 1e-12


def _effect_model(delta, q_l):
    q_y = np.zeros((2, len(delta), 2))
    q_y[0, :, 1] = 0.4
    q_y[1, :, 1] = 0.4 + np.array(delta)
    q_y[:, :, 0] = 1 - q_y[:, :, 1]
    return make_model(q_l, q_y)


def test_threshold_term_sign_by_finite_difference():
    """Perturb Q_L along a score s and compare the slope of the optimal value with E[Phi0 s]."""
    q_l = np.array([0.3, 0.3, 0.4])
    model = _effect_model([0.2, -0.1, 0.3], q_l)
    ks = 0.5
    s = np.array([1.0, -2.0, 0.75])
    s -= q_l @ s

    def value(eps):
        m = make_model(q_l * (1 + eps * s), model.q_y)
        return large_cluster_value(m, optimal_regime(m, kappa_star=ks, gated=True))

    h = 1e-6
    slope = (value(h) - value(-h)) / (2 * h)
    emp_like = TabularLaw.from_model(model, [0.5, 0.5, 0.5])
    dens = large_cluster_density(model, optimal_regime(model, kappa_star=ks, gated=True))
    eta = max(dens.threshold, 0.0)
    assert eta == pytest.approx(0.2)
    a, l, y = np.indices((2, 3, 2))
    phi = eif_phi(emp_like, dens.q, eta, ks, l, a, y)
    p_obs = q_l[None, :, None] * 0.5 * model.q_y
    assert float(np.sum(p_obs * phi * s[l])) == pytest.approx(slope, abs=1e-7)


# -- learned rule -----------------------------------------------------------


def _emp_with_effects(delta):
    model = _effect_model(delta, [0.25, 0.25, 0.5])
    return exact_empirical(model, [0.5, 0.5, 0.5], 400)


def test_learned_rule_examples():
    d, eta, g = empirical_cate_and_eta(_emp_with_effects([-0.1, -0.2, -0.05]), None, 0.5)
    assert np.all(g == 0)
    model = _effect_model([0.2, -0.1, 0.3], [1 / 3] * 3)
    counts_o = np.rint(300 * model.q_l[None, :, None] * 0.5 * model.q_y).astype(np.int64)
    counts_b = counts_o.sum(axis=2)
    emp = EmpiricalLaw(300, counts_b.sum(axis=0), counts_b, counts_o, model.scores)
    d, eta, g = empirical_cate_and_eta(emp, None, 1 / 3)
    np.testing.assert_allclose(d, [0.2, -0.1, 0.3], atol=1e-12)
    assert eta == pytest.approx(0.2, abs=1e-12)
    np.testing.assert_allclose(g, [0, 0, 1], atol=1e-12)
    d, eta, g = empirical_cate_and_eta(emp, None, 1.0)
    assert max(eta, 0.0) == 0.0
    np.testing.assert_allclose(g, [1, 0, 1], atol=1e-12)


def test_learned_rule_on_coarse_levels():
    model = _effect_model([0.2, 0.3, -0.1, -0.3], [0.25] * 4)
    counts_o = np.rint(400 * model.q_l[None, :, None] * 0.5 * model.q_y).astype(np.int64)
    counts_b = counts_o.sum(axis=2)
    emp = EmpiricalLaw(400, counts_b.sum(axis=0), counts_b, counts_o, model.scores)
    d, eta, g = empirical_cate_and_eta(emp, Coarsening(np.array([0, 0, 1, 1])), 0.6)
    np.testing.assert_allclose(d, [0.25, -0.2], atol=1e-12)
    np.testing.assert_allclose(g, [1, 1, 0, 0], atol=1e-12)


# -- one-step ---------------------------------------------------------------


def test_one_step_at_fixed_point_is_plugin():
    model = _effect_model([0.2, -0.1, 0.3], [0.25, 0.25, 0.5])
    q_y = np.zeros((2, 3, 2))
    q_y[..., 1] = [[1, 0, 1], [0, 1, 1]]
    q_y[..., 0] = 1 - q_y[..., 1]
    det = make_model(model.q_l, q_y)
    emp = exact_empirical(det, [0.5, 0.5, 0.5], 40)
    data = data_from_counts(emp.counts_o)
    for target in (OptimalTarget(0.3), RegimeSpec.rank_preserving([0, 1, 2], kappa_star=0.4)):
        rep = one_step_estimate(data, emp, target)
        plug = plugin_estimate(emp, target).point
        assert rep.point == pytest.approx(plug, abs=1e-12)


def test_one_step_interval_width():
    rng = np.random.default_rng(2)
    data = simulate_cluster(random_model(rng, 3), Bernoulli(np.full(3, 0.5)), 500, 2)
    emp = fit_empirical(data, 3)
    rep = one_step_estimate(data, emp, OptimalTarget(0.4), alpha=0.32)
    lo, hi = rep.ci
    assert (hi - rep.point) == pytest.approx(z_quantile(0.32) * rep.se, rel=1e-12)
    assert z_quantile(0.32) == pytest.approx(0.994457883209753, abs=1e-9)
    assert lo <= rep.point <= hi


def test_one_step_se_is_root_mean_square_over_root_n():
    rng = np.random.default_rng(4)
    data = simulate_cluster(random_model(rng, 2), Bernoulli(np.full(2, 0.5)), 300, 4)
    emp = fit_empirical(data, 2)
    spec = RegimeSpec.rank_preserving([0, 1], kappa_star=0.5)
    rep = one_step_estimate(data, emp, spec)
    q1 = large_cluster_density(emp.as_model(), spec).q
    phi = eif_phi(emp.law(), q1, 0.0, 0.5, data.L, data.A, data.Y)
    assert rep.se == pytest.approx(math.sqrt(np.mean(phi**2) / data.n), rel=1e-12)


def test_one_step_needs_large_target():
    data = data_of([0, 1], [0, 1], [0, 1])
    with pytest.raises(ValueError):
        one_step_estimate(data, fit_empirical(data, 2), RegimeSpec.rank_preserving([0, 1], kappa=1))


# -- online -----------------------------------------------------------------


@pytest.fixture
def stream(coverage_model):
    return simulate_cluster(coverage_model, SubCluster.uniform(4, np.array([2.0, 0.0, 1.0])), 800, 21)


def test_online_single_term_window(stream, coverage_model):
    spec = RegimeSpec.rank_preserving([0, 1, 2], kappa_star=0.5)
    n = stream.n
    rep = online_estimate(stream, 3, 2, spec, burn_in=n - 1)
    prefix = ClusterData(stream.L[:-1], stream.A[:-1], stream.Y[:-1])
    emp = fit_empirical(prefix, 3)
    q1 = large_cluster_density(emp.as_model(), spec).q
    last = eif_phi(emp.law(), q1, 0.0, 0.5, stream.L[-1:], stream.A[-1:], stream.Y[-1:], centered=False)[0]
    assert rep.point == pytest.approx(last, abs=1e-12)


def test_online_equal_scales_give_plain_average(stream):
    spec = RegimeSpec.rank_preserving([0, 1, 2], kappa_star=0.5)
    flat = online_estimate(stream, 3, 2, spec, burn_in=400, sigma_floor=1e6)
    terms = []
    for j in range(400, stream.n):
        prefix = ClusterData(stream.L[:j], stream.A[:j], stream.Y[:j])
        emp = fit_empirical(prefix, 3)
        q1 = large_cluster_density(emp.as_model(), spec).q
        terms.append(eif_phi(emp.law(), q1, 0.0, 0.5, stream.L[j:j + 1], stream.A[j:j + 1], stream.Y[j:j + 1], centered=False)[0])
    assert flat.point == pytest.approx(np.mean(terms), abs=1e-12)


def test_online_is_reproducible_and_order_dependent(stream):
    target = OptimalTarget(0.5)
    a = online_estimate(stream, 3, 2, target, burn_in=300)
    b = online_estimate(stream, 3, 2, target, burn_in=300)
    assert a.point == b.point and a.ci == b.ci
    perm = np.concatenate([np.arange(300), 300 + np.random.default_rng(0).permutation(stream.n - 300)])
    shuffled = ClusterData(stream.L[perm], stream.A[perm], stream.Y[perm])
    assert online_estimate(shuffled, 3, 2, target, burn_in=300).point != a.point


def test_online_batches_are_close(stream):
    target = OptimalTarget(0.5)
    one = online_estimate(stream, 3, 2, target, burn_in=300)
    ten = online_estimate(stream, 3, 2, target, burn_in=300, batch=10)
    assert ten.diagnostics["batch"] == 10
    assert abs(one.point - ten.point) < 0.02


def test_online_burn_in_errors(stream):
    spec = RegimeSpec.rank_preserving([0, 1, 2], kappa_star=0.5)
    with pytest.raises(InsufficientBurnIn):
        online_estimate(stream, 3, 2, spec, burn_in=stream.n)
    with pytest.raises(InsufficientBurnIn):
        online_estimate(stream, 3, 2, spec, burn_in=0)
    short = data_of([0, 0, 1, 1, 0], [0, 0, 0, 1, 1], [0, 1, 0, 1, 1])
    with pytest.raises(InsufficientBurnIn) as exc:
        online_estimate(short, 2, 2, RegimeSpec.rank_preserving([0, 1], kappa_star=0.5), burn_in=2)
    assert exc.value.cells
