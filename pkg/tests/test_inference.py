import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calfusion.data import FusedDataset
from calfusion.errors import DimensionError, InferenceError, SingularMatrixError
from calfusion.estimators import EstimateReport, regressors, solve_dr
from calfusion.inference import _checked_inverse, bootstrap_variance, estimate_variance_dr, rubin_combine
from calfusion.models import ModelSpec, draw_imputations, fit_imputation, fit_propensity
from calfusion.pipeline import ModelBank, estimate_mr, fit_bank, stream
from calfusion.simulation import IMPUTATION_SPECS, PROPENSITY_SPECS, THETA0, V_NAMES, generate_dataset, simulation_bank


def _report(theta, var):
    theta = np.atleast_1d(np.asarray(theta, float))
    return EstimateReport(theta, "MR", tuple(f"x{k}" for k in range(len(theta))),
                          variance=np.atleast_2d(np.asarray(var, float)))


# ---------------------------------------------------------------------------
# Rubin's rule


def test_rubin_two_scalars():
    out = rubin_combine([_report(1.0, 0.1), _report(2.0, 0.3)])
    assert out.theta_hat[0] == pytest.approx(1.5)
    assert out.diagnostics["rubin"]["within"][0, 0] == pytest.approx(0.2)
    assert out.diagnostics["rubin"]["between"][0, 0] == pytest.approx(0.5)
    assert out.variance[0, 0] == pytest.approx(0.95)
    assert out.se[0] == pytest.approx(np.sqrt(0.95))


def test_rubin_identical_replicates():
    var = np.array([[0.2, 0.05], [0.05, 0.1]])
    out = rubin_combine([_report([1.0, 2.0], var)] * 3)
    np.testing.assert_allclose(out.diagnostics["rubin"]["between"], 0.0)
    np.testing.assert_allclose(out.variance, var)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rubin_five_reports_arithmetic(seed):
    rng = np.random.default_rng(seed)
    thetas = rng.standard_normal((5, 3))
    variances = []
    for _ in range(5):
        a = rng.standard_normal((3, 3))
        variances.append(a @ a.T)
    out = rubin_combine([_report(t, v) for t, v in zip(thetas, variances)])
    # written out element by element
    mean = [sum(thetas[i][k] for i in range(5)) / 5 for k in range(3)]
    for k in range(3):
        for l in range(3):
            within = sum(variances[i][k][l] for i in range(5)) / 5
            between = sum((thetas[i][k] - mean[k]) * (thetas[i][l] - mean[l]) for i in range(5)) / 4
            assert out.variance[k, l] == pytest.approx(within + 1.2 * between, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(out.theta_hat, mean, rtol=1e-13)


def test_rubin_errors():
    with pytest.raises(InferenceError, match="M ≥ 2"):
        rubin_combine([_report(1.0, 0.1)])
    with pytest.raises(DimensionError):
        rubin_combine([_report(1.0, 0.1), _report([1.0, 2.0], np.eye(2))])
    with pytest.raises(InferenceError):
        rubin_combine([_report(1.0, 0.1), EstimateReport(np.array([1.0]), "MR", ("x0",))])


# ---------------------------------------------------------------------------
# doubly robust sandwich


def _perfect_imputation(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 2))
    w = -0.5 + 1.5 * v[:, 0] + v[:, 1] + 3 * v[:, 0] * v[:, 1]
    r = (rng.random(n) < 0.5).astype(float)
    y = regressors(w, v) @ THETA0 + rng.standard_normal(n)
    return FusedDataset(r, v, np.where(r == 1, y, np.nan), np.where(r == 0, w, np.nan)[:, None], V_NAMES, ("W",))


def test_dr_sandwich_hand_oracle(t_sim, identity):
    data = _perfect_imputation(300, 1)
    prop = fit_propensity(ModelSpec.parse("1", V_NAMES), data)
    imp = fit_imputation(ModelSpec.parse(IMPUTATION_SPECS[0], V_NAMES), data)
    draws = draw_imputations(imp, data, 5, 0)
    theta = solve_dr(prop, imp, data, t_sim, identity, draws=draws).theta_hat
    var = estimate_variance_dr(theta, prop, data, t_sim, identity, draws)

    n, pi = data.n, data.m / data.n
    tv = t_sim.values(data.v)
    xbar = regressors(draws.mean(axis=1), data.v)
    # imputation is exact, so auxiliary rows contribute nothing to the moment
    resid = np.where(data.primary, (np.nan_to_num(data.y) - xbar @ theta) / pi, 0.0)
    gamma = -(tv * np.where(data.primary, 1 / pi, 0.0)[:, None]).T @ xbar / n
    meat = (tv * resid[:, None] ** 2).T @ tv / n
    gi = np.linalg.inv(gamma)
    oracle = gi @ meat @ gi.T / n
    np.testing.assert_allclose(var, oracle, rtol=1e-8, atol=1e-14)


def test_dr_variance_scales_inverse_n(t_sim, identity):
    # stacking a dataset on itself leaves every sample average unchanged, so
    # the sandwich must halve exactly; a fresh sample only does so up to the
    # heavy-tailed Monte Carlo noise of 1/pi weights
    data = generate_dataset(2000, 5)
    prop = fit_propensity(ModelSpec.parse(PROPENSITY_SPECS[0], V_NAMES), data)
    imp = fit_imputation(ModelSpec.parse(IMPUTATION_SPECS[0], V_NAMES), data)
    draws = draw_imputations(imp, data, 20, 0)
    theta = solve_dr(prop, imp, data, t_sim, identity, draws=draws).theta_hat
    var = estimate_variance_dr(theta, prop, data, t_sim, identity, draws)

    rows = np.r_[np.arange(data.n), np.arange(data.n)]
    doubled = data.take(rows)
    prop2 = fit_propensity(prop.spec, doubled)
    np.testing.assert_allclose(prop2.eta_hat, prop.eta_hat, atol=1e-9)
    theta2 = solve_dr(prop2, imp, doubled, t_sim, identity, draws=draws[rows]).theta_hat
    var2 = estimate_variance_dr(theta2, prop2, doubled, t_sim, identity, draws[rows])
    np.testing.assert_allclose(var2, var / 2, rtol=1e-7)


# ---------------------------------------------------------------------------
# plug-in variance


@pytest.fixture(scope="module")
def plugin_parts(sim2000, t_sim, identity):
    fitted = fit_bank(sim2000, simulation_bank(), t_sim, identity, D=100, seed=3)
    return fitted, estimate_mr(sim2000, fitted, t_sim, identity, return_parts=True)


def test_plugin_matrix_invariants(plugin_parts, sim2000):
    _, (report, parts) = plugin_parts
    plug = parts["plugin"]
    for name in ("H_hat", "T_hat", "score_cov"):
        m = getattr(plug, name)
        np.testing.assert_allclose(m, m.T, atol=1e-12)
        assert np.linalg.eigvalsh(m).min() > 0, name
    assert np.linalg.eigvalsh(plug.L_cov).min() >= -1e-12
    np.testing.assert_allclose(plug.se, np.sqrt(np.diag(plug.L_cov) / sim2000.n))
    np.testing.assert_allclose(report.se, plug.se)
    q = parts["constraints"].h.shape[1]
    assert plug.F_hat.shape == (4, q) and plug.G_hat.shape == (4, q)
    assert plug.influence.shape == (sim2000.n, 4)
    assert 0 <= plug.max_leverage < 1
    assert report.diagnostics["variance"]["reference_ps_index"] == 0


def test_plugin_invariant_to_non_reference_order(plugin_parts, sim2000, t_sim, identity):
    fitted, (report, _) = plugin_parts
    swapped = fitted.subset([1, 0], [1, 0])
    other = estimate_mr(sim2000, swapped, t_sim, identity, reference=1)
    np.testing.assert_allclose(other.theta_hat, report.theta_hat, atol=1e-8)
    np.testing.assert_allclose(other.variance, report.variance, rtol=1e-7, atol=1e-12)


def test_plugin_needs_propensity(sim500, t_sim, identity):
    fitted = fit_bank(sim500, ModelBank.parse([], [IMPUTATION_SPECS[0]], V_NAMES), t_sim, identity, D=20, seed=0)
    with pytest.raises(InferenceError):
        estimate_mr(sim500, fitted, t_sim, identity)


def test_plugin_reference_out_of_range(plugin_parts, sim2000, t_sim, identity):
    fitted, _ = plugin_parts
    with pytest.raises(InferenceError):
        estimate_mr(sim2000, fitted, t_sim, identity, reference=2)


def test_checked_inverse_singular():
    with pytest.raises(SingularMatrixError, match="Gamma"):
        _checked_inverse(np.array([[1.0, 2.0], [2.0, 4.0]]), "Gamma")


def test_bootstrap_runs(sim500, t_sim, identity):
    bank = ModelBank.parse([PROPENSITY_SPECS[0]], [IMPUTATION_SPECS[0]], V_NAMES)

    def refit(d):
        f = fit_bank(d, bank, t_sim, identity, D=20, seed=0)
        return estimate_mr(d, f, t_sim, identity, variance=None).theta_hat

    var, failed = bootstrap_variance(refit, sim500, B=15, seed=stream(1, 2))
    assert var.shape == (4, 4) and failed == 0
    assert np.linalg.eigvalsh(var).min() > 0
    var2, _ = bootstrap_variance(refit, sim500, B=15, seed=stream(1, 2))
    np.testing.assert_array_equal(var, var2)
