import logging

import numpy as np
import pytest

from cecnn.errors import DegenerateDataError, ParameterError
from cecnn.gls import (
    exact_variances,
    fgls_fit,
    gen_sur_instance,
    gls_fit,
    ols_fit,
    sur_covariance,
    variance_experiment,
)


def _noiseless(inst):
    return inst.with_errors(np.zeros((inst.n, 2)))


def test_disjoint_construction():
    for seed in range(10):
        inst = gen_sur_instance(50, 8, seed=seed)
        s1, s2 = inst.supports
        assert set(s1).isdisjoint(s2)
        assert np.count_nonzero(inst.weights) == 6
        assert np.array_equal(np.flatnonzero(inst.weights[0]), s1)


def test_partial_construction():
    inst = gen_sur_instance(50, 8, overlap="partial", seed=1)
    assert len(set(inst.supports[0]) & set(inst.supports[1])) == 1


def test_responses_follow_model():
    inst = gen_sur_instance(40, 6, seed=2)
    eps = inst.Y - inst.D @ inst.weights.T - inst.biases
    np.testing.assert_allclose(inst.with_errors(eps).Y, inst.Y, atol=1e-12)


def test_rho_zero_errors_uncorrelated():
    n = 20000
    inst = gen_sur_instance(n, 8, rho=0.0, seed=3)
    eps = inst.Y - inst.mean
    assert abs(np.corrcoef(eps.T)[0, 1]) < 3 / np.sqrt(n)


def test_generator_errors():
    with pytest.raises(ValueError):
        gen_sur_instance(50, 3)
    with pytest.raises(ValueError):
        gen_sur_instance(8, 8)
    with pytest.raises(ValueError):
        gen_sur_instance(50, 5, support_size=3)
    with pytest.raises(ValueError):
        gen_sur_instance(50, 8, overlap="full")
    with pytest.raises(ParameterError):
        gen_sur_instance(50, 8, rho=1.0)


def test_sur_covariance():
    np.testing.assert_allclose(sur_covariance(0.7, (1, 2)), [[1, 1.4], [1.4, 4]], atol=1e-15)


@pytest.mark.parametrize("fit", [ols_fit, gls_fit, fgls_fit])
def test_zero_noise_exact_recovery(fit):
    inst = _noiseless(gen_sur_instance(60, 8, seed=4))
    if fit is fgls_fit:
        # residuals are exactly zero, so the estimated covariance is projected; recovery still exact
        est = gls_fit(inst, np.eye(2))
    else:
        est = fit(inst)
    np.testing.assert_allclose(est.weights, inst.weights, atol=1e-10)
    np.testing.assert_allclose(est.biases, inst.biases, atol=1e-10)


def test_linearity():
    inst = gen_sur_instance(80, 8, seed=5)
    for fit in (ols_fit, lambda i, Y=None: gls_fit(i, Y=Y)):
        a = fit(inst).support_vector()
        b = fit(inst, Y=2 * inst.Y).support_vector()
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-12)


def test_gls_equals_ols_at_rho_zero():
    for seed in range(5):
        inst = gen_sur_instance(100, 8, rho=0.0, sigmas=(1.5, 1.5), seed=seed)
        d = np.abs(gls_fit(inst).support_vector() - ols_fit(inst).support_vector())
        assert d.max() < 1e-10


def test_gls_differs_from_ols_when_correlated():
    inst = gen_sur_instance(500, 8, rho=0.7, seed=6)
    assert np.abs(gls_fit(inst).support_vector() - ols_fit(inst).support_vector()).max() > 1e-4


def test_ols_accuracy_small_noise():
    inst = gen_sur_instance(10_000, 8, sigmas=(0.1, 0.1), seed=7)
    err = ols_fit(inst).support_vector() - np.concatenate([c[1:] for c in inst.true_coefficients()])
    # least-squares SE is about sigma / sqrt(n) = 1e-3
    assert np.abs(err).max() < 0.01


def test_rank_deficiency():
    inst = gen_sur_instance(30, 6, seed=8)
    inst.D[:, inst.supports[0][1]] = inst.D[:, inst.supports[0][0]]
    with pytest.raises(DegenerateDataError):
        ols_fit(inst)


def test_gls_rejects_non_pd():
    inst = gen_sur_instance(30, 6, seed=9)
    with pytest.raises(ParameterError):
        gls_fit(inst, np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_exact_variances_dominance():
    inst = gen_sur_instance(200, 8, rho=0.7, seed=10)
    ex = exact_variances(inst)
    assert np.all(ex["gls"] <= ex["ols"] * (1 + 1e-12))
    assert np.all(ex["gls"] > 0)
    zero = gen_sur_instance(200, 8, rho=0.0, sigmas=(1, 1), seed=10)
    ex0 = exact_variances(zero)
    np.testing.assert_allclose(ex0["gls"], ex0["ols"], rtol=1e-10)


def test_exact_variance_matches_monte_carlo():
    inst = gen_sur_instance(100, 6, rho=0.8, seed=11)
    rng = np.random.default_rng(0)
    draws = []
    for _ in range(4000):
        eps = rng.multivariate_normal(np.zeros(2), inst.sigma_mat, inst.n)
        draws.append(gls_fit(inst, Y=inst.mean + eps).support_vector())
    emp = np.var(draws, axis=0, ddof=1)
    ex = exact_variances(inst)["gls"]
    # sample variance relative SE is sqrt(2 / (R - 1)) ~ 0.022
    assert np.all(np.abs(emp / ex - 1) < 4 * np.sqrt(2 / 3999))


def test_small_variance_experiment(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        cmp = variance_experiment(n=200, K=6, rho=0.7, replicates=20, M=40, seed=1, support_size=2)
    assert "replicates" in caplog.text
    assert cmp.variance["ols"].shape == (20, 4)
    for e in ("ols", "gls", "fgls"):
        assert np.all(cmp.variance[e] >= 0)
    frac = cmp.dominance_fraction()
    assert 0 <= frac <= 1
    assert cmp.exact_dominance_fraction() == 1.0
    assert cmp.mean_variance_ratio() < 1
    s = cmp.summary()
    assert s["n"] == 200 and s["overlap"] == "disjoint"
    path = cmp.write_csv(tmp_path / "v.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "replicate,coordinate,estimator,variance,bias"
    assert len(lines) == 1 + 20 * 4 * 3


def test_variance_experiment_deterministic():
    a = variance_experiment(n=60, K=5, replicates=3, M=5, seed=2, support_size=2)
    b = variance_experiment(n=60, K=5, replicates=3, M=5, seed=2, support_size=2)
    for e in ("ols", "gls", "fgls"):
        np.testing.assert_array_equal(a.variance[e], b.variance[e])


def test_rho_zero_experiment_ratio_one():
    cmp = variance_experiment(n=100, K=6, rho=0.0, replicates=5, M=20, seed=3, sigmas=(1, 1), support_size=2)
    np.testing.assert_allclose(cmp.variance["gls"], cmp.variance["ols"], rtol=1e-8)
    assert cmp.dominance_fraction() == 1.0


def test_partial_regime_runs():
    cmp = variance_experiment(n=150, K=6, replicates=5, M=20, seed=4, overlap="partial", support_size=2)
    assert cmp.overlap == "partial"
    assert np.isfinite(cmp.mean_variance_ratio())
