import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats
from scipy.special import expit, log_expit

from spatialcausal.confound import (CausalEstimate, ModelSpec, _CarEigen, aipw_contrast, fit_cond_logit, fit_iv,
                                    fit_joint, fit_model, fit_s, fit_sar, fit_schnell, gls_bias_oracle,
                                    match_difference, sar_loglik, schnell_bias, write_estimates_csv)
from spatialcausal.data import ArealDataset, RunConfig
from spatialcausal.lattice import CarParams, build_rook_grid, car_precision, sample_gmrf

CFG = RunConfig(iterations=400, burn_in=100, seed=11)


def _areal(seed=0, side=5, beta=0.5):
    lat = build_rook_grid(side, side)
    rng = np.random.default_rng(seed)
    u = sample_gmrf(car_precision(lat, CarParams(0.9, 1.0)), rng)
    n = lat.n_regions
    x = rng.normal(size=n)
    a = (rng.uniform(size=n) < expit(u + 0.3 * x)).astype(float)
    y = 0.2 + 0.4 * x + beta * a + u + rng.normal(size=n)
    return lat, ArealDataset.from_arrays(np.arange(n), y, a, x)


# ----------------------------------------------------------------- AIPW

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_aipw_exact_predictions_reduce_to_regression(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, n).astype(float)
    e = rng.uniform(0.05, 0.95, n)
    y1, y0 = rng.normal(size=n), rng.normal(size=n)
    y = a * y1 + (1 - a) * y0
    assert abs(aipw_contrast(a, y, e, y1, y0) - np.mean(y1 - y0)) < 1e-10


def test_aipw_ipw_limit_and_draw_axis():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 2, 30).astype(float)
    y = rng.normal(size=30)
    e = np.full(30, 0.25)
    z = np.zeros(30)
    np.testing.assert_allclose(aipw_contrast(a, y, e, z, z), np.mean(a * y / 0.25 - (1 - a) * y / 0.75))
    Y1 = rng.normal(size=(4, 30))
    out = aipw_contrast(a, y, e, Y1, Y1 - 1)
    assert out.shape == (4,)
    for k in range(4):
        assert out[k] == pytest.approx(aipw_contrast(a, y, e, Y1[k], Y1[k] - 1))
    with pytest.raises(ValueError, match="positivity"):
        aipw_contrast(a, y, np.where(a == 1, 1.0, 0.5), z, z)


# ----------------------------------------------------- reduction identities

def test_strata_single_equals_s():
    lat, data = _areal(2)
    s = fit_s(data, lat, CFG)
    one = fit_model(ModelSpec("S+Strata", n_strata=1), data, lat, CFG, scores=np.full(data.n, 0.5)).estimate
    np.testing.assert_array_equal(s.posterior["beta"], one.posterior["beta"])


def test_joint_psi_zero_equals_s():
    lat, data = _areal(3)
    s = fit_s(data, lat, CFG)
    j = fit_joint(data, lat, CFG, fix_psi=0.0)
    np.testing.assert_array_equal(s.posterior["beta"], j.posterior["beta"])
    np.testing.assert_array_equal(s.posterior["intercept"], j.posterior["intercept"])


def test_joint_free_psi_runs():
    lat, data = _areal(4)
    est = fit_joint(data, lat, CFG)
    assert est.estimator == "Joint" and est.lo < est.point < est.hi
    assert {"psi", "tau2", "rho_U", "rho_V"} <= set(est.posterior.names)


# ------------------------------------------------------------- matching

def _pairs_data(seed, groups=40, per=2):
    rng = np.random.default_rng(seed)
    region = np.repeat(np.arange(groups), per)
    # dyadic values keep every contrast exact under an integer shift
    a = rng.integers(0, 2, len(region)).astype(float)
    x = rng.integers(-16, 16, len(region)) / 8.0
    y = np.round((0.5 * a + 0.25 * x + rng.normal(size=len(region))) * 64) / 64
    return ArealDataset.from_arrays(region, y, a, x)


@pytest.mark.parametrize("per", [2, 3])
def test_match_difference_invariant_to_region_constants(per):
    data = _pairs_data(5, per=per)
    shift = np.random.default_rng(6).integers(-50, 50, 40).astype(float)
    shifted = data.with_response(data.y + shift[data.region])
    a = match_difference(data, CFG)
    b = match_difference(shifted, CFG)
    np.testing.assert_array_equal(a.posterior["beta"], b.posterior["beta"])


def test_match_difference_float_constants():
    data = _pairs_data(7)
    shift = np.random.default_rng(8).normal(0, 100, 40)
    a = match_difference(data, CFG)
    b = match_difference(data.with_response(data.y + shift[data.region]), CFG)
    np.testing.assert_allclose(a.posterior["beta"], b.posterior["beta"], atol=1e-9)


def test_match_difference_needs_contrast():
    data = ArealDataset.from_arrays(np.arange(5), np.zeros(5), [0, 1, 0, 1, 0])
    with pytest.raises(ValueError, match="two observations"):
        match_difference(data)


def _case_control(seed, n_pairs=150):
    rng = np.random.default_rng(seed)
    region = np.repeat(np.arange(n_pairs), 2)
    a = rng.integers(0, 2, 2 * n_pairs).astype(float)
    x = rng.normal(size=2 * n_pairs)
    # case is drawn within each pair with conditional probability expit(d @ theta)
    y = np.zeros(2 * n_pairs)
    pairs = []
    for k in range(n_pairs):
        i, j = 2 * k, 2 * k + 1
        d = 0.8 * (a[i] - a[j]) - 0.5 * (x[i] - x[j])
        if rng.uniform() < expit(d):
            pairs.append((i, j))
            y[i] = 1
        else:
            pairs.append((j, i))
            y[j] = 1
    return ArealDataset.from_arrays(region, y, a, x), np.array(pairs)


def test_cond_logit_matches_direct_optimizer():
    data, pairs = _case_control(9)
    est = fit_cond_logit(data, pairs)
    D = np.column_stack([data.a, data.covariates])
    Dd = D[pairs[:, 0]] - D[pairs[:, 1]]
    res = optimize.minimize(lambda th: -np.sum(log_expit(Dd @ th)), np.zeros(2), method="BFGS",
                            options={"gtol": 1e-10})
    assert est.point == pytest.approx(res.x[0], abs=1e-6)
    assert est.diagnostics["coef"]["x1"] == pytest.approx(res.x[1], abs=1e-6)
    assert est.lo < 0.8 < est.hi


def test_cond_logit_separation_and_validation():
    data, pairs = _case_control(10, 20)
    a = data.a.copy()
    a[pairs[:, 0]], a[pairs[:, 1]] = 1.0, 0.0
    sep = ArealDataset.from_arrays(data.region, data.y, a, data.covariates)
    with pytest.raises(ValueError, match="separation"):
        fit_cond_logit(sep, pairs)
    with pytest.raises(ValueError, match="case"):
        fit_cond_logit(data, pairs[:, ::-1])
    with pytest.raises(ValueError, match="different regions"):
        fit_cond_logit(data, np.array([[pairs[0, 0], pairs[1, 1]]]))


# ------------------------------------------------------------------ SAR

def test_sar_loglik_matches_dense_density():
    lat = build_rook_grid(3, 4)
    rng = np.random.default_rng(12)
    D = np.column_stack([np.ones(12), rng.normal(size=12)])
    y, b = rng.normal(size=12), np.array([0.3, -0.2])
    phi, s2 = 0.6, 1.7
    B = np.eye(12) - phi * lat.C.toarray()
    Bi = np.linalg.inv(B)
    ref = stats.multivariate_normal(D @ b, s2 * Bi @ Bi.T).logpdf(y)
    assert sar_loglik(y, D, b, phi, s2, lat) == pytest.approx(ref, rel=1e-10)


def test_sar_fit_and_replication_error():
    lat, data = _areal(13)
    est = fit_sar(data, lat, CFG)
    assert 0 < est.posterior.mean("phi") < 1
    rep = ArealDataset.from_arrays(np.repeat(np.arange(25), 2), np.zeros(50), np.tile([0.0, 1.0], 25))
    with pytest.raises(ValueError, match="replication"):
        fit_sar(rep, lat)


# -------------------------------------------------------------- Schnell

def test_schnell_against_dense_joint_gaussian():
    lat = build_rook_grid(3, 3)
    rng = np.random.default_rng(14)
    a = rng.normal(size=9)
    ru, ra, r, su, sa = 0.8, 0.6, 0.2, 1.3, 0.7
    M, W = np.diag(lat.m), lat.W.toarray()
    QU = (M - ru * W) / su**2
    QA = (M - ra * W) / sa**2
    QUA = -r * M / (su * sa)
    Q = np.block([[QU, QUA], [QUA.T, QA]])
    assert np.all(np.linalg.eigvalsh(Q) > 0)
    S = np.linalg.inv(Q)
    cond_mean = S[:9, 9:] @ np.linalg.solve(S[9:, 9:], a)
    np.testing.assert_allclose(schnell_bias(a, lat, r, ru, su, sa), cond_mean, atol=1e-10)
    eig = _CarEigen(lat)
    np.testing.assert_allclose(eig.bias(a, r, ru, su, sa), cond_mean, atol=1e-10)
    ref = stats.multivariate_normal(np.zeros(9), S[9:, 9:]).logpdf(a)
    assert eig.treatment_logpdf(a, r, ra, ru, sa) == pytest.approx(ref, rel=1e-10)
    np.testing.assert_allclose(eig.car_inv_cov(ru, su**2), np.linalg.inv(QU), atol=1e-10)


def test_schnell_fit_runs():
    lat = build_rook_grid(4, 4)
    rng = np.random.default_rng(15)
    a = rng.normal(size=16)
    y = 0.5 * a + rng.normal(size=16)
    data = ArealDataset.from_arrays(np.arange(16), y, a, binary=False)
    est = fit_schnell(data, lat, RunConfig(iterations=300, burn_in=100))
    assert est.estimator == "Schnell" and np.isfinite(est.point)
    assert -1 < est.posterior.mean("rho") < 1


# ------------------------------------------------------------ IV, oracle

def test_iv_flags_weak_instrument():
    lat, data = _areal(16)
    z = np.random.default_rng(17).normal(size=data.n)
    est = fit_iv(data, lat, instrument=z, config=CFG)
    assert "weak_instrument" in est.flags
    with pytest.raises(ValueError, match="instrument"):
        fit_iv(data, lat, config=CFG)


def test_gls_bias_oracle_without_confounding():
    n = 6
    res = gls_bias_oracle(np.eye(n), 0.0, 0.7, np.eye(n), np.eye(n), reps=4000, seed=1)
    assert abs(res.mean - 0.7) < 3 * res.se and res.reps == 4000


# ----------------------------------------------------------- dispatcher

def test_dispatch_validation(tmp_path):
    lat, data = _areal(18)
    with pytest.raises(ValueError, match="unknown estimator"):
        ModelSpec("XYZ")
    with pytest.raises(ValueError, match="independent"):
        ModelSpec("S", prior_family="iid")
    with pytest.raises(ValueError, match="lattice"):
        fit_model("S", data)
    with pytest.raises(ValueError, match="pairs"):
        fit_model("CondLogit", data)
    with pytest.raises(ValueError, match="constant"):
        fit_model("NS", data.with_treatment(np.zeros(data.n)))
    with pytest.raises(ValueError):
        CausalEstimate("NS", 0.0, 1.0, 0.0)
    res = fit_model("S+P", data, lat, CFG)
    assert res.propensity is not None and res.estimate.estimator == "S+P"
    write_estimates_csv([(0, res.estimate)], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().startswith("dataset_id,estimator,point,lo95,hi95,flags\n0,S+P,")


@pytest.mark.parametrize("tag", ["NS", "NS+P", "S", "S+AIPW", "Cut", "S+Strata"])
def test_every_estimator_returns_an_interval(tag):
    lat, data = _areal(19, side=6)
    est = fit_model(ModelSpec(tag, n_strata=3), data, lat, CFG).estimate
    assert est.estimator == tag and est.lo <= est.point <= est.hi
