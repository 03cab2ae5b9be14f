import csv
import logging

import numpy as np
import pytest
from scipy.special import expit

from spatialcausal.data import RunConfig
from spatialcausal.lattice import build_rook_grid
from spatialcausal.simstudy import (NONLINEAR_SHIFT, SCENARIOS, DatasetRecord, StudyResult, dataset_seeds,
                                    generate_dataset, get_scenario, run_study, write_study_csv,
                                    write_summary_csv)
from spatialcausal.confound import CausalEstimate


def test_registry():
    assert SCENARIOS == ("a", "b", "c", "d", "nonlinear", "nonstationary")
    rho = {s: (get_scenario(s).rho_u, get_scenario(s).rho_v) for s in SCENARIOS}
    assert rho["a"] == (0.99, 0.99) and rho["b"] == (0.90, 0.99)
    assert rho["c"] == (0.99, 0.90) and rho["d"] == (0.90, 0.90)
    assert get_scenario("nonlinear").transform == "nonlinear"
    with pytest.raises(ValueError, match="unknown scenario"):
        get_scenario("e")


def test_transforms():
    u, v = np.array([-1.0, 2.0]), np.array([0.5, 0.5])
    c = np.array([0.0, 1.0])
    np.testing.assert_allclose(get_scenario("a").g(u, v, c), v + 0.5 * u)
    np.testing.assert_allclose(get_scenario("nonlinear").g(u, v, c), v + 0.5 * (np.maximum(u, 0) - NONLINEAR_SHIFT))
    np.testing.assert_allclose(get_scenario("nonstationary").g(u, v, c), [0.5, 1.5])


def test_generator_self_consistency():
    sc = get_scenario("nonstationary", grid=(6, 5))
    data, truth = generate_dataset(sc, 3)
    assert data.n == 30 and np.all(data.counts == 1)
    frac = (np.arange(30) % 5) / 4
    np.testing.assert_allclose(truth.propensity, expit(truth.v + 0.5 * truth.u * frac))
    # the outcome residual after removing the truth is standard normal noise
    e = data.y - 0.5 * data.a - truth.u
    assert abs(e.mean()) < 1 and 0.3 < e.std() < 2
    again, _ = generate_dataset(sc, 3)
    np.testing.assert_array_equal(again.y, data.y)


def test_generator_field_scale():
    lat = build_rook_grid(20, 20)
    sc = get_scenario("d")
    sd = np.mean([generate_dataset(sc, s, lat)[1].u.std() for s in range(10)])
    assert 1.0 < sd < 4.0


def test_dataset_seeds_deterministic_and_prefix_stable():
    a = dataset_seeds(RunConfig(datasets=5, seed=9))
    b = dataset_seeds(RunConfig(datasets=8, seed=9))
    assert a == b[:5] and len(set(a)) == 5
    assert dataset_seeds(RunConfig(datasets=5, seed=10)) != a


def test_ns_bias_direction():
    cfg = RunConfig(scenario="a", grid=(10, 10), datasets=4, iterations=300, burn_in=100, estimators=("NS",))
    res = run_study(cfg)
    assert res.n_datasets == 4 and res.bias("NS") > 0
    # NS is least squares with a vague prior: its mean is close to the difference in means
    for rec, (d, _) in zip(res.records, dataset_seeds(cfg)):
        data, _ = generate_dataset(get_scenario("a", (10, 10)), d)
        diff = data.y[data.a == 1].mean() - data.y[data.a == 0].mean()
        assert rec.estimates["NS"].point == pytest.approx(diff, abs=0.15)


def test_study_determinism_and_csv(tmp_path):
    cfg = RunConfig(scenario="b", grid=(6, 6), datasets=2, iterations=200, burn_in=50, estimators=("NS", "S+P"))
    r1, r2 = run_study(cfg), run_study(cfg)
    for x, y in zip(r1.records, r2.records):
        assert x.estimates["S+P"].point == y.estimates["S+P"].point
    write_summary_csv([r1], tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["estimator"] for r in rows] == ["NS", "S+P"] and rows[0]["n_datasets"] == "2"
    write_study_csv(r1, tmp_path / "d.csv")
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 1 + 2 * 2


def test_failures_are_recorded(caplog):
    # a 1x2 grid nearly always gives a single treatment level or a singular spline basis
    cfg = RunConfig(scenario="a", grid=(1, 2), datasets=3, iterations=50, burn_in=10, estimators=("S+P", "NS"))
    with caplog.at_level(logging.WARNING):
        res = run_study(cfg)
    assert res.n_failed("S+P") == 3
    assert np.isnan(res.coverage("S+P"))
    assert "failed" in caplog.text


def test_study_result_metrics():
    est = [CausalEstimate("NS", 0.7, 0.4, 1.0), CausalEstimate("NS", 0.3, 0.0, 0.45)]
    res = StudyResult("a", 0.5, ("NS", "S"), [DatasetRecord(0, {"NS": est[0]}, {"S": "boom"}),
                                             DatasetRecord(1, {"NS": est[1]}, {})])
    assert res.bias("NS") == pytest.approx(0.0) and res.coverage("NS") == 0.5
    assert res.mean_width("NS") == pytest.approx(0.525) and res.n_failed("S") == 1
    with pytest.raises(ValueError, match="not available"):
        run_study(RunConfig(estimators=("SAR",)))
