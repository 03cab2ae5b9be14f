"""Spatial-confounding benchmark: scenario registry, data generator and study harness."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .confound import ESTIMATORS, CausalEstimate, fit_model
from .data import ArealDataset, RunConfig
from .lattice import CarParams, Lattice, build_rook_grid, car_precision, sample_gmrf
from .propensity import fit_binary_propensity

__all__ = [
    "Scenario",
    "SCENARIOS",
    "get_scenario",
    "Truth",
    "generate_dataset",
    "dataset_seeds",
    "DatasetRecord",
    "StudyResult",
    "run_study",
    "write_summary_csv",
    "write_study_csv",
    "FULL_SCALE",
]

log = logging.getLogger(__name__)

STUDY_ESTIMATORS = ("NS", "NS+P", "S", "S+P", "S+AIPW", "Joint", "Cut")
PROPENSITY_ESTIMATORS = ("NS+P", "S+P", "S+AIPW")
FULL_SCALE = {"datasets": 100, "grid": (30, 30)}
FIELD_SIGMA = 2.0
NONLINEAR_SHIFT = 0.63


@dataclass(frozen=True)
class Scenario:
    """One benchmark setting; ``transform`` selects ``g(V, phi U)``."""

    name: str
    rho_u: float
    rho_v: float
    transform: str = "linear"
    beta: float = 0.5
    phi: float = 0.5
    grid: tuple[int, int] = (20, 20)

    def __post_init__(self):
        if self.transform not in ("linear", "nonlinear", "nonstationary"):
            raise ValueError(f"unknown transform '{self.transform}'")

    def g(self, u, v, col_frac) -> np.ndarray:
        if self.transform == "linear":
            return v + self.phi * u
        if self.transform == "nonlinear":
            return v + self.phi * (u * (u > 0) - NONLINEAR_SHIFT)
        return v + self.phi * u * col_frac


_REGISTRY = {
    "a": (0.99, 0.99, "linear"),
    "b": (0.90, 0.99, "linear"),
    "c": (0.99, 0.90, "linear"),
    "d": (0.90, 0.90, "linear"),
    "nonlinear": (0.99, 0.99, "nonlinear"),
    "nonstationary": (0.99, 0.99, "nonstationary"),
}
SCENARIOS = tuple(_REGISTRY)


def get_scenario(name: str, grid=(20, 20), beta: float = 0.5, phi: float = 0.5) -> Scenario:
    if name not in _REGISTRY:
        raise ValueError(f"unknown scenario '{name}'; choose from {', '.join(SCENARIOS)}")
    rho_u, rho_v, kind = _REGISTRY[name]
    return Scenario(name, rho_u, rho_v, kind, beta, phi, tuple(grid))


@dataclass(frozen=True)
class Truth:
    scenario: str
    seed: int
    beta: float
    u: np.ndarray
    v: np.ndarray
    propensity: np.ndarray

    def to_text(self) -> str:
        lines = [f"scenario={self.scenario}", f"seed={self.seed}", f"beta={self.beta!r}", "region,u,v,propensity"]
        lines += [f"{i},{u!r},{v!r},{p!r}" for i, (u, v, p) in enumerate(zip(self.u.tolist(), self.v.tolist(), self.propensity.tolist()))]
        return "\n".join(lines) + "\n"


def generate_dataset(scenario: Scenario, seed, lattice: Lattice | None = None) -> tuple[ArealDataset, Truth]:
    """Draw one dataset with one observation per region.

    ``U ~ CAR(rho_u, 2)``, ``V ~ CAR(rho_v, 2)``, ``A ~ Bernoulli(expit g)``
    and ``Y ~ N(A beta + U, 1)``.
    """
    nr, nc = scenario.grid
    lattice = lattice or build_rook_grid(nr, nc)
    ss = np.random.SeedSequence(seed)
    s_u, s_v, s_a, s_y = ss.spawn(4)
    u = sample_gmrf(car_precision(lattice, CarParams(scenario.rho_u, FIELD_SIGMA)), s_u)
    v = sample_gmrf(car_precision(lattice, CarParams(scenario.rho_v, FIELD_SIGMA)), s_v)
    col = np.arange(nr * nc) % nc
    frac = col / (nc - 1) if nc > 1 else np.zeros(nr * nc)
    p = expit(scenario.g(u, v, frac))
    a = (np.random.default_rng(s_a).uniform(size=p.shape) < p).astype(float)
    y = a * scenario.beta + u + np.random.default_rng(s_y).standard_normal(p.shape)
    region = np.arange(lattice.n_regions)
    data = ArealDataset.from_arrays(region, y, a, n_regions=lattice.n_regions)
    return data, Truth(scenario.name, int(seed), scenario.beta, u, v, p)


def dataset_seeds(config: RunConfig) -> list[tuple[int, int]]:
    """``(data seed, fit seed)`` per dataset, spawned from the master seed by index."""
    kids = np.random.SeedSequence(config.seed).spawn(config.datasets)
    out = []
    for k in kids:
        d, f = k.generate_state(2, dtype=np.uint32)
        out.append((int(d), int(f)))
    return out


@dataclass
class DatasetRecord:
    dataset_id: int
    estimates: dict[str, CausalEstimate]
    failures: dict[str, str]


@dataclass
class StudyResult:
    scenario: str
    truth: float
    estimators: tuple[str, ...]
    records: list[DatasetRecord] = field(default_factory=list)

    @property
    def n_datasets(self) -> int:
        return len(self.records)

    def estimates(self, estimator: str) -> list[CausalEstimate]:
        return [r.estimates[estimator] for r in self.records if estimator in r.estimates]

    def n_failed(self, estimator: str) -> int:
        return sum(estimator in r.failures for r in self.records)

    def bias(self, estimator: str) -> float:
        e = self.estimates(estimator)
        return float(np.mean([x.point for x in e]) - self.truth) if e else float("nan")

    def coverage(self, estimator: str) -> float:
        e = self.estimates(estimator)
        return float(np.mean([x.covers(self.truth) for x in e])) if e else float("nan")

    def mean_width(self, estimator: str) -> float:
        e = self.estimates(estimator)
        return float(np.mean([x.width for x in e])) if e else float("nan")

    def summary_rows(self) -> list[dict]:
        return [{"scenario": self.scenario, "estimator": est, "n_datasets": self.n_datasets,
                 "mean_bias": self.bias(est), "coverage95": self.coverage(est),
                 "mean_ci_width": self.mean_width(est), "n_failed": self.n_failed(est)}
                for est in self.estimators]


def _run_one(args) -> DatasetRecord:
    idx, scenario, data_seed, fit_seed, config, estimators = args
    lattice = build_rook_grid(*scenario.grid)
    data, _ = generate_dataset(scenario, data_seed, lattice)
    cfg = config.with_(seed=fit_seed)
    estimates, failures = {}, {}
    scores = None
    if any(e in PROPENSITY_ESTIMATORS for e in estimators):
        try:
            scores = fit_binary_propensity(data, lattice, cfg).scores
        except Exception as exc:  # recorded, study continues
            log.warning("dataset %d: propensity fit failed: %s", idx, exc)
            for e in estimators:
                if e in PROPENSITY_ESTIMATORS:
                    failures[e] = f"propensity: {exc}"
    for est in estimators:
        if est in failures:
            continue
        try:
            estimates[est] = fit_model(est, data, lattice, cfg, scores=scores).estimate
        except Exception as exc:
            log.warning("dataset %d: %s failed: %s", idx, est, exc)
            failures[est] = str(exc)
    return DatasetRecord(idx, estimates, failures)


def run_study(config: RunConfig, workers: int = 1) -> StudyResult:
    """Generate ``config.datasets`` datasets of ``config.scenario`` and fit every estimator.

    Results depend only on ``config``; datasets may run in parallel
    processes but are aggregated in index order.
    """
    estimators = tuple(config.estimators)
    bad = [e for e in estimators if e not in ESTIMATORS or e not in STUDY_ESTIMATORS]
    if bad:
        raise ValueError(f"estimators not available in the study: {', '.join(bad)}")
    scenario = get_scenario(config.scenario, config.grid, config.beta, config.phi)
    jobs = [(k, scenario, d, f, config, estimators) for k, (d, f) in enumerate(dataset_seeds(config))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    return StudyResult(scenario.name, scenario.beta, estimators, records)


SUMMARY_COLUMNS = ("scenario", "estimator", "n_datasets", "mean_bias", "coverage95", "mean_ci_width", "n_failed")


def write_summary_csv(results, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for res in results:
            for row in res.summary_rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_study_csv(result: StudyResult, path) -> None:
    """Per-dataset estimates for one scenario (plot-ready)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "dataset_id", "estimator", "point", "lo95", "hi95", "covers", "error"])
        for r in result.records:
            for est in result.estimators:
                if est in r.estimates:
                    e = r.estimates[est]
                    w.writerow([result.scenario, r.dataset_id, est, repr(e.point), repr(e.lo), repr(e.hi),
                                int(e.covers(result.truth)), ""])
                else:
                    w.writerow([result.scenario, r.dataset_id, est, "", "", "", "", r.failures.get(est, "")])
