"""Spatial propensity scores, spline transforms and propensity strata."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit

from .data import ArealDataset, RunConfig
from .lattice import Lattice
from .mcmc import (DEFAULT_PRIOR, CarEffect, PosteriorSummary, PriorSpec, chain_rngs,
                   sample_linear, sample_logistic)

__all__ = [
    "PropensityFit",
    "SplineBasis",
    "StrataSpec",
    "fit_binary_propensity",
    "fit_generalized_propensity",
    "spline_transform",
    "propensity_design",
    "build_strata",
]

TREATMENT_STREAM = 1


@dataclass
class PropensityFit:
    """Point propensity scores from posterior means.

    ``v`` is indexed by region (natural order).
    """

    scores: np.ndarray
    alpha: np.ndarray
    v: np.ndarray
    kind: str
    posterior: PosteriorSummary | None = None

    def __post_init__(self):
        if self.kind == "binary" and not np.all((self.scores > 0) & (self.scores < 1)):
            raise ValueError("binary propensity scores must lie strictly inside (0, 1)")
        if self.kind == "generalized" and np.any(self.scores < 0):
            raise ValueError("generalized scores must be nonnegative")


def _names(data):
    return ["intercept"] + [f"x{k}" for k in range(1, data.x.shape[1])]


def fit_binary_propensity(data: ArealDataset, lattice: Lattice, config: RunConfig | None = None,
                          prior: PriorSpec = DEFAULT_PRIOR, rng=None) -> PropensityFit:
    """Spatial logistic regression ``logit e = X alpha + v`` with CAR ``v``."""
    config = config or RunConfig()
    a = np.asarray(data.a, dtype=float)
    if not np.all(np.isin(a, (0.0, 1.0))):
        raise ValueError("binary propensity needs a 0/1 treatment")
    if a.min() == a.max():
        raise ValueError("all units share one treatment level; positivity is violated")
    rng = rng if rng is not None else chain_rngs(config.seed, 3)[TREATMENT_STREAM]
    effect = CarEffect(lattice, data.region, prior=prior)
    names = _names(data)
    post = sample_logistic(a, data.x, names, effect=effect, prior=prior, config=config, rng=rng)
    alpha = np.array([post.mean(n) for n in names])
    v = post.mean("V")
    scores = expit(data.x @ alpha + v[data.region])
    scores = np.clip(scores, 1e-12, 1 - 1e-12)
    return PropensityFit(scores, alpha, v, "binary", post)


def fit_generalized_propensity(data: ArealDataset, lattice: Lattice, config: RunConfig | None = None,
                               prior: PriorSpec = DEFAULT_PRIOR, rng=None) -> PropensityFit:
    """Gaussian CAR regression of a continuous treatment; score is the squared fitted residual."""
    config = config or RunConfig()
    a = np.asarray(data.a, dtype=float)
    if np.ptp(a) == 0:
        raise ValueError("treatment has zero variance")
    rng = rng if rng is not None else chain_rngs(config.seed, 3)[TREATMENT_STREAM]
    effect = CarEffect(lattice, data.region, prior=prior)
    names = _names(data)
    post = sample_linear(a, data.x, names, effect=effect, prior=prior, config=config, rng=rng,
                         store_field=True, field_name="V")
    alpha = np.array([post.mean(n) for n in names])
    v = post.mean("V")
    scores = (a - data.x @ alpha - v[data.region]) ** 2
    return PropensityFit(scores, alpha, v, "generalized", post)


# ------------------------------------------------------------------ splines

@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis; ``df`` functions of the given degree.

    All ``df`` functions are kept, so they sum to one on the boundary interval.
    """

    interior: tuple[float, ...]
    lower: float
    upper: float
    degree: int = 3

    @property
    def df(self) -> int:
        return len(self.interior) + self.degree + 1

    @property
    def knots(self) -> np.ndarray:
        k = self.degree + 1
        return np.concatenate([[self.lower] * k, self.interior, [self.upper] * k])

    @classmethod
    def from_scores(cls, scores, df: int = 5, degree: int = 3) -> "SplineBasis":
        """Interior knots at score quantiles, boundary knots at min/max."""
        s = np.asarray(scores, dtype=float)
        n_int = df - degree - 1
        if n_int < 0:
            raise ValueError("df must exceed the spline degree")
        if len(np.unique(s)) < df + 1:
            raise ValueError(f"need at least {df + 1} distinct scores for a {df}-df spline")
        probs = np.arange(1, n_int + 1) / (n_int + 1)
        interior = tuple(float(q) for q in np.quantile(s, probs))
        return cls(interior, float(s.min()), float(s.max()), degree)


def spline_transform(scores, basis: SplineBasis) -> np.ndarray:
    """Evaluate the basis at ``scores``; out-of-range values are clamped with a warning."""
    s = np.asarray(scores, dtype=float)
    clamped = np.clip(s, basis.lower, basis.upper)
    if np.any(clamped != s):
        warnings.warn("scores outside the spline boundary knots were clamped", stacklevel=2)
    return BSpline.design_matrix(clamped, basis.knots, basis.degree).toarray()


def propensity_design(scores, df: int = 5) -> np.ndarray:
    """Spline columns for a response model that already has an intercept.

    The first basis function is dropped since the full basis sums to one.
    """
    basis = SplineBasis.from_scores(scores, df=df)
    return spline_transform(scores, basis)[:, 1:]


# ------------------------------------------------------------------- strata

@dataclass(frozen=True)
class StrataSpec:
    """Cut points ``0 = T_1 < ... < T_{L+1} = 1`` and stratum labels."""

    cuts: np.ndarray
    labels: np.ndarray

    @property
    def L(self) -> int:
        return len(self.cuts) - 1

    @classmethod
    def single(cls, n: int) -> "StrataSpec":
        return cls(np.array([0.0, 1.0]), np.zeros(n, dtype=int))

    def indicators(self) -> np.ndarray:
        """Dummy columns for strata 2..L (stratum 1 is absorbed by the intercept)."""
        return (self.labels[:, None] == np.arange(1, self.L)[None, :]).astype(float)


def build_strata(scores, L: int = 5) -> StrataSpec:
    """Quantile strata on ``[T_l, T_{l+1})``."""
    s = np.asarray(scores, dtype=float)
    if L < 2:
        raise ValueError("need at least two strata")
    if len(np.unique(s)) < L:
        raise ValueError(f"need at least {L} distinct scores for {L} strata")
    inner = np.quantile(s, np.arange(1, L) / L)
    cuts = np.concatenate([[0.0], inner, [1.0]])
    labels = np.searchsorted(inner, s, side="right")
    counts = np.bincount(labels, minlength=L)
    for l, c in enumerate(counts):
        if c == 0 or cuts[l + 1] <= cuts[l]:
            raise ValueError(f"stratum {l + 1} is empty (tied scores at its cut points)")
    return StrataSpec(cuts, labels)
