"""Point-referenced methods: exponential GP, DAPSm matching, discontinuity
designs, kriging imputation and kernel spillover summaries."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist, pdist

from .confound import CausalEstimate
from .data import PointDataset, RunConfig
from .mcmc import (DEFAULT_PRIOR, AdaptiveScale, PosteriorSummary, PriorSpec, Recorder, chain_rngs,
                   check_full_rank)

__all__ = [
    "GpParams",
    "exp_covariance",
    "MatchSet",
    "dapsm_match",
    "sample_gp_regression",
    "fit_discontinuity",
    "fit_gp_params",
    "krige_impute",
    "krige_conditional_draws",
    "make_grid",
    "write_grid_csv",
    "SpilloverKernel",
    "spillover_summary",
    "GeostatInterferenceFit",
    "fit_geostat_interference",
]


@dataclass(frozen=True)
class GpParams:
    """Exponential covariance ``sigma^2 exp(-d / rho) + nugget 1{i=j}``."""

    rho: float
    sigma: float
    nugget: float = 0.0

    def __post_init__(self):
        if not self.rho > 0 or not self.sigma > 0:
            raise ValueError("GP range and scale must be positive")
        if self.nugget < 0:
            raise ValueError("nugget must be nonnegative")


def exp_covariance(params: GpParams, coords, coords2=None) -> np.ndarray:
    """Covariance among ``coords`` (nugget on the diagonal) or cross-covariance with ``coords2``."""
    s = np.atleast_2d(np.asarray(coords, dtype=float))
    if coords2 is None:
        K = params.sigma**2 * np.exp(-cdist(s, s) / params.rho)
        K[np.diag_indices_from(K)] += params.nugget
        return K
    return params.sigma**2 * np.exp(-cdist(s, np.atleast_2d(coords2)) / params.rho)


# ------------------------------------------------------------------- DAPSm

@dataclass
class MatchSet:
    pairs: list[tuple[int, int, float]]
    w: float
    unmatched: list[int] = field(default_factory=list)

    @property
    def treated(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=int)

    @property
    def controls(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=int)


def dapsm_match(treated_scores, treated_coords, control_scores, control_coords, w: float) -> MatchSet:
    """Greedy distance-adjusted propensity matching without replacement.

    ``D_ij = w |e_i - e_j| + (1 - w) d_ij / m`` with ``m`` the largest
    distance among all locations. Treated units are processed in ascending
    order of their smallest ``D``; each takes its closest unused control.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError("DAPSm weight w must lie in [0, 1]")
    et = np.asarray(treated_scores, dtype=float)
    ec = np.asarray(control_scores, dtype=float)
    st = np.atleast_2d(np.asarray(treated_coords, dtype=float))
    sc = np.atleast_2d(np.asarray(control_coords, dtype=float))
    if len(et) == 0 or len(ec) == 0:
        raise ValueError("need at least one treated and one control unit")
    for e in (et, ec):
        if np.any(e <= 0) or np.any(e >= 1):
            raise ValueError("propensity scores must lie in (0, 1)")
    allc = np.vstack([st, sc])
    m = pdist(allc).max() if len(allc) > 1 else 0.0
    d = cdist(st, sc) / m if m > 0 else np.zeros((len(et), len(ec)))
    D = w * np.abs(et[:, None] - ec[None, :]) + (1 - w) * d
    order = np.argsort(D.min(axis=1), kind="stable")
    used = np.zeros(len(ec), bool)
    pairs, unmatched = [], []
    for i in order:
        if used.all():
            unmatched.append(int(i))
            continue
        cand = np.where(used, np.inf, D[i])
        j = int(np.argmin(cand))
        used[j] = True
        pairs.append((int(i), j, float(D[i, j])))
    return MatchSet(pairs, float(w), sorted(unmatched))


# -------------------------------------------------------- GP regression MCMC

def sample_gp_regression(y, design, coords, names, config: RunConfig | None = None, rng=None,
                         prior: PriorSpec = DEFAULT_PRIOR) -> PosteriorSummary:
    """Collapsed sampler for ``y ~ N(D b, sigma^2 R(range) + tau^2 I)``.

    ``b`` is drawn by a GLS Gibbs step; ``(log range, log sigma^2, log tau^2)``
    by an adaptive block random walk. The range has a Uniform(0, max distance)
    prior and both variances InverseGamma priors.
    """
    config = config or RunConfig()
    rng = rng if rng is not None else chain_rngs(config.seed, 3)[0]
    y = np.asarray(y, dtype=float)
    D = np.asarray(design, dtype=float)
    check_full_rank(D)
    dist = cdist(coords, coords)
    dmax = dist.max()
    if dmax <= 0:
        raise ValueError("all points share one location")
    coef_prec = np.full(D.shape[1], 1.0 / prior.coef_var)
    n = len(y)

    def factor(th):
        rng_, s2, t2 = np.exp(th)
        if rng_ >= dmax:
            return None
        K = s2 * np.exp(-dist / rng_)
        K[np.diag_indices(n)] += t2
        try:
            return np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return None

    def loglik(L, b):
        z = sla.solve_triangular(L, y - D @ b, lower=True)
        return -np.sum(np.log(np.diag(L))) - 0.5 * float(z @ z)

    def logprior(th):
        # log range: uniform on range gives jacobian th[0]
        lp = th[0]
        for s in th[1:]:
            lp += -prior.var_shape * s - prior.var_rate * np.exp(-s)
        return lp

    b = np.linalg.lstsq(D, y, rcond=None)[0]
    v = max(float(np.var(y - D @ b)), 1e-6)
    th = np.log([dmax / 4, v / 2, v / 2])
    L = factor(th)
    cov = np.eye(3) * 0.05
    scale = AdaptiveScale(1.0, target=0.3)
    hist = []
    rec = Recorder(config)
    for it in range(config.iterations):
        adapt = it < config.burn_in
        Dw = sla.solve_triangular(L, D, lower=True)
        yw = sla.solve_triangular(L, y, lower=True)
        Lb = np.linalg.cholesky(Dw.T @ Dw + np.diag(coef_prec))
        b = sla.cho_solve((Lb, True), Dw.T @ yw) + sla.solve_triangular(
            Lb, rng.standard_normal(len(coef_prec)), lower=True, trans="T")
        cur = loglik(L, b) + logprior(th)
        cand = th + scale.scale * (np.linalg.cholesky(cov) @ rng.standard_normal(3))
        Lc = factor(cand)
        ok = False
        if Lc is not None:
            ok = np.log(rng.uniform()) < loglik(Lc, b) + logprior(cand) - cur
        if ok:
            th, L = cand, Lc
        scale.record(bool(ok), adapt)
        if adapt:
            hist.append(th.copy())
            if len(hist) >= 100 and len(hist) % 50 == 0:
                cov = np.cov(np.array(hist[len(hist) // 2:]).T) + 1e-6 * np.eye(3)
        if rec.keep(it):
            for name, val in zip(names, b):
                rec.put(name, val)
            r_, s2, t2 = np.exp(th)
            rec.put("range", r_)
            rec.put("sigma2", s2)
            rec.put("tau2", t2)
            rec.advance()
    return rec.summary({"covariance": scale.rate})


# ------------------------------------------------------------ discontinuity

def fit_discontinuity(data: PointDataset, inside, h: float = np.inf, boundary_distance=None,
                      config: RunConfig | None = None) -> CausalEstimate:
    """Geostatistical regression with ``A_i = 1{s_i in region}`` and GP confounder.

    ``inside`` is a boolean array or a predicate on an (n, 2) coordinate
    array. With finite ``h`` only points whose ``boundary_distance`` is at
    most ``h`` are used.
    """
    s = data.coords
    a = np.asarray(inside(s) if callable(inside) else inside, dtype=bool)
    keep = np.ones(data.n, bool)
    if np.isfinite(h):
        if boundary_distance is None:
            raise ValueError("band restriction needs boundary distances")
        bd = np.asarray(boundary_distance(s) if callable(boundary_distance) else boundary_distance, dtype=float)
        keep = np.abs(bd) <= h
    p = data.x.shape[1] + 1
    if keep.sum() < p + 3:
        raise ValueError(f"only {int(keep.sum())} points within the boundary band; too few to fit")
    ak = a[keep]
    if ak.all() or not ak.any():
        raise ValueError("observations lie on one side of the boundary only")
    D = np.column_stack([data.x[keep], ak.astype(float)])
    names = ["intercept"] + [f"x{k}" for k in range(1, data.x.shape[1])] + ["beta"]
    post = sample_gp_regression(data.y[keep], D, s[keep], names, config)
    return CausalEstimate.from_draws("Discontinuity", post["beta"],
                                     diagnostics={"n": int(keep.sum()), "draws": post.n_draws}, posterior=post)


# ----------------------------------------------------------------- kriging

def _profile_loglik(dist, y, rho, ratio):
    """Constant-mean GP log-likelihood with sigma^2 and mean profiled out."""
    n = len(y)
    R = np.exp(-dist / rho) + ratio * np.eye(n)
    try:
        c = sla.cho_factor(R, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, None
    one = np.ones(n)
    Ri1 = sla.cho_solve(c, one)
    mu = float(Ri1 @ y) / float(Ri1 @ one)
    r = y - mu
    s2 = float(r @ sla.cho_solve(c, r)) / n
    if s2 <= 0:
        return -np.inf, None
    logdet = 2 * np.sum(np.log(np.diag(c[0])))
    return -0.5 * (n * np.log(s2) + logdet), s2


def fit_gp_params(coords, values, n_range: int = 12, ratios=(0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0)) -> GpParams:
    """Maximum marginal likelihood over a coarse (range, nugget/sill) grid.

    The sill is profiled out analytically for each grid cell.
    """
    s = np.asarray(coords, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(y) < 2:
        raise ValueError("need at least two observations")
    if np.ptp(y) == 0:
        return GpParams(rho=1.0, sigma=1e-8, nugget=0.0)
    dist = cdist(s, s)
    pos = dist[dist > 0]
    ranges = np.geomspace(pos.min(), pos.max(), n_range)
    best = (-np.inf, None)
    for rho in ranges:
        for ratio in ratios:
            ll, s2 = _profile_loglik(dist, y, rho, ratio)
            if ll > best[0]:
                best = (ll, (rho, s2, ratio))
    if best[1] is None:
        raise ValueError("no grid cell gave a positive-definite covariance")
    rho, s2, ratio = best[1]
    return GpParams(float(rho), float(np.sqrt(s2)), float(ratio * s2))


def _kriging_system(coords, values, params):
    s = np.asarray(coords, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(y) < 2:
        raise ValueError("kriging needs at least two observations")
    K = exp_covariance(params, s)
    try:
        c = sla.cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        raise ValueError("observation covariance is singular (duplicate sites without nugget?)") from None
    one = np.ones(len(y))
    Ki1 = sla.cho_solve(c, one)
    mu = float(Ki1 @ y) / float(Ki1 @ one)
    return s, y, c, mu


def krige_impute(coords, values, params: GpParams | None, grid) -> np.ndarray:
    """Kriging predictor at ``grid`` nodes around the GLS estimate of a constant mean.

    With the mean estimated by GLS this equals ordinary kriging. Observations
    are reproduced exactly at their sites when the nugget is zero.
    """
    params = params or fit_gp_params(coords, values)
    s, y, c, mu = _kriging_system(coords, values, params)
    k = exp_covariance(params, grid, s)
    return mu + k @ sla.cho_solve(c, y - mu)


def krige_conditional_draws(coords, values, params: GpParams | None, grid, K: int = 10, seed=None) -> np.ndarray:
    """``K`` conditional Gaussian realisations of the field at ``grid`` (plug-in mean and covariance)."""
    params = params or fit_gp_params(coords, values)
    s, y, c, mu = _kriging_system(coords, values, params)
    g = np.atleast_2d(np.asarray(grid, dtype=float))
    kx = exp_covariance(params, g, s)
    mean = mu + kx @ sla.cho_solve(c, y - mu)
    cov = params.sigma**2 * np.exp(-cdist(g, g) / params.rho) - kx @ sla.cho_solve(c, kx.T)
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    root = V * np.sqrt(np.clip(w, 0, None))
    rng = np.random.default_rng(seed)
    return mean + rng.standard_normal((K, len(w))) @ root.T


def make_grid(lower, upper, n: int | tuple[int, int]) -> np.ndarray:
    """Regular grid of node coordinates (row-major)."""
    nx, ny = (n, n) if np.isscalar(n) else n
    gx = np.linspace(lower[0], upper[0], nx)
    gy = np.linspace(lower[1], upper[1], ny)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def write_grid_csv(grid, values, path) -> None:
    """Gridded field as ``s1,s2,value`` rows."""
    g = np.asarray(grid, dtype=float)
    v = np.asarray(values, dtype=float)
    rows = ["s1,s2,value"] + [f"{a!r},{b!r},{c!r}" for (a, b), c in zip(g.tolist(), v.tolist())]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- spillover

@dataclass(frozen=True)
class SpilloverKernel:
    """``disc``: weight 1 within ``scale``; ``gaussian``: ``exp(-d^2 / (2 scale^2))``."""

    kind: str
    scale: float

    def __post_init__(self):
        if self.kind not in ("disc", "gaussian"):
            raise ValueError(f"unknown kernel '{self.kind}'")
        if not self.scale > 0:
            raise ValueError("kernel radius/bandwidth must be positive")

    def weights(self, d) -> np.ndarray:
        if self.kind == "disc":
            return (d <= self.scale).astype(float)
        return np.exp(-0.5 * (d / self.scale) ** 2)


def spillover_summary(grid, values, kernel: SpilloverKernel, targets) -> np.ndarray:
    """Kernel-weighted average of a gridded field around each target.

    Weights are renormalised over the grid, so constant fields are fixed
    points. A disc narrower than the grid spacing that contains no node
    falls back to the nearest node.
    """
    g = np.atleast_2d(np.asarray(grid, dtype=float))
    f = np.asarray(values, dtype=float)
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    d = cdist(t, g)
    W = kernel.weights(d)
    tot = W.sum(axis=1)
    empty = tot == 0
    if kernel.kind == "disc" and empty.any():
        W[empty, np.argmin(d[empty], axis=1)] = 1.0
        tot = W.sum(axis=1)
    elif empty.any():
        raise ValueError(f"kernel support is empty for target {int(np.argmax(empty))}")
    # centring on one node value keeps constant fields exactly fixed
    ref = f[..., :1]
    return ref + ((f - ref) @ W.T) / tot


# ------------------------------------------------------ geostat interference

@dataclass
class GeostatInterferenceFit:
    direct: CausalEstimate
    indirect: CausalEstimate
    gp_params: GpParams
    posterior: PosteriorSummary = field(repr=False, default=None)


def fit_geostat_interference(data: PointDataset, kernel: SpilloverKernel, grid, params: GpParams | None = None,
                             config: RunConfig | None = None, imputation: str = "plugin",
                             n_imputations: int = 10) -> GeostatInterferenceFit:
    """``Y = a(s) beta1 + a_bar beta2 + X gamma + U + e`` with GP ``U``.

    The treatment field is kriged onto ``grid`` and ``a_bar`` is its kernel
    average around each observation. ``imputation='multiple'`` repeats the
    fit over conditional realisations of the gridded field and pools the
    posterior draws.
    """
    config = config or RunConfig()
    rng_y, rng_a, _ = chain_rngs(config.seed, 3)
    params = params or fit_gp_params(data.coords, data.a)
    if imputation == "plugin":
        fields = krige_impute(data.coords, data.a, params, grid)[None, :]
    elif imputation == "multiple":
        fields = krige_conditional_draws(data.coords, data.a, params, grid, n_imputations, seed=rng_a)
    else:
        raise ValueError("imputation must be 'plugin' or 'multiple'")
    names = ["intercept"] + [f"x{k}" for k in range(1, data.x.shape[1])] + ["beta1", "beta2"]
    draws1, draws2, last = [], [], None
    for f in fields:
        abar = spillover_summary(grid, f, kernel, data.coords)
        D = np.column_stack([data.x, data.a, abar])
        try:
            check_full_rank(D)
        except ValueError:
            raise ValueError("own treatment and spillover summary are collinear") from None
        post = sample_gp_regression(data.y, D, data.coords, names, config, rng=rng_y)
        draws1.append(post["beta1"])
        draws2.append(post["beta2"])
        last = post
    diag = {"n": data.n, "imputations": len(fields)}
    return GeostatInterferenceFit(CausalEstimate.from_draws("geostat:direct", np.concatenate(draws1), diagnostics=diag),
                                  CausalEstimate.from_draws("geostat:indirect", np.concatenate(draws2),
                                                            diagnostics=diag),
                                  params, last)
