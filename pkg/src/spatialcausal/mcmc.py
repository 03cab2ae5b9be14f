"""Metropolis-within-Gibbs machinery shared by every Bayesian fit.

Priors follow one convention throughout: regression coefficients
Normal(0, 10) (variance 10), variances InverseGamma(0.5, 0.005), CAR
dependence Uniform(0, 1).

Latent CAR fields are drawn jointly with the regression coefficients from
their Gaussian full conditional. The field part of that precision is banded
after a reverse Cuthill-McKee reordering, so the joint factorisation is a
banded Cholesky plus a small dense Schur complement for the coefficients.
Binary responses use Polya-Gamma augmentation, which makes the same block
update exact for logistic models.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from polyagamma import random_polyagamma
from scipy.linalg import lapack
from scipy.special import expit

from .data import RunConfig
from .lattice import Lattice

__all__ = [
    "PriorSpec",
    "PosteriorSummary",
    "chain_rngs",
    "gibbs_normal_coefficients",
    "gibbs_variance",
    "inverse_gamma_posterior",
    "mh_car_rho",
    "mh_logistic_block",
    "logistic_probabilities",
    "AdaptiveScale",
    "CarEffect",
    "GaussianRegression",
    "LogisticRegressionPG",
    "Recorder",
    "sample_linear",
    "sample_logistic",
    "run_chain",
]


@dataclass(frozen=True)
class PriorSpec:
    coef_var: float = 10.0
    var_shape: float = 0.5
    var_rate: float = 0.005

    def __post_init__(self):
        if min(self.coef_var, self.var_shape, self.var_rate) <= 0:
            raise ValueError("prior hyperparameters must be strictly positive")


DEFAULT_PRIOR = PriorSpec()


@dataclass
class PosteriorSummary:
    """Post burn-in draws keyed by parameter name, plus MH acceptance rates."""

    draws: dict[str, np.ndarray]
    acceptance: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.draws[name]

    def __contains__(self, name):
        return name in self.draws

    @property
    def names(self) -> list[str]:
        return list(self.draws)

    @property
    def n_draws(self) -> int:
        return len(next(iter(self.draws.values())))

    def mean(self, name):
        return self.draws[name].mean(axis=0)

    def sd(self, name):
        return self.draws[name].std(axis=0, ddof=1)

    def interval(self, name, level: float = 0.95):
        """Equal-tailed credible interval."""
        tail = (1.0 - level) / 2.0
        lo, hi = np.quantile(self.draws[name], [tail, 1.0 - tail], axis=0)
        return lo, hi

    def write_trace(self, path) -> None:
        """JSON lines, one object per retained iteration."""
        with Path(path).open("w", encoding="utf-8") as fh:
            for k in range(self.n_draws):
                row = {}
                for name, arr in self.draws.items():
                    v = arr[k]
                    row[name] = v.tolist() if np.ndim(v) else float(v)
                fh.write(json.dumps(row) + "\n")


def chain_rngs(seed, k: int) -> list[np.random.Generator]:
    """``k`` independent generators derived from one seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(k)]


# ---------------------------------------------------------- conjugate steps

def _coef_precision(p, prior, coef_prec=None):
    if coef_prec is None:
        return np.full(p, 1.0 / prior.coef_var)
    return np.asarray(coef_prec, dtype=float)


def gibbs_normal_coefficients(design, response, residual_variance, prior: PriorSpec = DEFAULT_PRIOR,
                              rng=None, coef_prec=None) -> np.ndarray:
    """Exact draw from the Normal full conditional of regression coefficients.

    ``response ~ N(design @ b, residual_variance I)`` with ``b ~ N(0, prior.coef_var I)``.
    """
    rng = np.random.default_rng(rng)
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(response, dtype=float)
    p = X.shape[1]
    P = X.T @ X / residual_variance + np.diag(_coef_precision(p, prior, coef_prec))
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ValueError("design is rank deficient") from None
    mean = sla.cho_solve((L, True), X.T @ y / residual_variance)
    return mean + sla.solve_triangular(L, rng.standard_normal(p), lower=True, trans="T")


def inverse_gamma_posterior(residuals, prior: PriorSpec = DEFAULT_PRIOR, extra_shape=0.0,
                            extra_rate=0.0) -> tuple[float, float]:
    """``(shape + n/2, rate + SSR/2)`` of the variance full conditional."""
    r = np.asarray(residuals, dtype=float)
    return prior.var_shape + r.size / 2.0 + extra_shape, prior.var_rate + 0.5 * float(r @ r) + extra_rate


def gibbs_variance(residuals, prior: PriorSpec = DEFAULT_PRIOR, rng=None, extra_shape=0.0, extra_rate=0.0) -> float:
    """Draw from InverseGamma(shape + n/2, rate + SSR/2)."""
    rng = np.random.default_rng(rng)
    shape, rate = inverse_gamma_posterior(residuals, prior, extra_shape, extra_rate)
    return rate / rng.gamma(shape)


def check_full_rank(X, what="design"):
    X = np.asarray(X, dtype=float)
    if X.shape[0] < X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError(f"{what} is rank deficient (collinear or unidentified columns)")


# ---------------------------------------------------------------- MH steps

class AdaptiveScale:
    """Random-walk proposal scale tuned toward a target acceptance rate.

    Adaptation only happens while ``adapt=True`` is passed (burn-in);
    acceptance counts for reporting are taken afterwards.
    """

    def __init__(self, scale=0.5, target=0.44, batch=50):
        self.scale = float(scale)
        self.target = target
        self.batch = batch
        self._acc = 0
        self._n = 0
        self._k = 0
        self.accepted = 0
        self.proposed = 0

    def record(self, accepted: bool, adapt: bool):
        if adapt:
            self._acc += accepted
            self._n += 1
            if self._n == self.batch:
                self._k += 1
                rate = self._acc / self._n
                self.scale *= np.exp((rate - self.target) * min(1.0, 3.0 / np.sqrt(self._k)))
                self._acc = self._n = 0
        else:
            self.accepted += accepted
            self.proposed += 1

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def _rho_logpost(rho, lam, uWu, sigma2, n_slices):
    # uniform prior, logit scale jacobian included
    return (0.5 * n_slices * np.sum(np.log1p(-rho * lam)) + 0.5 * rho * uWu / sigma2
            + np.log(rho) + np.log1p(-rho))


def _rho_step(rng, rho, lam, uWu, sigma2, n_slices, sd):
    x = np.log(rho / (1.0 - rho))
    prop = expit(x + sd * rng.standard_normal())
    if not 0.0 < prop < 1.0:
        return rho, False
    logr = _rho_logpost(prop, lam, uWu, sigma2, n_slices) - _rho_logpost(rho, lam, uWu, sigma2, n_slices)
    if np.log(rng.uniform()) < logr:
        return float(prop), True
    return rho, False


def mh_car_rho(current_rho, field_values, lattice: Lattice, sigma, proposal_sd, rng=None):
    """Random-walk MH on logit(rho) for a CAR field with Uniform(0, 1) prior.

    ``field_values`` may be an (N,) vector or an (S, N) stack of independent
    fields sharing ``(rho, sigma)``. Returns ``(rho, accepted)``.
    """
    if not 0.0 < current_rho < 1.0:
        raise ValueError("current rho must lie in (0, 1)")
    rng = np.random.default_rng(rng)
    U = np.atleast_2d(np.asarray(field_values, dtype=float))
    uWu = float(np.sum(U * (lattice.W @ U.T).T))
    return _rho_step(rng, float(current_rho), lattice.scaled_eigenvalues, uWu, sigma**2, U.shape[0], proposal_sd)


def logistic_probabilities(design, coefficients, latent=None) -> np.ndarray:
    eta = np.asarray(design, dtype=float) @ np.asarray(coefficients, dtype=float)
    if latent is not None:
        eta = eta + latent
    return expit(eta)


def _bernoulli_loglik(a, eta):
    # log expit(eta) for a=1, log expit(-eta) for a=0
    return float(np.sum(a * eta - np.logaddexp(0.0, eta)))


def mh_logistic_block(coefficients, latent, design, outcomes, proposal_sd, rng=None,
                      prior: PriorSpec = DEFAULT_PRIOR):
    """Random-walk MH update of a logistic coefficient block.

    ``latent`` is an offset added to the linear predictor (e.g. a spatial
    field evaluated at each observation). Returns ``(coefficients, accepted)``.
    """
    rng = np.random.default_rng(rng)
    b = np.asarray(coefficients, dtype=float)
    X = np.asarray(design, dtype=float)
    a = np.asarray(outcomes, dtype=float)
    off = 0.0 if latent is None else np.asarray(latent, dtype=float)
    prop = b + np.asarray(proposal_sd) * rng.standard_normal(b.shape)
    lp_old = _bernoulli_loglik(a, X @ b + off) - 0.5 * b @ b / prior.coef_var
    lp_new = _bernoulli_loglik(a, X @ prop + off) - 0.5 * prop @ prop / prior.coef_var
    if np.log(rng.uniform()) < lp_new - lp_old:
        return prop, True
    return b, False


# ------------------------------------------------------------- CAR fields

def _upper_band(S: sp.spmatrix, bw: int) -> np.ndarray:
    """LAPACK upper band storage: ``ab[bw + i - j, j] = S[i, j]`` for i <= j."""
    S = sp.triu(S).tocoo()
    ab = np.zeros((bw + 1, S.shape[0]))
    ab[bw + S.row - S.col, S.col] = S.data
    return ab


class CarEffect:
    """A region-indexed random effect with CAR (or iid) prior.

    ``index`` maps each observation to a field position ``slice * N + region``;
    ``n_slices`` independent copies share ``(rho, sigma2)`` (used for
    time-indexed fields). ``family='iid'`` gives exchangeable Normal(0, sigma2)
    effects.
    """

    def __init__(self, lattice: Lattice, index, *, n_slices: int = 1, family: str = "car",
                 prior: PriorSpec = DEFAULT_PRIOR, rho: float = 0.5, sigma2: float = 1.0,
                 rho_scale: float = 0.5, fixed_rho: float | None = None):
        if family not in ("car", "iid"):
            raise ValueError(f"unknown random-effect family '{family}'")
        self.lattice = lattice
        self.family = family
        self.prior = prior
        self.n_slices = int(n_slices)
        N = lattice.n_regions
        self.K = N * self.n_slices
        index = np.asarray(index, dtype=int)
        if index.min() < 0 or index.max() >= self.K:
            raise ValueError("random-effect index outside the lattice")
        order = lattice.band_order
        self.order = np.concatenate([order + s * N for s in range(self.n_slices)])
        inv = np.empty(self.K, dtype=int)
        inv[self.order] = np.arange(self.K)
        self.pos = inv[index]
        n = len(index)
        self.Zt = sp.csr_matrix((np.ones(n), (self.pos, np.arange(n))), shape=(self.K, n))
        Wp = lattice.W[order][:, order]
        Wfull = sp.block_diag([Wp] * self.n_slices, format="csr")
        self.Wp = Wfull
        coo = Wp.tocoo()
        self.bw = int(np.max(np.abs(coo.row - coo.col))) if family == "car" else 0
        self.W_band = _upper_band(Wfull, self.bw) if family == "car" else np.zeros((1, self.K))
        self.m = np.tile(lattice.m[order], self.n_slices)
        self.rho = float(fixed_rho if fixed_rho is not None else rho)
        self.fixed_rho = fixed_rho is not None
        self.sigma2 = float(sigma2)
        self.rho_scale = AdaptiveScale(rho_scale)
        self.values = np.zeros(self.K)  # permuted order

    def prior_band(self) -> np.ndarray:
        if self.family == "iid":
            return np.full((1, self.K), 1.0 / self.sigma2)
        ab = -self.rho * self.W_band / self.sigma2
        ab[-1] = self.m / self.sigma2
        return ab

    def natural(self, u=None) -> np.ndarray:
        """Field values in natural (slice-major, region) order."""
        u = self.values if u is None else u
        out = np.empty_like(u)
        out[self.order] = u
        return out

    def at_obs(self, u=None) -> np.ndarray:
        u = self.values if u is None else u
        return u[self.pos]

    def quad_form(self, u=None) -> float:
        u = self.values if u is None else u
        if self.family == "iid":
            return float(u @ u)
        return float(self.m @ (u * u) - self.rho * (u @ (self.Wp @ u)))

    def update_hyper(self, rng, adapt: bool = False):
        u = self.values
        self.sigma2 = gibbs_variance(np.empty(0), self.prior, rng,
                                     extra_shape=self.K / 2.0, extra_rate=0.5 * self.quad_form(u))
        if self.family == "car" and not self.fixed_rho:
            uWu = float(u @ (self.Wp @ u))
            self.rho, acc = _rho_step(rng, self.rho, self.lattice.scaled_eigenvalues, uWu,
                                      self.sigma2, self.n_slices, self.rho_scale.scale)
            self.rho_scale.record(acc, adapt)


def _arrow_draw(rng, ab, B, C, bu, bb):
    """Draw x ~ N(P^{-1} b, P^{-1}) for P = [[A, B], [B^T, C]], A banded.

    Returns ``(x_field, x_coef)``.
    """
    U, info = lapack.dpbtrf(ab, lower=0)
    if info != 0:
        raise np.linalg.LinAlgError("field precision is not positive definite")
    y1, _ = lapack.dtbtrs(U, bu, uplo="U", trans="T")
    p = C.shape[0]
    if p:
        G, _ = lapack.dtbtrs(U, B, uplo="U", trans="T")
        S = C - G.T @ G
        Ls = np.linalg.cholesky(S)
        y2 = sla.solve_triangular(Ls, bb - G.T @ y1, lower=True)
        y2 = y2 + rng.standard_normal(p)
        y1 = y1 + rng.standard_normal(len(y1))
        x2 = sla.solve_triangular(Ls, y2, lower=True, trans="T")
        x1, _ = lapack.dtbtrs(U, y1 - G @ x2, uplo="U", trans="N")
        return x1, x2
    y1 = y1 + rng.standard_normal(len(y1))
    x1, _ = lapack.dtbtrs(U, y1, uplo="U", trans="N")
    return x1, np.empty(0)


def draw_field_block(rng, effect: CarEffect, weights, wresp, X, coef_prec, extra_diag=None, extra_lin=None):
    """Joint Gaussian draw of (field, coefficients).

    The observation model contributes precision ``[Z X]^T diag(weights) [Z X]``
    and linear term ``[Z X]^T wresp``.
    """
    w = np.asarray(weights, dtype=float)
    ab = effect.prior_band().copy()
    ab[-1] += effect.Zt @ w
    bu = effect.Zt @ wresp
    if extra_diag is not None:
        ab[-1] += extra_diag
    if extra_lin is not None:
        bu = bu + extra_lin
    wX = X * w[:, None]
    B = np.asarray(effect.Zt @ wX)
    C = X.T @ wX + np.diag(coef_prec)
    return _arrow_draw(rng, ab, B, C, bu, X.T @ wresp)


# ------------------------------------------------------------ model states

class GaussianRegression:
    """Gibbs state for ``y = X b + u[index] + e``, ``e ~ N(0, tau2)``."""

    def __init__(self, y, X, effect: CarEffect | None = None, prior: PriorSpec = DEFAULT_PRIOR,
                 coef_prec=None, tau2=None):
        self.y = np.asarray(y, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.effect = effect
        self.prior = prior
        self.coef_prec = _coef_precision(self.X.shape[1], prior, coef_prec)
        self.b = np.linalg.lstsq(self.X, self.y, rcond=None)[0] if self.X.shape[1] else np.empty(0)
        r = self.y - self.X @ self.b
        scale = max(float(np.var(self.y)), 1.0)
        self.fixed_tau2 = tau2 is not None
        self.tau2 = float(tau2) if tau2 is not None else max(float(np.var(r)), 1e-6 * scale)

    def field_at_obs(self):
        return self.effect.at_obs() if self.effect is not None else 0.0

    def step(self, rng, X=None, y=None, adapt=False, field_offset=None):
        if X is not None:
            self.X = X
        if y is not None:
            self.y = y
        X, y = self.X, self.y
        if self.effect is not None:
            w = np.full(len(y), 1.0 / self.tau2)
            u, self.b = draw_field_block(rng, self.effect, w, y * w, X, self.coef_prec)
            self.effect.values = u
        else:
            self.b = gibbs_normal_coefficients(X, y, self.tau2, self.prior, rng, self.coef_prec)
        if not self.fixed_tau2:
            self.tau2 = gibbs_variance(self.residuals(), self.prior, rng)
        if self.effect is not None:
            self.effect.update_hyper(rng, adapt)

    def residuals(self):
        return self.y - self.X @ self.b - self.field_at_obs()


class LogisticRegressionPG:
    """Gibbs state for ``logit P(a=1) = X b + v[index]`` via Polya-Gamma augmentation.

    ``extra_diag``/``extra_lin`` let a caller add Gaussian information about
    the field from another likelihood (the outcome model of a joint fit).
    """

    def __init__(self, a, X, effect: CarEffect | None = None, prior: PriorSpec = DEFAULT_PRIOR):
        self.a = np.asarray(a, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.effect = effect
        self.prior = prior
        self.coef_prec = _coef_precision(self.X.shape[1], prior)
        self.b = np.zeros(self.X.shape[1])
        self.kappa = self.a - 0.5

    def eta(self):
        e = self.X @ self.b
        if self.effect is not None:
            e = e + self.effect.at_obs()
        return e

    def step(self, rng, adapt=False, extra_diag=None, extra_lin=None):
        omega = random_polyagamma(1.0, self.eta(), random_state=rng)
        if self.effect is not None:
            v, self.b = draw_field_block(rng, self.effect, omega, self.kappa, self.X, self.coef_prec,
                                         extra_diag, extra_lin)
            self.effect.values = v
            self.effect.update_hyper(rng, adapt)
        else:
            wX = self.X * omega[:, None]
            P = self.X.T @ wX + np.diag(self.coef_prec)
            L = np.linalg.cholesky(P)
            mean = sla.cho_solve((L, True), self.X.T @ self.kappa)
            self.b = mean + sla.solve_triangular(L, rng.standard_normal(len(mean)), lower=True, trans="T")


# -------------------------------------------------------------- recording

class Recorder:
    """Preallocated storage for retained draws."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.n_keep = config.n_keep
        self.store: dict[str, np.ndarray] = {}
        self.k = 0

    def keep(self, it: int) -> bool:
        c = self.config
        return it >= c.burn_in and (it - c.burn_in) % c.thin == 0

    def put(self, name, value):
        v = np.asarray(value, dtype=float)
        if name not in self.store:
            self.store[name] = np.empty((self.n_keep,) + v.shape)
        self.store[name][self.k] = v

    def advance(self):
        self.k += 1

    def summary(self, acceptance=None) -> PosteriorSummary:
        return PosteriorSummary(self.store, dict(acceptance or {}))


def _record_effect(rec, effect, prefix, store_field):
    if effect is None:
        return
    rec.put(f"sigma2_{prefix}", effect.sigma2)
    if effect.family == "car":
        rec.put(f"rho_{prefix}", effect.rho)
    if store_field:
        rec.put(prefix, effect.natural())


def sample_linear(y, X, names, *, effect: CarEffect | None = None, prior: PriorSpec = DEFAULT_PRIOR,
                  config: RunConfig | None = None, rng=None, store_field: bool = False,
                  coef_prec=None, field_name: str = "U", check_rank: bool = True) -> PosteriorSummary:
    """Run a Gibbs chain for a Gaussian linear model with optional CAR effect.

    ``check_rank=False`` admits all-zero design columns, whose coefficients
    then simply follow their prior.
    """
    config = config or RunConfig()
    rng = rng if isinstance(rng, np.random.Generator) else chain_rngs(config.seed if rng is None else rng, 1)[0]
    X = np.asarray(X, dtype=float)
    if len(names) != X.shape[1]:
        raise ValueError("one name per design column required")
    if check_rank:
        check_full_rank(X)
    else:
        check_full_rank(X[:, np.any(X != 0, axis=0)])
    model = GaussianRegression(y, X, effect, prior, coef_prec)
    rec = Recorder(config)
    for it in range(config.iterations):
        model.step(rng, adapt=it < config.burn_in)
        if rec.keep(it):
            for name, val in zip(names, model.b):
                rec.put(name, val)
            rec.put("tau2", model.tau2)
            _record_effect(rec, effect, field_name, store_field)
            rec.advance()
    acc = {f"rho_{field_name}": effect.rho_scale.rate} if effect is not None and effect.family == "car" else {}
    return rec.summary(acc)


def sample_logistic(a, X, names, *, effect: CarEffect | None = None, prior: PriorSpec = DEFAULT_PRIOR,
                    config: RunConfig | None = None, rng=None, store_field: bool = True,
                    field_name: str = "V") -> PosteriorSummary:
    """Polya-Gamma Gibbs chain for a (spatial) logistic regression."""
    config = config or RunConfig()
    rng = rng if isinstance(rng, np.random.Generator) else chain_rngs(config.seed if rng is None else rng, 1)[0]
    model = LogisticRegressionPG(a, X, effect, prior)
    rec = Recorder(config)
    for it in range(config.iterations):
        model.step(rng, adapt=it < config.burn_in)
        if rec.keep(it):
            for name, val in zip(names, model.b):
                rec.put(name, val)
            _record_effect(rec, effect, field_name, store_field)
            rec.advance()
    acc = {f"rho_{field_name}": effect.rho_scale.rate} if effect is not None and effect.family == "car" else {}
    return rec.summary(acc)


def run_chain(model, data, config: RunConfig | None = None, lattice: Lattice | None = None) -> PosteriorSummary:
    """Fit the estimator named by ``model`` (a ``ModelSpec``) and return its posterior.

    Deterministic given ``config.seed``.
    """
    from .confound import fit_model

    return fit_model(model, data, lattice=lattice, config=config).posterior
