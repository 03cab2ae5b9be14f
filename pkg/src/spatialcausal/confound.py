"""Average treatment effect estimators under unmeasured spatial confounding.

All Bayesian fits draw from three independent random streams derived from
``config.seed``: stream 0 drives the outcome model, stream 1 the treatment
model, stream 2 auxiliary choices. Because of this, fits that share an
outcome model (S, Strata with one stratum, Joint with ``psi`` fixed at 0)
produce identical outcome draws under the same seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from polyagamma import random_polyagamma
from scipy.optimize import linprog
from scipy.special import expit, log_expit
from scipy.stats import norm

from .data import ArealDataset, RunConfig
from .lattice import Lattice
from .mcmc import (DEFAULT_PRIOR, AdaptiveScale, CarEffect, GaussianRegression, LogisticRegressionPG,
                   PosteriorSummary, PriorSpec, Recorder, chain_rngs, check_full_rank,
                   _arrow_draw, _upper_band, gibbs_normal_coefficients, gibbs_variance, sample_linear)
from .propensity import (PropensityFit, StrataSpec, build_strata, fit_binary_propensity,
                         propensity_design)

__all__ = [
    "ESTIMATORS",
    "ModelSpec",
    "CausalEstimate",
    "fit_ns",
    "fit_s",
    "fit_with_propensity",
    "fit_strata",
    "aipw_contrast",
    "aipw_adjust",
    "fit_joint",
    "fit_cut",
    "fit_sar",
    "sar_loglik",
    "schnell_bias",
    "fit_schnell",
    "match_difference",
    "fit_cond_logit",
    "fit_iv",
    "gls_bias_oracle",
    "fit_model",
    "write_estimates_csv",
]

ESTIMATORS = ("NS", "NS+P", "S", "S+P", "S+Strata", "S+AIPW", "Joint", "Cut", "SEM", "SAR",
              "Schnell", "IV", "MatchDiff", "CondLogit")
OUTCOME, TREATMENT, AUX = 0, 1, 2


@dataclass(frozen=True)
class ModelSpec:
    """Which estimator to fit and its options."""

    estimator: str
    prior_family: str = "car"
    n_strata: int = 5
    instrument: str = "z"
    fix_psi: float | None = None

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator '{self.estimator}'; choose from {', '.join(ESTIMATORS)}")
        if self.prior_family not in ("car", "iid"):
            raise ValueError("prior family must be 'car' or 'iid'")
        if self.prior_family == "iid" and self.estimator not in ("Joint", "SEM"):
            raise ValueError("independent random-effect priors apply only to Joint/SEM")
        if self.n_strata < 1:
            raise ValueError("strata count must be positive")
        if self.fix_psi is not None and self.estimator not in ("Joint", "SEM"):
            raise ValueError("fix_psi applies only to the joint model")


@dataclass
class CausalEstimate:
    estimator: str
    point: float
    lo: float
    hi: float
    flags: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict)
    posterior: PosteriorSummary | None = None

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError("interval lower bound exceeds upper bound")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def covers(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    @classmethod
    def from_draws(cls, estimator, draws, flags=(), diagnostics=None, posterior=None):
        d = np.asarray(draws, dtype=float)
        lo, hi = np.quantile(d, [0.025, 0.975])
        return cls(estimator, float(d.mean()), float(lo), float(hi), tuple(flags), dict(diagnostics or {}),
                   posterior)


# ----------------------------------------------------------------- helpers

def _xnames(data) -> list[str]:
    return ["intercept"] + [f"x{k}" for k in range(1, data.x.shape[1])]


def _config(config):
    return config or RunConfig()


def _check_contrast(a):
    if np.ptp(np.asarray(a, dtype=float)) == 0:
        raise ValueError("treatment is constant; no contrast to estimate")


def _require_binary(data):
    if not np.all(np.isin(data.a, (0.0, 1.0))):
        raise ValueError("estimator needs a binary treatment")
    _check_contrast(data.a)


def _diag(post: PosteriorSummary, data, **extra):
    d = {"n": int(data.n), "draws": post.n_draws}
    d.update({f"accept_{k}": v for k, v in post.acceptance.items()})
    d.update(extra)
    return d


def _linear_fit(tag, data, design, names, lattice, config, *, store_field=False, rng=None):
    config = _config(config)
    check_full_rank(design)
    effect = CarEffect(lattice, data.region) if lattice is not None else None
    rng = rng if rng is not None else chain_rngs(config.seed, 3)[OUTCOME]
    post = sample_linear(data.y, design, names, effect=effect, config=config, rng=rng,
                         store_field=store_field)
    return CausalEstimate.from_draws(tag, post["beta"], diagnostics=_diag(post, data), posterior=post)


# --------------------------------------------------------- regression fits

def fit_ns(data: ArealDataset, config: RunConfig | None = None) -> CausalEstimate:
    """Bayesian linear model ``Y = X gamma + A beta + e``."""
    _check_contrast(data.a)
    return _linear_fit("NS", data, np.column_stack([data.x, data.a]), _xnames(data) + ["beta"], None, config)


def fit_s(data: ArealDataset, lattice: Lattice, config: RunConfig | None = None,
          store_field: bool = True) -> CausalEstimate:
    """NS mean plus a CAR random effect ``U``."""
    _check_contrast(data.a)
    return _linear_fit("S", data, np.column_stack([data.x, data.a]), _xnames(data) + ["beta"], lattice,
                       config, store_field=store_field)


def _scores(scores):
    return scores.scores if isinstance(scores, PropensityFit) else np.asarray(scores, dtype=float)


def fit_with_propensity(data: ArealDataset, lattice: Lattice | None, scores, spatial: bool = True,
                        config: RunConfig | None = None, df: int = 5) -> CausalEstimate:
    """Outcome model with a B-spline function of the propensity score added to the mean."""
    _check_contrast(data.a)
    F = propensity_design(_scores(scores), df=df)
    design = np.column_stack([data.x, data.a, F])
    names = _xnames(data) + ["beta"] + [f"f{k}" for k in range(1, F.shape[1] + 1)]
    if spatial and lattice is None:
        raise ValueError("spatial fit needs a lattice")
    return _linear_fit("S+P" if spatial else "NS+P", data, design, names, lattice if spatial else None, config)


def fit_strata(data: ArealDataset, lattice: Lattice, strata: StrataSpec,
               config: RunConfig | None = None) -> CausalEstimate:
    """Stratum intercepts ``S_l`` plus CAR field; one stratum reproduces S."""
    _check_contrast(data.a)
    if len(strata.labels) != data.n:
        raise ValueError("strata labels do not match the data")
    counts = np.bincount(strata.labels, minlength=strata.L)
    if np.any(counts == 0):
        raise ValueError(f"stratum {int(np.argmin(counts)) + 1} is empty")
    D = strata.indicators()
    design = np.column_stack([data.x, data.a, D])
    names = _xnames(data) + ["beta"] + [f"stratum{l}" for l in range(2, strata.L + 1)]
    est = _linear_fit("S+Strata", data, design, names, lattice, config)
    est.diagnostics["strata"] = strata.L
    return est


# -------------------------------------------------------------------- AIPW

def aipw_contrast(a, y, e, y1, y0) -> np.ndarray:
    """Doubly robust contrast averaged over all observations.

    ``y1``/``y0`` may carry a leading draw axis; the average is over the last axis.
    """
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    e = np.asarray(e, dtype=float)
    if np.any(e <= 0) or np.any(e >= 1):
        raise ValueError("propensity scores must lie strictly inside (0, 1) (positivity)")
    d = (a * y - (a - e) * y1) / e - ((1 - a) * y - (e - a) * y0) / (1 - e)
    return d.mean(axis=-1)


def aipw_adjust(fit, data: ArealDataset, scores) -> CausalEstimate:
    """Post-process the draws of a spatial outcome fit (model S) into AIPW draws."""
    post = fit.posterior if isinstance(fit, CausalEstimate) else fit
    _require_binary(data)
    e = _scores(scores)
    names = _xnames(data)
    gamma = np.column_stack([post[n] for n in names])
    base = gamma @ data.x.T
    if "U" in post:
        base = base + post["U"][:, data.region]
    beta = post["beta"][:, None]
    delta = aipw_contrast(data.a, data.y, e, base + beta, base)
    return CausalEstimate.from_draws("S+AIPW", delta, diagnostics={"n": data.n, "draws": len(delta)})


# ------------------------------------------------------------ joint models

def _record_effect(rec, eff, label):
    rec.put(f"sigma2_{label}", eff.sigma2)
    if eff.family == "car":
        rec.put(f"rho_{label}", eff.rho)


def _record_joint(rec, names, b, psi, tau2, eff_u, alpha, eff_v):
    for name, val in zip(names, b):
        rec.put(name, val)
    rec.put("psi", psi)
    rec.put("tau2", tau2)
    _record_effect(rec, eff_u, "U")
    for k, val in enumerate(alpha):
        rec.put(f"alpha{k}", val)
    _record_effect(rec, eff_v, "V")
    rec.advance()


class _JointBlock:
    """Gibbs state for the joint model drawing ``(u, v, gamma, beta, alpha)`` in one block.

    Given ``psi`` and the Polya-Gamma latents the two fields and all
    coefficients are jointly Gaussian. Fields are interleaved per region so
    the precision stays banded; ``psi`` is then drawn given everything else.
    """

    def __init__(self, data, base, eff_u, eff_v, prior):
        self.y = data.y
        self.a = np.asarray(data.a, dtype=float)
        self.Xo = base
        self.Xa = data.x
        self.eff_u, self.eff_v = eff_u, eff_v
        self.prior = prior
        K = eff_u.K
        self.bw = max(2 * eff_u.bw, 1)
        E = [sp.csr_matrix(([1.0], ([k], [k])), shape=(2, 2)) for k in (0, 1)]
        self.Wu = _upper_band(sp.kron(eff_u.Wp, E[0]), self.bw)
        self.Wv = _upper_band(sp.kron(eff_v.Wp, E[1]), self.bw)
        self.n_per = eff_u.Zt @ np.ones(len(self.y))
        self.Zt = eff_u.Zt
        self.p, self.q = base.shape[1], data.x.shape[1]
        self.cprec = np.full(self.p + self.q, 1.0 / prior.coef_var)
        self.b_out = np.linalg.lstsq(base, self.y, rcond=None)[0]
        self.alpha = np.zeros(self.q)
        self.psi = 0.0
        self.tau2 = max(float(np.var(self.y - base @ self.b_out)), 1e-6)
        self.kappa = self.a - 0.5
        self.K = K
        self.scale_move = AdaptiveScale(0.1, target=0.44)

    def _rescale(self, rng, adapt):
        """Group move ``(psi, v, alpha, sigma2_V) -> (c psi, v / c, alpha / c, sigma2_V / c^2)``.

        ``psi v`` is unchanged, so only the treatment likelihood and the
        priors enter the acceptance ratio.
        """
        ev, pr = self.eff_v, self.prior
        lc = self.scale_move.scale * rng.standard_normal()
        c = np.exp(lc)
        eta = self.Xa @ self.alpha + ev.at_obs()
        d_lik = float(self.a @ (eta / c - eta) - np.logaddexp(0, eta / c).sum() + np.logaddexp(0, eta).sum())
        d_prior = (-(c**2 - 1) * self.psi**2 - (c**-2 - 1) * float(self.alpha @ self.alpha)) / (2 * pr.coef_var)
        d_prior -= pr.var_rate * (c**2 - 1) / ev.sigma2
        logr = d_lik + d_prior + (2 * pr.var_shape + 1 - self.q) * lc
        ok = np.log(rng.uniform()) < logr
        if ok:
            self.psi *= c
            ev.values = ev.values / c
            self.alpha = self.alpha / c
            ev.sigma2 /= c**2
        self.scale_move.record(bool(ok), adapt)

    def _prior_band(self, eff, W):
        if eff.family == "iid":
            return np.zeros_like(W)
        return -eff.rho / eff.sigma2 * W

    def step(self, rng_y, rng_a, adapt=False):
        eu, ev = self.eff_u, self.eff_v
        v_obs = ev.at_obs()
        omega = random_polyagamma(1.0, self.Xa @ self.alpha + v_obs, random_state=rng_a)
        t, psi, Zt = 1.0 / self.tau2, self.psi, self.Zt
        ab = self._prior_band(eu, self.Wu) + self._prior_band(ev, self.Wv)
        diag = np.empty(2 * self.K)
        diag[0::2] = eu.prior_band()[-1] + t * self.n_per
        diag[1::2] = ev.prior_band()[-1] + psi**2 * t * self.n_per + Zt @ omega
        ab[-1] = diag
        ab[-2, 1::2] += psi * t * self.n_per
        bu = np.empty(2 * self.K)
        zy = Zt @ self.y
        bu[0::2] = t * zy
        bu[1::2] = psi * t * zy + Zt @ self.kappa
        Xo, Xa = self.Xo, self.Xa
        B = np.zeros((2 * self.K, self.p + self.q))
        ZXo = np.asarray(Zt @ Xo)
        B[0::2, :self.p] = t * ZXo
        B[1::2, :self.p] = psi * t * ZXo
        B[1::2, self.p:] = np.asarray(Zt @ (Xa * omega[:, None]))
        C = np.zeros((self.p + self.q, self.p + self.q))
        C[:self.p, :self.p] = t * Xo.T @ Xo
        C[self.p:, self.p:] = Xa.T @ (Xa * omega[:, None])
        C[np.diag_indices_from(C)] += self.cprec
        bb = np.concatenate([t * Xo.T @ self.y, Xa.T @ self.kappa])
        x1, x2 = _arrow_draw(rng_y, ab, B, C, bu, bb)
        eu.values, ev.values = x1[0::2], x1[1::2]
        self.b_out, self.alpha = x2[:self.p], x2[self.p:]
        v_obs = ev.at_obs()
        r = self.y - Xo @ self.b_out - eu.at_obs()
        prec = t * float(v_obs @ v_obs) + 1.0 / self.prior.coef_var
        self.psi = t * float(v_obs @ r) / prec + rng_y.standard_normal() / np.sqrt(prec)
        self.tau2 = gibbs_variance(r - self.psi * v_obs, self.prior, rng_y)
        eu.update_hyper(rng_y, adapt)
        ev.update_hyper(rng_a, adapt)
        self._rescale(rng_a, adapt)


def fit_joint(data: ArealDataset, lattice: Lattice, config: RunConfig | None = None,
              prior_family: str = "car", fix_psi: float | None = None,
              prior: PriorSpec = DEFAULT_PRIOR) -> CausalEstimate:
    """Joint outcome/treatment model sharing the treatment random effect ``v``.

    Outcome ``Y = X gamma + A beta + u + psi v + e``; treatment
    ``logit e = X alpha + v``. ``prior_family='iid'`` gives the SEM variant
    with exchangeable random effects, which needs within-region replication.
    """
    config = _config(config)
    _require_binary(data)
    tag = "SEM" if prior_family == "iid" else "Joint"
    if prior_family == "iid" and data.counts.max() < 2:
        raise ValueError("independent random-effect priors need replication within regions")
    rng_y, rng_a, _ = chain_rngs(config.seed, 3)
    base = np.column_stack([data.x, data.a])
    check_full_rank(base)
    p = base.shape[1]
    names = _xnames(data) + ["beta"]
    eff_u = CarEffect(lattice, data.region, family=prior_family, prior=prior)
    eff_v = CarEffect(lattice, data.region, family=prior_family, prior=prior)
    free = fix_psi is None
    rec = Recorder(config)
    if free:
        joint = _JointBlock(data, base, eff_u, eff_v, prior)
        for it in range(config.iterations):
            joint.step(rng_y, rng_a, adapt=it < config.burn_in)
            if rec.keep(it):
                _record_joint(rec, names, joint.b_out, joint.psi, joint.tau2, eff_u, joint.alpha, eff_v)
    else:
        psi = float(fix_psi)
        outcome = GaussianRegression(data.y, base, eff_u, prior)
        treat = LogisticRegressionPG(data.a, data.x, eff_v, prior)
        n_per = eff_v.Zt @ np.ones(data.n)
        for it in range(config.iterations):
            adapt = it < config.burn_in
            if psi != 0.0:
                outcome.step(rng_y, y=data.y - psi * eff_v.at_obs(), adapt=adapt)
                r = data.y - base @ outcome.b - eff_u.at_obs()
                treat.step(rng_a, adapt, extra_diag=psi**2 / outcome.tau2 * n_per,
                           extra_lin=psi / outcome.tau2 * (eff_v.Zt @ r))
            else:
                outcome.step(rng_y, adapt=adapt)
                treat.step(rng_a, adapt)
            if rec.keep(it):
                _record_joint(rec, names, outcome.b, psi, outcome.tau2, eff_u, treat.b, eff_v)
    acc = {}
    if prior_family == "car":
        acc = {"rho_U": eff_u.rho_scale.rate, "rho_V": eff_v.rho_scale.rate}
    post = rec.summary(acc)
    return CausalEstimate.from_draws(tag, post["beta"], diagnostics=_diag(post, data), posterior=post)


def fit_cut(data: ArealDataset, lattice: Lattice, config: RunConfig | None = None,
            prior: PriorSpec = DEFAULT_PRIOR, stage1: PropensityFit | None = None) -> CausalEstimate:
    """Joint model with feedback cut.

    Stage 1 fits the treatment model alone. Stage 2 runs the outcome chain,
    plugging in a randomly chosen stored stage-1 draw of ``v`` at each
    iteration, so the outcome never informs ``v``.
    """
    config = _config(config)
    _require_binary(data)
    rng_y, rng_a, rng_aux = chain_rngs(config.seed, 3)
    if stage1 is None or stage1.posterior is None or "V" not in stage1.posterior:
        stage1 = fit_binary_propensity(data, lattice, config, prior, rng=rng_a)
    V = stage1.posterior["V"]
    base = np.column_stack([data.x, data.a])
    check_full_rank(base)
    p = base.shape[1]
    names = _xnames(data) + ["beta"]
    eff_u = CarEffect(lattice, data.region, prior=prior)
    outcome = GaussianRegression(data.y, np.column_stack([base, np.zeros(data.n)]), eff_u, prior)
    rec = Recorder(config)
    for it in range(config.iterations):
        v = V[rng_aux.integers(len(V))]
        outcome.step(rng_y, X=np.column_stack([base, v[data.region]]), adapt=it < config.burn_in)
        if rec.keep(it):
            for name, val in zip(names, outcome.b[:p]):
                rec.put(name, val)
            rec.put("psi", outcome.b[-1])
            rec.put("tau2", outcome.tau2)
            _record_effect(rec, eff_u, "U")
            rec.advance()
    post = rec.summary({"rho_U": eff_u.rho_scale.rate})
    return CausalEstimate.from_draws("Cut", post["beta"], diagnostics=_diag(post, data), posterior=post)


# --------------------------------------------------------------------- SAR

def _single_obs(data, what):
    if np.any(data.counts > 1):
        raise ValueError(f"{what} is defined without replication; found repeated regions")
    if np.any(data.counts == 0):
        raise ValueError(f"{what} needs one observation in every region")
    return np.argsort(data.region)


def sar_loglik(y, design, coef, phi, sigma2, lattice: Lattice) -> float:
    """Log-likelihood of ``(I - phi C) y = (I - phi C) D b + e``, ``e ~ N(0, sigma2 I)``."""
    C = lattice.C
    r = (y - phi * (C @ y)) - (design - phi * (C @ design)) @ coef
    n = len(y)
    logdet = float(np.sum(np.log1p(-phi * lattice.scaled_eigenvalues)))
    return logdet - 0.5 * n * np.log(2 * np.pi * sigma2) - 0.5 * float(r @ r) / sigma2


def fit_sar(data: ArealDataset, lattice: Lattice, config: RunConfig | None = None,
            prior: PriorSpec = DEFAULT_PRIOR) -> CausalEstimate:
    """Neighbourhood-mean differenced regression with ``phi ~ Uniform(0, 1)``."""
    config = _config(config)
    _check_contrast(data.a)
    order = _single_obs(data, "SAR")
    y = data.y[order]
    D = np.column_stack([data.x, data.a])[order]
    check_full_rank(D)
    names = _xnames(data) + ["beta"]
    rng = chain_rngs(config.seed, 3)[OUTCOME]
    C = lattice.C
    Cy, CD = C @ y, C @ D
    lam = lattice.scaled_eigenvalues
    phi, sigma2 = 0.5, max(float(np.var(y)), 1e-8)
    b = np.linalg.lstsq(D, y, rcond=None)[0]
    scale = AdaptiveScale(0.5)

    def logpost(ph, b, s2):
        r = (y - ph * Cy) - (D - ph * CD) @ b
        return np.sum(np.log1p(-ph * lam)) - 0.5 * float(r @ r) / s2 + np.log(ph) + np.log1p(-ph)

    rec = Recorder(config)
    for it in range(config.iterations):
        ty, tD = y - phi * Cy, D - phi * CD
        b = gibbs_normal_coefficients(tD, ty, sigma2, prior, rng)
        sigma2 = gibbs_variance(ty - tD @ b, prior, rng)
        prop = expit(np.log(phi / (1 - phi)) + scale.scale * rng.standard_normal())
        ok = 0.0 < prop < 1.0 and np.log(rng.uniform()) < logpost(prop, b, sigma2) - logpost(phi, b, sigma2)
        if ok:
            phi = float(prop)
        scale.record(ok, it < config.burn_in)
        if rec.keep(it):
            for name, val in zip(names, b):
                rec.put(name, val)
            rec.put("phi", phi)
            rec.put("sigma2", sigma2)
            rec.advance()
    post = rec.summary({"phi": scale.rate})
    return CausalEstimate.from_draws("SAR", post["beta"], diagnostics=_diag(post, data), posterior=post)


# ----------------------------------------------------------------- Schnell

class _CarEigen:
    """Spectral helpers for ``M - rho W = M^{1/2} (I - rho S) M^{1/2}``."""

    def __init__(self, lattice: Lattice):
        self.m = lattice.m
        self.sq = np.sqrt(lattice.m)
        d = 1.0 / self.sq
        S = (d[:, None] * lattice.W.toarray()) * d[None, :]
        self.lam, self.P = np.linalg.eigh(S)

    def car_inv_cov(self, rho, sigma2):
        """``sigma2 (M - rho W)^{-1}`` as a dense matrix."""
        G = self.P / self.sq[:, None]
        return sigma2 * (G / (1 - rho * self.lam)) @ G.T

    def bias(self, a, rho, rho_u, sigma_u, sigma_a):
        """``rho (sigma_u / sigma_a) (M - rho_u W)^{-1} M a``."""
        t = self.P.T @ (self.sq * a)
        return rho * sigma_u / sigma_a * (self.P @ (t / (1 - rho_u * self.lam))) / self.sq

    def treatment_logpdf(self, a, rho, rho_a, rho_u, sigma_a):
        """Log density of ``A`` with precision ``sigma_a^-2 {(M - rho_a W) - rho^2 M (M - rho_u W)^{-1} M}``."""
        k = 1 - rho_a * self.lam - rho**2 / (1 - rho_u * self.lam)
        if np.any(k <= 0):
            return -np.inf
        t = self.P.T @ (self.sq * a)
        n = len(a)
        logdet = np.sum(np.log(self.m)) + np.sum(np.log(k)) - 2 * n * np.log(sigma_a)
        return 0.5 * logdet - 0.5 * float(t @ (k * t)) / sigma_a**2 - 0.5 * n * np.log(2 * np.pi)


def schnell_bias(a, lattice: Lattice, rho, rho_u, sigma_u, sigma_a, coherent: bool = True) -> np.ndarray:
    """Confounding bias ``B(A) = -Q_U^{-1} Q_UA A``.

    ``coherent=True`` uses ``Q_UA = -rho M / (sigma_u sigma_a)``, the scaling
    under which the treatment marginal has the closed form used by
    :func:`fit_schnell`. ``coherent=False`` uses ``Q_UA = -rho sigma_u sigma_a M``.
    """
    a = np.asarray(a, dtype=float)
    M = np.diag(lattice.m)
    QU = (M - rho_u * lattice.W.toarray()) / sigma_u**2
    QUA = -rho * M / (sigma_u * sigma_a) if coherent else -rho * sigma_u * sigma_a * M
    return -np.linalg.solve(QU, QUA @ a)


def fit_schnell(data: ArealDataset, lattice: Lattice, config: RunConfig | None = None,
                prior: PriorSpec = DEFAULT_PRIOR, fix_rho: float | None = None) -> CausalEstimate:
    """Joint Gaussian model for a continuous treatment and a CAR confounder.

    Coefficients are drawn by GLS Gibbs steps; the six covariance
    parameters by an adaptive block random walk on transformed scales
    (logit for ``rho_U, rho_A``, Fisher z for ``rho``, log for variances).
    """
    config = _config(config)
    _check_contrast(data.a)
    order = _single_obs(data, "the Schnell model")
    y, a = data.y[order], data.a[order]
    D = np.column_stack([data.x, data.a])[order]
    check_full_rank(D)
    names = _xnames(data) + ["beta"]
    rng = chain_rngs(config.seed, 3)[OUTCOME]
    eig = _CarEigen(lattice)
    n = len(y)
    coef_prec = np.full(D.shape[1], 1.0 / prior.coef_var)

    # theta = (logit rho_u, logit rho_a, atanh rho, log su2, log sa2, log tau2)
    def unpack(th):
        return (expit(th[0]), expit(th[1]), np.tanh(th[2]) if fix_rho is None else float(fix_rho),
                np.exp(th[3]), np.exp(th[4]), np.exp(th[5]))

    def loglik(th, b):
        ru, ra, r, su2, sa2, t2 = unpack(th)
        lp_a = eig.treatment_logpdf(a, r, ra, ru, np.sqrt(sa2))
        if not np.isfinite(lp_a):
            return -np.inf, None
        S = eig.car_inv_cov(ru, su2) + t2 * np.eye(n)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return -np.inf, None
        ystar = y + eig.bias(a, r, ru, np.sqrt(su2), np.sqrt(sa2))
        z = sla.solve_triangular(L, ystar - D @ b, lower=True)
        lp = -np.sum(np.log(np.diag(L))) - 0.5 * float(z @ z) + lp_a
        return lp, (L, ystar)

    def logprior(th):
        lp = th[0] - 2 * np.logaddexp(0, th[0]) + th[1] - 2 * np.logaddexp(0, th[1])
        lp += np.log1p(-np.tanh(th[2]) ** 2)  # uniform on (-1, 1)
        for s in th[3:]:
            lp += -prior.var_shape * s - prior.var_rate * np.exp(-s)
        return lp

    th = np.array([0.0, 0.0, 0.0, np.log(np.var(y) / 2 + 1e-8), np.log(np.var(a) + 1e-8),
                   np.log(np.var(y) / 2 + 1e-8)])
    free = np.ones(6, bool)
    free[2] = fix_rho is None
    b = np.linalg.lstsq(D, y, rcond=None)[0]
    cur, cache = loglik(th, b)
    prop_cov = np.diag(np.where(free, 0.1**2, 0.0))
    hist = []
    scale = AdaptiveScale(2.38 / np.sqrt(free.sum()), target=0.234)
    rec = Recorder(config)
    for it in range(config.iterations):
        adapt = it < config.burn_in
        L, ystar = cache
        Dw = sla.solve_triangular(L, D, lower=True)
        zw = sla.solve_triangular(L, ystar, lower=True)
        Pb = Dw.T @ Dw + np.diag(coef_prec)
        Lb = np.linalg.cholesky(Pb)
        b = sla.cho_solve((Lb, True), Dw.T @ zw) + sla.solve_triangular(
            Lb, rng.standard_normal(len(coef_prec)), lower=True, trans="T")
        cur, cache = loglik(th, b)
        step = np.linalg.cholesky(prop_cov + 1e-10 * np.eye(6)) @ rng.standard_normal(6)
        cand = th + scale.scale * np.where(free, step, 0.0)
        new, new_cache = loglik(cand, b)
        ok = np.isfinite(new) and np.log(rng.uniform()) < new + logprior(cand) - cur - logprior(th)
        if ok:
            th, cur, cache = cand, new, new_cache
        scale.record(bool(ok), adapt)
        if adapt:
            hist.append(th.copy())
            if len(hist) >= 100 and len(hist) % 50 == 0:
                emp = np.cov(np.array(hist[len(hist) // 2:]).T)
                prop_cov = np.where(np.outer(free, free), emp, 0.0) / free.sum() + np.diag(np.where(free, 1e-6, 0))
        if rec.keep(it):
            ru, ra, r, su2, sa2, t2 = unpack(th)
            for name, val in zip(names, b):
                rec.put(name, val)
            for name, val in zip(("rho_U", "rho_A", "rho", "sigma2_U", "sigma2_A", "tau2"),
                                 (ru, ra, r, su2, sa2, t2)):
                rec.put(name, val)
            rec.advance()
    post = rec.summary({"covariance": scale.rate})
    return CausalEstimate.from_draws("Schnell", post["beta"], diagnostics=_diag(post, data), posterior=post)


# ---------------------------------------------------------------- matching

def _helmert(region, values):
    """Orthonormal within-region contrasts (scaled successive differences).

    For a pair this is ``(v_2 - v_1) / sqrt(2)``; region effects cancel and
    iid errors stay iid with the same variance.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    rows = []
    for r in np.unique(region):
        idx = np.flatnonzero(region == r)
        for k in range(1, len(idx)):
            prev = values[idx[:k]]
            rows.append((values[idx[k]] - prev.mean(axis=0)) * np.sqrt(k / (k + 1.0)))
    return np.array(rows).reshape(-1, values.shape[1])


def match_difference(data: ArealDataset, config: RunConfig | None = None) -> CausalEstimate:
    """Regression of within-region response contrasts on treatment/covariate contrasts."""
    config = _config(config)
    if data.counts.max() < 2:
        raise ValueError("matching needs at least two observations in some region")
    dy = _helmert(data.region, data.y)[:, 0]
    dD = _helmert(data.region, np.column_stack([data.a, data.covariates]))
    if np.all(dD[:, 0] == 0):
        raise ValueError("no within-region treatment contrast; beta is unidentified")
    keep = [0] + [k for k in range(1, dD.shape[1]) if np.any(dD[:, k] != 0)]
    dD = dD[:, keep]
    names = ["beta"] + [f"x{k}" for k in keep[1:]]
    check_full_rank(dD, "within-region contrast design")
    rng = chain_rngs(config.seed, 3)[OUTCOME]
    post = sample_linear(dy, dD, names, config=config, rng=rng)
    return CausalEstimate.from_draws("MatchDiff", post["beta"],
                                     diagnostics=_diag(post, data, contrasts=len(dy)), posterior=post)


def _separated(Dd) -> bool:
    """True if some direction makes every pair's linear predictor >= 0, one strictly.

    Then the conditional likelihood increases without bound and no MLE exists.
    """
    n, p = Dd.shape
    res = linprog(c=np.zeros(p), A_ub=-Dd, b_ub=np.zeros(n),
                  A_eq=Dd.sum(axis=0, keepdims=True), b_eq=[1.0], bounds=[(None, None)] * p,
                  method="highs")
    return res.status == 0


def fit_cond_logit(data: ArealDataset, pairs, tol: float = 1e-8, max_iter: int = 100) -> CausalEstimate:
    """Conditional logistic MLE for 1:1 same-region case-control pairs.

    ``pairs`` holds ``(case_row, control_row)``; ``data.y`` is the 0/1 case
    indicator. Each pair contributes ``expit(d @ theta)`` with ``d`` the
    case-minus-control difference of ``[A, X]``.
    """
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("no matched pairs supplied")
    case, ctrl = pairs[:, 0], pairs[:, 1]
    if not (np.all(data.y[case] == 1) and np.all(data.y[ctrl] == 0)):
        raise ValueError("each pair must be (case with y=1, control with y=0)")
    cross = np.flatnonzero(data.region[case] != data.region[ctrl])
    if cross.size:
        raise ValueError(f"pair {int(cross[0])} matches units in different regions")
    D = np.column_stack([data.a, data.covariates])
    Dd = D[case] - D[ctrl]
    if np.all(Dd[:, 0] == 0):
        raise ValueError("no treatment contrast within pairs; beta is unidentified")
    keep = [0] + [k for k in range(1, Dd.shape[1]) if np.any(Dd[:, k] != 0)]
    Dd = Dd[:, keep]
    check_full_rank(Dd, "pair-difference design")
    if _separated(Dd):
        raise ValueError("complete or quasi-complete separation: conditional MLE does not exist")

    def loglik(th):
        return float(np.sum(log_expit(Dd @ th)))

    th = np.zeros(Dd.shape[1])
    ll = loglik(th)
    for it in range(max_iter):
        p = expit(-(Dd @ th))
        grad = Dd.T @ p
        if np.max(np.abs(grad)) < tol:
            break
        H = (Dd * (p * (1 - p))[:, None]).T @ Dd
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            cand = th + t * step
            new = loglik(cand)
            if new >= ll or t < 1e-10:
                break
            t /= 2
        th, ll = cand, new
    else:
        raise RuntimeError("conditional logit Newton iterations did not converge")
    p = expit(Dd @ th)
    H = (Dd * (p * (1 - p))[:, None]).T @ Dd
    se = np.sqrt(np.diag(np.linalg.inv(H)))
    z = norm.ppf(0.975)
    names = ["beta"] + [f"x{k}" for k in keep[1:]]
    diag = {"n": len(pairs), "iterations": it, "loglik": ll,
            "coef": dict(zip(names, th.tolist())), "se": dict(zip(names, se.tolist()))}
    return CausalEstimate("CondLogit", float(th[0]), float(th[0] - z * se[0]), float(th[0] + z * se[0]),
                          diagnostics=diag)


# ---------------------------------------------------------------------- IV

def fit_iv(data: ArealDataset, lattice: Lattice, instrument=None, config: RunConfig | None = None,
           propagate: bool = True) -> CausalEstimate:
    """Two-stage spatial instrumental-variable fit.

    Stage 1 regresses ``A`` on ``[X, Z]`` with a CAR field; stage 2 fits the
    outcome on ``Z * alpha1_hat`` with its own CAR field. With
    ``propagate=True`` the stage-1 uncertainty in ``alpha1`` is carried into
    ``beta`` by pairing each stage-2 draw with a stage-1 draw.
    """
    config = _config(config)
    z = data.z if instrument is None else np.asarray(instrument, dtype=float)
    if z is None:
        raise ValueError("IV fit needs an instrument column")
    z = np.asarray(z, dtype=float)
    if z.ndim > 1:
        z = z[:, 0]
    _check_contrast(data.a)
    rng_y, rng_a, _ = chain_rngs(config.seed, 3)
    names1 = _xnames(data) + ["alpha1"]
    D1 = np.column_stack([data.x, z])
    check_full_rank(D1)
    s1 = sample_linear(data.a, D1, names1, effect=CarEffect(lattice, data.region), config=config, rng=rng_a)
    a1 = s1["alpha1"]
    a1_hat = float(a1.mean())
    lo1, hi1 = s1.interval("alpha1")
    flags = ("weak_instrument",) if lo1 <= 0 <= hi1 else ()
    D2 = np.column_stack([data.x, z * a1_hat])
    check_full_rank(D2)
    s2 = sample_linear(data.y, D2, _xnames(data) + ["beta"], effect=CarEffect(lattice, data.region),
                       config=config, rng=rng_y)
    beta = s2["beta"] * a1_hat / a1 if propagate else s2["beta"]
    diag = _diag(s2, data, alpha1=a1_hat, alpha1_lo=float(lo1), alpha1_hi=float(hi1))
    return CausalEstimate.from_draws("IV", beta, flags, diag, s2)


# ------------------------------------------------------------- bias oracle

@dataclass(frozen=True)
class BiasOracleResult:
    mean: float
    se: float
    reps: int


def gls_bias_oracle(sigma_assumed, phi: float, beta: float, sigma1, sigma2, reps: int = 2000,
                    seed=None, tau2: float = 1.0) -> BiasOracleResult:
    """Monte Carlo mean of the GLS estimator under a confounded generative model.

    ``A ~ N(0, sigma2)``, ``U | A ~ N(phi A, sigma1)``,
    ``Y | A, U ~ N(beta A + U, tau2 I)``; the estimator is
    ``(A' S^-1 A)^-1 A' S^-1 Y`` with ``S = sigma_assumed``.
    """
    rng = np.random.default_rng(seed)
    S = np.asarray(sigma_assumed, dtype=float)
    n = S.shape[0]
    L1 = np.linalg.cholesky(np.asarray(sigma1, dtype=float))
    L2 = np.linalg.cholesky(np.asarray(sigma2, dtype=float))
    LS = sla.cho_factor(S)
    A = rng.standard_normal((reps, n)) @ L2.T
    U = phi * A + rng.standard_normal((reps, n)) @ L1.T
    Y = beta * A + U + np.sqrt(tau2) * rng.standard_normal((reps, n))
    SiA = sla.cho_solve(LS, A.T).T
    est = np.sum(SiA * Y, axis=1) / np.sum(SiA * A, axis=1)
    return BiasOracleResult(float(est.mean()), float(est.std(ddof=1) / np.sqrt(reps)), reps)


# -------------------------------------------------------------- dispatcher

@dataclass
class FitResult:
    estimate: CausalEstimate
    propensity: PropensityFit | None = None

    @property
    def posterior(self):
        return self.estimate.posterior


def fit_model(spec: ModelSpec | str, data: ArealDataset, lattice: Lattice | None = None,
              config: RunConfig | None = None, scores=None, pairs=None) -> FitResult:
    """Fit any estimator by tag, estimating propensity scores when needed."""
    spec = ModelSpec(spec) if isinstance(spec, str) else spec
    config = _config(config)
    tag = spec.estimator
    needs_lattice = tag not in ("NS", "NS+P", "MatchDiff", "CondLogit")
    if needs_lattice and lattice is None:
        raise ValueError(f"{tag} needs a lattice")
    prop = None
    if tag in ("NS+P", "S+P", "S+Strata", "S+AIPW") and scores is None:
        if lattice is None:
            raise ValueError(f"{tag} needs a lattice to estimate spatial propensity scores")
        prop = fit_binary_propensity(data, lattice, config)
        scores = prop.scores
    if tag == "NS":
        est = fit_ns(data, config)
    elif tag == "S":
        est = fit_s(data, lattice, config)
    elif tag == "NS+P":
        est = fit_with_propensity(data, None, scores, spatial=False, config=config)
    elif tag == "S+P":
        est = fit_with_propensity(data, lattice, scores, spatial=True, config=config)
    elif tag == "S+Strata":
        strata = StrataSpec.single(data.n) if spec.n_strata == 1 else build_strata(_scores(scores), spec.n_strata)
        est = fit_strata(data, lattice, strata, config)
    elif tag == "S+AIPW":
        est = aipw_adjust(fit_s(data, lattice, config), data, scores)
    elif tag in ("Joint", "SEM"):
        family = "iid" if tag == "SEM" else spec.prior_family
        est = fit_joint(data, lattice, config, prior_family=family, fix_psi=spec.fix_psi)
    elif tag == "Cut":
        est = fit_cut(data, lattice, config)
    elif tag == "SAR":
        est = fit_sar(data, lattice, config)
    elif tag == "Schnell":
        est = fit_schnell(data, lattice, config)
    elif tag == "IV":
        est = fit_iv(data, lattice, config=config)
    elif tag == "MatchDiff":
        est = match_difference(data, config)
    else:
        if pairs is None:
            raise ValueError("CondLogit needs matched pairs")
        est = fit_cond_logit(data, pairs)
    return FitResult(est, prop)


def write_estimates_csv(rows, path) -> None:
    """Write ``(dataset_id, CausalEstimate)`` rows."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_id", "estimator", "point", "lo95", "hi95", "flags"])
        for did, est in rows:
            w.writerow([did, est.estimator, repr(est.point), repr(est.lo), repr(est.hi), ";".join(est.flags)])
