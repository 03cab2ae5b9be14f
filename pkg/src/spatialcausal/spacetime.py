"""Spatiotemporal estimators: confounding diagnostic, DID and lagged regression."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .confound import CausalEstimate
from .data import PanelDataset, RunConfig
from .lattice import Lattice
from .mcmc import CarEffect, PosteriorSummary, chain_rngs, check_full_rank, sample_linear
from .propensity import SplineBasis, spline_transform

__all__ = ["JanesFit", "DidFit", "GrangerFit", "time_spline", "janes_test", "fit_did", "fit_granger"]


def _rng(config):
    return chain_rngs(config.seed, 3)[0]


def _wide(panel, values):
    W = panel.wide(values).T  # (T, N)
    if np.isnan(W).any():
        raise ValueError("panel must contain every region at every time step")
    return W


def time_spline(t, df: int) -> np.ndarray:
    """B-spline columns in ``t`` without the first function (absorbed by the intercept)."""
    t = np.asarray(t, dtype=float)
    degree = min(3, df - 1)
    basis = SplineBasis.from_scores(t, df=df, degree=degree)
    return spline_transform(t, basis)[:, 1:]


# --------------------------------------------------------------------- Janes

@dataclass
class JanesFit:
    eta1: CausalEstimate
    eta2: CausalEstimate
    difference: CausalEstimate
    posterior: PosteriorSummary = field(repr=False, default=None)


def janes_test(panel: PanelDataset, df: int | None = None, config: RunConfig | None = None) -> JanesFit:
    """Global (``eta1``) versus local (``eta2``) treatment effects with smooth time adjustment.

    The posterior of ``eta1 - eta2`` is reported; no decision threshold is applied.
    """
    config = config or RunConfig()
    T = panel.n_times
    if T < 3:
        raise ValueError("the global/local comparison needs at least three time steps")
    df = min(6, T - 1) if df is None else df
    abar_t = np.array([panel.a[panel.t == s].mean() for s in range(1, T + 1)])
    g = abar_t[panel.t - 1]
    local = panel.a - g
    if np.all(np.abs(local) < 1e-12):
        raise ValueError("treatment is constant within every time step; eta2 is unidentified")
    if np.ptp(abar_t) == 0:
        raise ValueError("mean treatment is constant over time; eta1 is collinear with the intercept")
    S = time_spline(panel.t, df)
    D = np.column_stack([panel.x, g, local, S])
    names = (["intercept"] + [f"x{k}" for k in range(1, panel.x.shape[1])] + ["eta1", "eta2"]
             + [f"time{k}" for k in range(1, S.shape[1] + 1)])
    try:
        check_full_rank(D)
    except ValueError:
        raise ValueError("mean treatment over time is collinear with the time splines; eta1 is unidentified") from None
    post = sample_linear(panel.y, D, names, config=config, rng=_rng(config))
    diag = {"n": len(panel.y), "draws": post.n_draws, "df": df}
    return JanesFit(CausalEstimate.from_draws("eta1", post["eta1"], diagnostics=diag),
                    CausalEstimate.from_draws("eta2", post["eta2"], diagnostics=diag),
                    CausalEstimate.from_draws("eta1-eta2", post["eta1"] - post["eta2"], diagnostics=diag),
                    post)


# ----------------------------------------------------------------------- DID

@dataclass
class DidFit:
    """Coefficient summaries keyed ``beta1..beta5``; ``beta3`` is the DID effect."""

    coefficients: dict[str, CausalEstimate]
    method: str
    posterior: PosteriorSummary = field(repr=False, default=None)

    @property
    def did(self) -> CausalEstimate:
        return self.coefficients["beta3"]


def fit_did(panel: PanelDataset, spillover: bool = False, lattice: Lattice | None = None,
            config: RunConfig | None = None, method: str | None = None) -> DidFit:
    """Two-period difference-in-differences, optionally with neighbour spillover terms.

    ``method='difference'`` regresses ``Y_i2 - Y_i1`` on the differenced
    design, which removes any additive region effect exactly; coefficients
    whose differenced column vanishes (e.g. ``beta1`` when treatment is
    constant over time) are not identified and are omitted. ``method='level'``
    fits the level model with a time-invariant CAR region effect. The default
    is ``difference`` without spillover and ``level`` with it.
    """
    config = config or RunConfig()
    if panel.n_times != 2:
        raise ValueError("DID needs exactly two time steps")
    if method is None:
        method = "level" if spillover else "difference"
    if method not in ("difference", "level"):
        raise ValueError("method must be 'difference' or 'level'")
    if spillover and lattice is None:
        raise ValueError("spillover terms need a lattice")
    if method == "level" and lattice is None:
        raise ValueError("level-form DID needs a lattice for the region effect")
    if np.all(panel.a == 0) or np.all(panel.a == 1):
        raise ValueError("DID needs both treated and control units")
    A = _wide(panel, panel.a)  # (2, N)
    Y = _wide(panel, panel.y)
    P = panel.x.shape[1] - 1
    Xs = [_wide(panel, panel.x[:, k + 1]) for k in range(P)]
    if spillover:
        C = lattice.C
        Abar = np.vstack([C @ A[0], C @ A[1]])
    N = panel.n_regions
    if method == "difference":
        cols = {"beta2": np.ones(N), "beta1": A[1] - A[0], "beta3": 2 * A[1] - A[0]}
        if spillover:
            cols["beta4"] = Abar[1] - Abar[0]
            cols["beta5"] = 2 * Abar[1] - Abar[0]
        for k, Xk in enumerate(Xs):
            cols[f"x{k + 1}"] = Xk[1] - Xk[0]
        cols = {k: v for k, v in cols.items() if np.any(v != 0)}
        if "beta3" not in cols:
            raise ValueError("no treated units; the DID effect is unidentified")
        names = list(cols)
        D = np.column_stack(list(cols.values()))
        check_full_rank(D)
        post = sample_linear(Y[1] - Y[0], D, names, config=config, rng=_rng(config))
    else:
        t = np.repeat([1.0, 2.0], N)
        a = A.ravel()
        cols = {"intercept": np.ones(2 * N), "beta1": a, "beta2": t, "beta3": t * a}
        if spillover:
            ab = Abar.ravel()
            cols["beta4"] = ab
            cols["beta5"] = t * ab
        for k, Xk in enumerate(Xs):
            cols[f"x{k + 1}"] = Xk.ravel()
        names = list(cols)
        D = np.column_stack(list(cols.values()))
        check_full_rank(D)
        region = np.tile(np.arange(N), 2)
        post = sample_linear(Y.ravel(), D, names, effect=CarEffect(lattice, region), config=config,
                             rng=_rng(config))
    coefs = {k: CausalEstimate.from_draws(k, post[k]) for k in names if k.startswith("beta")}
    return DidFit(coefs, method, post)


# ------------------------------------------------------------------- Granger

@dataclass
class GrangerFit:
    lags: int
    beta: list[CausalEstimate]
    granger_causal: bool
    posterior: PosteriorSummary = field(repr=False, default=None)


def fit_granger(panel: PanelDataset, L: int = 1, spillover: bool = False, lattice: Lattice | None = None,
                config: RunConfig | None = None) -> GrangerFit:
    """Lag-``L`` regression with CAR fields independent over time.

    ``Y_t = sum_l (A_{t-l} beta_l + X_{t-l} gamma_l + Y_{t-l} rho_l) + U_t + e``.
    The Granger indicator fires when any ``beta_l`` interval excludes zero.
    """
    config = config or RunConfig()
    if L < 1:
        raise ValueError("lag count must be at least 1")
    T = panel.n_times
    if T <= L + 1:
        raise ValueError(f"need more than {L + 1} time steps for {L} lags")
    if lattice is None:
        raise ValueError("Granger fit needs a lattice for the spatial field")
    N = panel.n_regions
    A = _wide(panel, panel.a)
    Y = _wide(panel, panel.y)
    P = panel.x.shape[1] - 1
    Xs = [_wide(panel, panel.x[:, k + 1]) for k in range(P)]
    times = np.arange(L, T)  # zero-based rows used as responses
    n_use = len(times)
    cols = {"intercept": np.ones(n_use * N)}
    for l in range(1, L + 1):
        cols[f"beta{l}"] = A[times - l].ravel()
        for k, Xk in enumerate(Xs):
            cols[f"gamma{l}_{k + 1}"] = Xk[times - l].ravel()
        cols[f"rho{l}"] = Y[times - l].ravel()
        if spillover:
            cols[f"spill{l}"] = (lattice.C @ A[times - l].T).T.ravel()
    names = list(cols)
    D = np.column_stack(list(cols.values()))
    index = (np.arange(n_use)[:, None] * N + np.arange(N)[None, :]).ravel()
    effect = CarEffect(lattice, index, n_slices=n_use)
    post = sample_linear(Y[times].ravel(), D, names, effect=effect, config=config, rng=_rng(config),
                         check_rank=False)
    betas = [CausalEstimate.from_draws(f"beta{l}", post[f"beta{l}"]) for l in range(1, L + 1)]
    causal = any(not b.covers(0.0) for b in betas)
    return GrangerFit(L, betas, causal, post)
