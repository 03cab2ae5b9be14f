"""Causal estimands under interference and exposure-mapping regressions.

Unit outcomes depend on their own treatment and on a spillover summary
``s = E @ a`` where the exposure matrix ``E`` has a zero diagonal (group
proportion excluding self, or neighbour mean). Because ``s_i`` never depends
on ``a_i``, policy averages can flip a unit's own treatment without
recomputing its exposure.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .confound import CausalEstimate
from .data import ArealDataset, RunConfig
from .lattice import Lattice
from .mcmc import CarEffect, PosteriorSummary, chain_rngs, check_full_rank, sample_linear

__all__ = [
    "Policy",
    "OutcomeModel",
    "group_exposure",
    "neighbor_exposure",
    "estimand_de",
    "estimand_ie",
    "estimand_te",
    "estimand_oe",
    "PolicyEffect",
    "policy_average",
    "InterferenceFit",
    "fit_partial_interference",
    "fit_network_interference",
    "write_effects_csv",
]

MAX_ENUMERATE = 20


# ---------------------------------------------------------------- exposure

def group_exposure(group) -> np.ndarray:
    """Leave-self-out group mean operator."""
    g = np.asarray(group)
    same = (g[:, None] == g[None, :]).astype(float)
    np.fill_diagonal(same, 0.0)
    k = same.sum(axis=1)
    if np.any(k == 0):
        raise ValueError(f"group {g[np.argmin(k)]} has a single unit; leave-self-out proportion undefined")
    return same / k[:, None]


def neighbor_exposure(lattice: Lattice, region) -> np.ndarray:
    """Mean treatment over neighbouring regions, averaging within each region first."""
    region = np.asarray(region, dtype=int)
    n = len(region)
    counts = np.bincount(region, minlength=lattice.n_regions).astype(float)
    R = np.zeros((lattice.n_regions, n))
    R[region, np.arange(n)] = 1.0
    nonempty = counts > 0
    R[nonempty] /= counts[nonempty, None]
    Cd = lattice.C.toarray()
    for i, row in enumerate(lattice.neighbors):
        if not any(nonempty[list(row)]):
            raise ValueError(f"region {i} has no observed neighbours")
    # average only over neighbours that carry observations
    Cd = Cd * nonempty[None, :]
    Cd /= Cd.sum(axis=1, keepdims=True)
    return (Cd @ R)[region]


# ------------------------------------------------------------ outcome model

@dataclass
class OutcomeModel:
    """Expected potential outcome of unit ``i`` under a full treatment field.

    ``mean = offset_i + beta1 a_i + beta2 s_i + beta_ss s_i^2 + beta_as a_i s_i``
    with ``s = exposure @ a``. Setting ``unit_fn`` overrides the formula with
    any callable ``(own, spill, unit) -> mean``.
    """

    beta1: float
    beta2: float
    exposure: np.ndarray
    offset: np.ndarray | None = None
    beta_ss: float = 0.0
    beta_as: float = 0.0
    unit_fn: Callable | None = None

    def __post_init__(self):
        self.exposure = np.asarray(self.exposure, dtype=float)
        if np.any(np.diag(self.exposure) != 0):
            raise ValueError("exposure matrix must have a zero diagonal")
        if self.offset is None:
            self.offset = np.zeros(self.n)

    @property
    def n(self) -> int:
        return self.exposure.shape[0]

    @property
    def constant_direct(self) -> bool:
        """True when ``Y(1, .) - Y(0, .)`` equals ``beta1`` for every field."""
        return self.unit_fn is None and self.beta_as == 0.0

    def spill(self, fields) -> np.ndarray:
        return np.asarray(fields, dtype=float) @ self.exposure.T

    def unit_mean(self, own, spill, unit):
        if self.unit_fn is not None:
            return self.unit_fn(own, spill, unit)
        return (self.offset[unit] + self.beta1 * own + self.beta2 * spill
                + self.beta_ss * spill**2 + self.beta_as * own * spill)

    def mean(self, field) -> np.ndarray:
        """Expected outcomes of all units under one field (or a stack of fields)."""
        a = np.asarray(field, dtype=float)
        units = np.arange(self.n)
        return self.unit_mean(a, self.spill(a), units)


def _set_own(field, unit, value):
    a = np.array(field, dtype=float)
    a[unit] = value
    return a


def estimand_de(model: OutcomeModel, unit: int, a_minus) -> float:
    """``E{Y(1, a_-i)} - E{Y(0, a_-i)}``; the entry of ``a_minus`` at ``unit`` is ignored."""
    return float(model.mean(_set_own(a_minus, unit, 1))[unit] - model.mean(_set_own(a_minus, unit, 0))[unit])


def estimand_ie(model: OutcomeModel, unit: int, a_minus, a_minus_prime) -> float:
    """``E{Y(0, a_-i)} - E{Y(0, a'_-i)}``."""
    return float(model.mean(_set_own(a_minus, unit, 0))[unit]
                 - model.mean(_set_own(a_minus_prime, unit, 0))[unit])


def estimand_te(model: OutcomeModel, unit: int, a_minus, a_minus_prime) -> float:
    """Total effect, defined as DE + IE (equal to ``E{Y(1, a_-i)} - E{Y(0, a'_-i)}``)."""
    return estimand_de(model, unit, a_minus) + estimand_ie(model, unit, a_minus, a_minus_prime)


def estimand_oe(model: OutcomeModel, unit: int, a, a_prime) -> float:
    """``E{Y(a_i, a_-i)} - E{Y(a'_i, a'_-i)}`` for two complete fields."""
    return float(model.mean(a)[unit] - model.mean(a_prime)[unit])


# ----------------------------------------------------------------- policies

@dataclass(frozen=True)
class Policy:
    """Independent-unit treatment policy.

    ``bernoulli``: ``P(a_i = 1) = p``. ``transition``: ``P(a_i = 1) = p1`` if
    the current treatment is 1 and ``p0`` otherwise.
    """

    kind: str
    p: float = 0.5
    p0: float = 0.0
    p1: float = 1.0
    current: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("bernoulli", "transition"):
            raise ValueError(f"unknown policy kind '{self.kind}'")
        for v in (self.p, self.p0, self.p1):
            if not 0.0 <= v <= 1.0:
                raise ValueError("policy probabilities must lie in [0, 1]")
        if self.kind == "transition" and self.current is None:
            raise ValueError("transition policy needs the current treatment field")

    @classmethod
    def bernoulli(cls, p: float) -> "Policy":
        return cls("bernoulli", p=p)

    @classmethod
    def transition(cls, p0: float, p1: float, current) -> "Policy":
        return cls("transition", p0=p0, p1=p1, current=tuple(float(v) for v in current))

    @property
    def label(self) -> str:
        if self.kind == "bernoulli":
            return f"bernoulli(p={self.p:g})"
        return f"transition(p0={self.p0:g},p1={self.p1:g})"

    def probs(self, n: int) -> np.ndarray:
        if self.kind == "bernoulli":
            return np.full(n, self.p)
        cur = np.asarray(self.current)
        if len(cur) != n:
            raise ValueError("current treatment field has the wrong length")
        return np.where(cur == 1, self.p1, self.p0)

    def sample(self, rng, size: int, n: int) -> np.ndarray:
        return (rng.uniform(size=(size, n)) < self.probs(n)).astype(float)


@dataclass(frozen=True)
class PolicyEffect:
    effect: str
    policy: str
    value: float
    mc_se: float
    method: str


def _contrast(model, effect, fa, fb):
    """Per-field unit-averaged contrast for a stack of fields ``fa`` (and reference ``fb``)."""
    units = np.arange(model.n)
    sa = model.spill(fa)
    if effect == "DE":
        d = model.unit_mean(1.0, sa, units) - model.unit_mean(0.0, sa, units)
    else:
        sb = model.spill(fb)
        if effect == "IE":
            d = model.unit_mean(0.0, sa, units) - model.unit_mean(0.0, sb, units)
        elif effect == "TE":
            d = model.unit_mean(1.0, sa, units) - model.unit_mean(0.0, sb, units)
        else:
            d = model.unit_mean(fa, sa, units) - model.unit_mean(fb, sb, units)
    return d.mean(axis=1)


def policy_average(model: OutcomeModel, policy: Policy, effect: str = "DE", method: str = "enumerate",
                   reference: Policy | None = None, draws: int = 100_000, seed=None,
                   block: int = 10_000) -> PolicyEffect:
    """Policy-averaged DE, IE, TE or OE.

    DE averages ``Y(1, a_-i) - Y(0, a_-i)`` over ``a ~ policy``. IE, TE and OE
    compare ``policy`` with ``reference``: IE uses ``Y(0, .)`` under each, TE
    ``Y(1, a_-i)`` against ``Y(0, a'_-i)``, and OE the full fields including
    each unit's own policy-drawn treatment. When the direct contrast does
    not depend on the field, DE is returned as ``beta1`` in closed form.
    """
    effect = effect.upper()
    if effect not in ("DE", "IE", "TE", "OE"):
        raise ValueError(f"unknown effect '{effect}'")
    if effect != "DE" and reference is None:
        raise ValueError(f"{effect} needs a reference policy")
    n = model.n
    label = policy.label if reference is None else f"{policy.label} vs {reference.label}"
    if effect == "DE" and model.constant_direct:
        return PolicyEffect(effect, label, float(model.beta1), 0.0, "closed-form")
    if method == "enumerate":
        if n > MAX_ENUMERATE:
            raise ValueError(f"enumeration over 2^{n} fields refused (limit {MAX_ENUMERATE} units)")
        F = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
        p = policy.probs(n)
        w = np.prod(np.where(F == 1, p, 1 - p), axis=1)
        if effect == "DE":
            value = float(w @ _contrast(model, "DE", F, None))
        else:
            q = reference.probs(n)
            wr = np.prod(np.where(F == 1, q, 1 - q), axis=1)
            if effect == "TE":
                value = float(w @ _contrast(model, "DE", F, None)) + _ie_enum(model, F, w, wr)
            elif effect == "IE":
                value = _ie_enum(model, F, w, wr)
            else:
                units = np.arange(n)
                ya = model.unit_mean(F, model.spill(F), units).mean(axis=1)
                value = float(w @ ya - wr @ ya)
        return PolicyEffect(effect, label, value, 0.0, "enumerate")
    if method != "monte-carlo":
        raise ValueError("method must be 'enumerate' or 'monte-carlo'")
    rng = np.random.default_rng(seed)
    vals = []
    done = 0
    while done < draws:
        m = min(block, draws - done)
        fa = policy.sample(rng, m, n)
        fb = reference.sample(rng, m, n) if reference is not None else None
        vals.append(_contrast(model, effect, fa, fb))
        done += m
    v = np.concatenate(vals)
    return PolicyEffect(effect, label, float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v))), "monte-carlo")


def _ie_enum(model, F, w, wr):
    units = np.arange(model.n)
    y0 = model.unit_mean(0.0, model.spill(F), units).mean(axis=1)
    return float(w @ y0 - wr @ y0)


# --------------------------------------------------------------- regressions

@dataclass
class InterferenceFit:
    model: OutcomeModel
    direct: CausalEstimate
    indirect: CausalEstimate
    posterior: PosteriorSummary = field(repr=False, default=None)


def _fit_exposure(tag, data, E, lattice, config):
    config = config or RunConfig()
    a = np.asarray(data.a, dtype=float)
    s = E @ a
    D = np.column_stack([data.x, a, s])
    try:
        check_full_rank(D)
    except ValueError:
        raise ValueError("treatment and spillover columns are collinear with the covariates; "
                         "beta2 is unidentified") from None
    names = ["intercept"] + [f"x{k}" for k in range(1, data.x.shape[1])] + ["beta1", "beta2"]
    effect = CarEffect(lattice, data.region) if lattice is not None else None
    rng = chain_rngs(config.seed, 3)[0]
    post = sample_linear(data.y, D, names, effect=effect, config=config, rng=rng)
    gamma = np.array([post.mean(nm) for nm in names[:-2]])
    model = OutcomeModel(float(post.mean("beta1")), float(post.mean("beta2")), E, offset=data.x @ gamma)
    diag = {"n": data.n, "draws": post.n_draws}
    return InterferenceFit(model,
                           CausalEstimate.from_draws(f"{tag}:direct", post["beta1"], diagnostics=diag),
                           CausalEstimate.from_draws(f"{tag}:indirect", post["beta2"], diagnostics=diag),
                           post)


def fit_partial_interference(data: ArealDataset, group=None, config: RunConfig | None = None) -> InterferenceFit:
    """``Y = A beta1 + A_tilde beta2 + X gamma + e`` with leave-self-out group proportions."""
    g = data.group if group is None else np.asarray(group)
    if g is None:
        raise ValueError("partial interference needs group labels")
    return _fit_exposure("partial", data, group_exposure(g), None, config)


def fit_network_interference(data: ArealDataset, lattice: Lattice, config: RunConfig | None = None,
                             spatial: bool = False) -> InterferenceFit:
    """Exposure is the neighbour-mean treatment; ``spatial=True`` adds a CAR field."""
    return _fit_exposure("network", data, neighbor_exposure(lattice, data.region),
                         lattice if spatial else None, config)


def write_effects_csv(effects, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["effect", "policy", "value", "mc_se", "method"])
        for e in effects:
            w.writerow([e.effect, e.policy, repr(e.value), repr(e.mc_se), e.method])
