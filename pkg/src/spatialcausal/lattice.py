"""Areal adjacency structures and Gaussian Markov random field algebra.

Regions are indexed row-major and zero-based. For a lattice with adjacency
matrix ``W`` and neighbour counts ``M = diag(m)``, a CAR(rho, sigma) field has
precision ``(M - rho W) / sigma**2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

__all__ = [
    "Lattice",
    "CarParams",
    "SarParams",
    "build_rook_grid",
    "car_precision",
    "implied_correlation",
    "sample_gmrf",
    "sar_error_covariance",
    "neighbor_mean",
    "read_adjacency",
    "write_adjacency",
]


@dataclass(frozen=True)
class Lattice:
    """Symmetric region adjacency without self-neighbours or isolated regions.

    Parameters
    ----------
    neighbors : sequence of sequences of int
        ``neighbors[i]`` lists the regions adjacent to region ``i``.
    shape : (nrows, ncols), optional
        Grid dimensions when the lattice came from :func:`build_rook_grid`.
    """

    neighbors: tuple[tuple[int, ...], ...]
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        nb = tuple(tuple(sorted(int(k) for k in row)) for row in self.neighbors)
        object.__setattr__(self, "neighbors", nb)
        n = len(nb)
        if n < 2:
            raise ValueError("a lattice needs at least two regions")
        for i, row in enumerate(nb):
            if not row:
                raise ValueError(f"region {i} has no neighbours")
            if len(set(row)) != len(row):
                raise ValueError(f"region {i} lists a neighbour twice")
            for k in row:
                if k == i:
                    raise ValueError(f"region {i} is listed as its own neighbour")
                if not 0 <= k < n:
                    raise ValueError(f"region {i} has out-of-range neighbour {k}")
                if i not in nb[k]:
                    raise ValueError(f"adjacency not symmetric: {i}->{k} but not {k}->{i}")

    @property
    def n_regions(self) -> int:
        return len(self.neighbors)

    @cached_property
    def m(self) -> np.ndarray:
        """Neighbour counts."""
        return np.array([len(row) for row in self.neighbors], dtype=float)

    @cached_property
    def W(self) -> sp.csr_matrix:
        rows = np.repeat(np.arange(self.n_regions), self.m.astype(int))
        cols = np.concatenate([np.asarray(r, dtype=int) for r in self.neighbors])
        data = np.ones(len(cols))
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_regions,) * 2)

    @cached_property
    def C(self) -> sp.csr_matrix:
        """Row-normalised adjacency; ``C @ y`` gives neighbourhood means."""
        return sp.diags(1.0 / self.m) @ self.W

    @cached_property
    def scaled_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``M^{-1/2} W M^{-1/2}``, all in [-1, 1].

        ``log det(M - rho W) = sum(log m) + sum(log(1 - rho * lam))``.
        """
        d = 1.0 / np.sqrt(self.m)
        S = (d[:, None] * self.W.toarray()) * d[None, :]
        return np.linalg.eigvalsh(S)

    def car_logdet(self, rho: float) -> float:
        """``log det(M - rho W)``."""
        return float(np.sum(np.log(self.m)) + np.sum(np.log1p(-rho * self.scaled_eigenvalues)))

    @cached_property
    def band_order(self) -> np.ndarray:
        """Reverse Cuthill-McKee ordering that keeps ``W`` narrowly banded."""
        return np.asarray(reverse_cuthill_mckee(self.W, symmetric_mode=True), dtype=int)

    @cached_property
    def grid_position(self) -> np.ndarray:
        """(row, col) of each region for grid lattices."""
        if self.shape is None:
            raise ValueError("lattice was not built as a grid")
        idx = np.arange(self.n_regions)
        return np.column_stack([idx // self.shape[1], idx % self.shape[1]])

    def to_text(self) -> str:
        return "".join(f"{i}: {' '.join(map(str, row))}\n" for i, row in enumerate(self.neighbors))

    @classmethod
    def from_text(cls, text: str) -> "Lattice":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            head, sep, tail = line.partition(":")
            if not sep:
                raise ValueError(f"line {lineno}: expected 'region_id: k1 k2 ...'")
            try:
                rid = int(head)
                entries[rid] = [int(tok) for tok in tail.split()]
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        n = len(entries)
        if sorted(entries) != list(range(n)):
            raise ValueError("region ids must be 0..N-1 with one line each")
        return cls(tuple(tuple(entries[i]) for i in range(n)))


@dataclass(frozen=True)
class CarParams:
    rho: float
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"CAR rho must lie in the open interval (0, 1), got {self.rho}")
        if not self.sigma > 0:
            raise ValueError(f"CAR sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class SarParams:
    psi: float
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.psi < 1.0:
            raise ValueError(f"SAR psi must lie in [0, 1), got {self.psi}")
        if not self.sigma > 0:
            raise ValueError(f"SAR sigma must be positive, got {self.sigma}")


def build_rook_grid(nrows: int, ncols: int) -> Lattice:
    """Rook-adjacency grid with row-major region indexing."""
    if nrows < 1 or ncols < 1 or nrows * ncols < 2:
        raise ValueError(f"grid {nrows}x{ncols} has fewer than two regions")
    nb = []
    for r in range(nrows):
        for c in range(ncols):
            row = []
            if r > 0:
                row.append((r - 1) * ncols + c)
            if c > 0:
                row.append(r * ncols + c - 1)
            if c < ncols - 1:
                row.append(r * ncols + c + 1)
            if r < nrows - 1:
                row.append((r + 1) * ncols + c)
            nb.append(tuple(row))
    return Lattice(tuple(nb), shape=(nrows, ncols))


def car_precision(lattice: Lattice, params: CarParams) -> sp.csr_matrix:
    """Sparse precision ``(M - rho W) / sigma**2`` of a CAR field."""
    Q = sp.diags(lattice.m) - params.rho * lattice.W
    return sp.csr_matrix(Q / params.sigma**2)


def car_covariance(lattice: Lattice, params: CarParams) -> np.ndarray:
    """Dense ``sigma**2 (M - rho W)^{-1}``."""
    K = np.diag(lattice.m) - params.rho * lattice.W.toarray()
    return params.sigma**2 * np.linalg.inv(K)


def implied_correlation(lattice: Lattice, params: CarParams, i: int, k: int) -> float:
    """Correlation of ``U_i`` and ``U_k`` under CAR(rho, sigma)."""
    if i == k:
        raise ValueError("implied correlation needs two distinct regions")
    n = lattice.n_regions
    if not (0 <= i < n and 0 <= k < n):
        raise IndexError("region index out of range")
    # sigma cancels, so work with the unit-scale covariance
    S = car_covariance(lattice, CarParams(params.rho, 1.0))
    return float(S[i, k] / np.sqrt(S[i, i] * S[k, k]))


def sample_gmrf(precision, seed=None) -> np.ndarray:
    """One mean-zero Gaussian draw with the given precision matrix.

    Dense Cholesky; a non positive-definite precision raises ``ValueError``.
    """
    rng = np.random.default_rng(seed)
    Q = precision.toarray() if sp.issparse(precision) else np.asarray(precision, dtype=float)
    if not np.allclose(Q, Q.T, rtol=1e-10, atol=1e-12 * np.abs(Q).max()):
        raise ValueError("precision matrix is not symmetric")
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise ValueError("precision matrix is not positive definite") from None
    z = rng.standard_normal(Q.shape[0])
    return sla.solve_triangular(L, z, lower=True, trans="T")


def sar_error_covariance(lattice: Lattice, params: SarParams, transpose: bool = False) -> np.ndarray:
    """SAR error covariance ``sigma**2 (I - psi C)^{-1} (I - psi C)^{-1}``.

    With ``transpose=True`` the second factor is ``(I - psi C^T)^{-1}``, which
    is the covariance implied by the row form ``(I - psi C) e ~ N(0, sigma**2 I)``.
    """
    n = lattice.n_regions
    B = np.eye(n) - params.psi * lattice.C.toarray()
    if np.linalg.cond(B) > 1e12:
        raise ValueError("I - psi C is singular")
    Binv = np.linalg.inv(B)
    second = Binv.T if transpose else Binv
    return params.sigma**2 * Binv @ second


def neighbor_mean(lattice: Lattice, values) -> np.ndarray:
    """Mean of ``values`` over each region's neighbours."""
    return lattice.C @ np.asarray(values, dtype=float)


def read_adjacency(path) -> Lattice:
    return Lattice.from_text(Path(path).read_text(encoding="utf-8"))


def write_adjacency(lattice: Lattice, path) -> None:
    Path(path).write_text(lattice.to_text(), encoding="utf-8")
