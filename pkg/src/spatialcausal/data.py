"""Dataset containers, CSV ingestion and run-configuration parsing.

CSV files are UTF-8, comma separated, with a mandatory header. Areal files
need ``region,y,a``; optional columns are ``rep``, ``x1..xp``, ``s1,s2``,
``t``, ``z`` (instrument) and ``group`` (interference cluster). Floats are
written with ``repr`` so that read-after-write is exact.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "ArealDataset",
    "PanelDataset",
    "PointDataset",
    "RunConfig",
    "read_areal_csv",
    "write_areal_csv",
    "read_panel_csv",
    "write_panel_csv",
    "read_point_csv",
    "write_point_csv",
    "parse_config",
    "DEFAULT_ESTIMATORS",
]

DEFAULT_ESTIMATORS = ("NS", "NS+P", "S", "S+P", "S+AIPW", "Joint", "Cut")

_X_COL = re.compile(r"^x(\d+)$")
_INT_COLS = {"region", "rep", "t", "group"}


class DataError(ValueError):
    """Malformed input; ``row`` is the 1-based data row (header is row 0)."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


def _with_intercept(x: np.ndarray | None, n: int) -> np.ndarray:
    ones = np.ones((n, 1))
    if x is None or x.size == 0:
        return ones
    return np.hstack([ones, x])


@dataclass(frozen=True)
class ArealDataset:
    """Observations ``(i, j)`` in regions of a lattice.

    ``x`` always carries a leading intercept column of ones.
    """

    region: np.ndarray
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    n_regions: int
    rep: np.ndarray | None = None
    z: np.ndarray | None = None
    group: np.ndarray | None = None
    coords: np.ndarray | None = None
    t: np.ndarray | None = None
    binary: bool = True

    def __post_init__(self):
        n = len(self.y)
        for name in ("region", "a"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        if self.x.shape[0] != n:
            raise DataError("covariate matrix row count mismatch")
        if not np.all(self.x[:, 0] == 1.0):
            raise DataError("first covariate column must be the intercept")
        if n and (self.region.min() < 0 or self.region.max() >= self.n_regions):
            raise DataError("region index outside lattice")
        if self.binary and not np.all(np.isin(self.a, (0.0, 1.0))):
            raise DataError("binary treatment must be 0/1")

    @classmethod
    def from_arrays(cls, region, y, a, x=None, *, n_regions=None, binary=True, **extra):
        region = np.asarray(region, dtype=int)
        y = np.asarray(y, dtype=float)
        a = np.asarray(a, dtype=float)
        if x is not None:
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
        if n_regions is None:
            n_regions = int(region.max()) + 1
        for k, v in list(extra.items()):
            if v is not None:
                extra[k] = np.asarray(v, dtype=int if k in ("rep", "group", "t") else float)
        return cls(region, y, a, _with_intercept(x, len(y)), int(n_regions), binary=binary, **extra)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def covariates(self) -> np.ndarray:
        """Covariates without the intercept column."""
        return self.x[:, 1:]

    @property
    def counts(self) -> np.ndarray:
        """Observations per region."""
        return np.bincount(self.region, minlength=self.n_regions)

    def with_response(self, y) -> "ArealDataset":
        return replace(self, y=np.asarray(y, dtype=float))

    def with_treatment(self, a, binary=None) -> "ArealDataset":
        return replace(self, a=np.asarray(a, dtype=float), binary=self.binary if binary is None else binary)


@dataclass(frozen=True)
class PanelDataset:
    """One observation per (region, time) with ``t`` in ``1..T``."""

    region: np.ndarray
    t: np.ndarray
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    n_regions: int

    def __post_init__(self):
        n = len(self.y)
        if not (len(self.region) == len(self.t) == len(self.a) == self.x.shape[0] == n):
            raise DataError("panel columns have different lengths")
        keys = self.region.astype(np.int64) * (int(self.t.max()) + 1) + self.t
        if len(np.unique(keys)) != n:
            raise DataError("duplicate (region, t) pair in panel")
        steps = np.unique(self.t)
        if steps[0] != 1 or not np.array_equal(steps, np.arange(1, len(steps) + 1)):
            raise DataError("time steps must be contiguous from 1")

    @classmethod
    def from_arrays(cls, region, t, y, a, x=None, *, n_regions=None):
        region = np.asarray(region, dtype=int)
        if x is not None:
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
        y = np.asarray(y, dtype=float)
        return cls(region, np.asarray(t, dtype=int), y, np.asarray(a, dtype=float),
                   _with_intercept(x, len(y)),
                   int(region.max()) + 1 if n_regions is None else int(n_regions))

    @property
    def n_times(self) -> int:
        return int(self.t.max())

    def wide(self, values) -> np.ndarray:
        """Arrange a per-row vector as a (n_regions, T) array (NaN where missing)."""
        out = np.full((self.n_regions, self.n_times), np.nan)
        out[self.region, self.t - 1] = values
        return out


@dataclass(frozen=True)
class PointDataset:
    """Point-referenced observations at coordinates ``coords`` (n x 2)."""

    coords: np.ndarray
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        if self.coords.shape != (len(self.y), 2):
            raise DataError("coords must be an n x 2 array")
        if not np.all(np.isfinite(self.coords)):
            raise DataError("coordinates must be finite")

    @classmethod
    def from_arrays(cls, coords, y, a, x=None):
        y = np.asarray(y, dtype=float)
        if x is not None:
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
        return cls(np.asarray(coords, dtype=float), y, np.asarray(a, dtype=float), _with_intercept(x, len(y)))

    @property
    def n(self) -> int:
        return len(self.y)


# ---------------------------------------------------------------- CSV layer

def _fmt(value, integer: bool) -> str:
    if integer:
        return str(int(value))
    return repr(float(value))


def _read_table(path, required, allowed_extra):
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty file: header row is mandatory", row=0) from None
    for col in required:
        if col not in header:
            raise DataError(f"missing required column '{col}'", row=0)
    if len(set(header)) != len(header):
        raise DataError("duplicate column names", row=0)
    for col in header:
        if col not in required and col not in allowed_extra and not _X_COL.match(col):
            raise DataError(f"unknown column '{col}'", row=0)
    cols: dict[str, list[float]] = {h: [] for h in header}
    for rowno, row in enumerate(reader, 1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} cells, found {len(row)}", row=rowno)
        for name, cell in zip(header, row):
            cell = cell.strip()
            if cell == "":
                raise DataError("missing value", row=rowno, column=name)
            try:
                val = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell '{cell}'", row=rowno, column=name) from None
            if not math.isfinite(val):
                raise DataError(f"non-finite cell '{cell}'", row=rowno, column=name)
            if name in _INT_COLS and val != int(val):
                raise DataError(f"integer expected, got '{cell}'", row=rowno, column=name)
            cols[name].append(val)
    xcols = sorted((c for c in header if _X_COL.match(c)), key=lambda c: int(c[1:]))
    expected = [f"x{k}" for k in range(1, len(xcols) + 1)]
    if xcols != expected:
        raise DataError(f"covariate columns must be x1..x{len(xcols)}", row=0)
    return header, {k: np.asarray(v) for k, v in cols.items()}, xcols


def _check_binary(a, binary):
    if binary:
        bad = np.flatnonzero(~np.isin(a, (0.0, 1.0)))
        if bad.size:
            raise DataError(f"treatment {float(a[bad[0]])!r} is not 0/1 under binary treatment",
                            row=int(bad[0]) + 1, column="a")


def read_areal_csv(path, *, n_regions: int | None = None, lattice=None, binary: bool = True) -> ArealDataset:
    """Read and validate an areal dataset.

    Region ids must be below ``n_regions`` (or ``lattice.n_regions``); when
    neither is given the largest id seen defines the lattice size.
    """
    _, cols, xcols = _read_table(path, ("region", "y", "a"), {"rep", "s1", "s2", "t", "z", "group"})
    if lattice is not None:
        n_regions = lattice.n_regions
    region = cols["region"].astype(int)
    if n_regions is not None:
        bad = np.flatnonzero((region < 0) | (region >= n_regions))
        if bad.size:
            raise DataError(f"unknown region id {region[bad[0]]}", row=int(bad[0]) + 1, column="region")
    elif region.size and region.min() < 0:
        bad = int(np.flatnonzero(region < 0)[0])
        raise DataError(f"unknown region id {region[bad]}", row=bad + 1, column="region")
    _check_binary(cols["a"], binary)
    x = np.column_stack([cols[c] for c in xcols]) if xcols else None
    coords = None
    if "s1" in cols or "s2" in cols:
        if not ("s1" in cols and "s2" in cols):
            raise DataError("coordinates need both s1 and s2", row=0)
        coords = np.column_stack([cols["s1"], cols["s2"]])
    return ArealDataset(
        region=region,
        y=cols["y"].astype(float),
        a=cols["a"].astype(float),
        x=_with_intercept(x, len(region)),
        n_regions=int(n_regions if n_regions is not None else (region.max() + 1 if region.size else 0)),
        rep=cols["rep"].astype(int) if "rep" in cols else None,
        z=cols["z"].astype(float) if "z" in cols else None,
        group=cols["group"].astype(int) if "group" in cols else None,
        coords=coords,
        t=cols["t"].astype(int) if "t" in cols else None,
        binary=binary,
    )


def _write_table(path, columns: dict[str, np.ndarray]):
    names = list(columns)
    n = len(next(iter(columns.values())))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in range(n):
        w.writerow([_fmt(columns[c][r], c in _INT_COLS) for c in names])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_areal_csv(data: ArealDataset, path) -> None:
    cols = {"region": data.region}
    if data.rep is not None:
        cols["rep"] = data.rep
    cols["y"] = data.y
    cols["a"] = data.a
    for k in range(1, data.x.shape[1]):
        cols[f"x{k}"] = data.x[:, k]
    if data.coords is not None:
        cols["s1"], cols["s2"] = data.coords[:, 0], data.coords[:, 1]
    for name in ("t", "z", "group"):
        if getattr(data, name) is not None:
            cols[name] = getattr(data, name)
    _write_table(path, cols)


def read_panel_csv(path, *, n_regions: int | None = None, lattice=None) -> PanelDataset:
    _, cols, xcols = _read_table(path, ("region", "t", "y", "a"), set())
    if lattice is not None:
        n_regions = lattice.n_regions
    region = cols["region"].astype(int)
    if n_regions is not None:
        bad = np.flatnonzero((region < 0) | (region >= n_regions))
        if bad.size:
            raise DataError(f"unknown region id {region[bad[0]]}", row=int(bad[0]) + 1, column="region")
    x = np.column_stack([cols[c] for c in xcols]) if xcols else None
    return PanelDataset(region, cols["t"].astype(int), cols["y"], cols["a"], _with_intercept(x, len(region)),
                        int(n_regions if n_regions is not None else region.max() + 1))


def write_panel_csv(data: PanelDataset, path) -> None:
    cols = {"region": data.region, "t": data.t, "y": data.y, "a": data.a}
    for k in range(1, data.x.shape[1]):
        cols[f"x{k}"] = data.x[:, k]
    _write_table(path, cols)


def read_point_csv(path) -> PointDataset:
    _, cols, xcols = _read_table(path, ("s1", "s2", "y", "a"), set())
    x = np.column_stack([cols[c] for c in xcols]) if xcols else None
    return PointDataset(np.column_stack([cols["s1"], cols["s2"]]), cols["y"], cols["a"],
                        _with_intercept(x, len(cols["y"])))


def write_point_csv(data: PointDataset, path) -> None:
    cols = {"s1": data.coords[:, 0], "s2": data.coords[:, 1], "y": data.y, "a": data.a}
    for k in range(1, data.x.shape[1]):
        cols[f"x{k}"] = data.x[:, k]
    _write_table(path, cols)


# ------------------------------------------------------------ run config

@dataclass(frozen=True)
class RunConfig:
    """Settings for MCMC fits and simulation studies.

    Defaults are desk scale: 20 datasets on a 20x20 grid, 5000 iterations
    with 1000 burn-in.
    """

    scenario: str = "a"
    grid: tuple[int, int] = (20, 20)
    datasets: int = 20
    iterations: int = 5000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 1
    estimators: tuple[str, ...] = DEFAULT_ESTIMATORS
    output: str = "results"
    beta: float = 0.5
    phi: float = 0.5

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError(f"need iterations > burn-in >= 0, got {self.iterations} and {self.burn_in}")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.datasets < 1:
            raise ValueError("dataset count must be at least 1")
        if min(self.grid) < 1 or self.grid[0] * self.grid[1] < 2:
            raise ValueError(f"invalid grid {self.grid}")

    @property
    def n_keep(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


_ALIASES = {
    "iters": "iterations",
    "iter": "iterations",
    "burnin": "burn_in",
    "burn": "burn_in",
    "out": "output",
    "n_datasets": "datasets",
}


def _parse_value(key: str, raw: str):
    if key == "grid":
        m = re.fullmatch(r"(\d+)\s*[xX×*]\s*(\d+)", raw)
        if not m:
            raise ValueError(f"grid must look like 30x30, got '{raw}'")
        return int(m.group(1)), int(m.group(2))
    if key == "estimators":
        items = tuple(s.strip() for s in raw.split(",") if s.strip())
        if not items:
            raise ValueError("empty estimator list")
        return items
    if key in ("datasets", "iterations", "burn_in", "thin", "seed"):
        return int(raw)
    if key in ("beta", "phi"):
        return float(raw)
    return raw


def parse_config(path=None, text: str | None = None) -> RunConfig:
    """Parse ``key=value`` settings (several per line allowed, ``#`` comments)."""
    if text is None:
        text = Path(path).read_text(encoding="utf-8")
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        for token in line.split():
            key, sep, raw = token.partition("=")
            if not sep or not raw:
                raise ValueError(f"line {lineno}: malformed setting '{token}'")
            key = _ALIASES.get(key.strip().lower(), key.strip().lower())
            if key not in known:
                raise ValueError(f"line {lineno}: unknown key '{key}'")
            try:
                values[key] = _parse_value(key, raw.strip())
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
    return RunConfig(**values)
