"""Dataset containers and their CSV / metadata serialization."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import LocationSet
from .errors import DataError


@dataclass(eq=False)
class Dataset:
    """Response, covariate columns and locations for one spatial regression.

    ``X`` always has shape (n, p). ``column_means`` records the means removed
    by :meth:`centered` so a fit can be traced back to the raw input.
    """

    y: np.ndarray
    X: np.ndarray
    locations: LocationSet
    beta_true: np.ndarray | None = None
    column_means: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.X = X
        if not isinstance(self.locations, LocationSet):
            self.locations = LocationSet(self.locations)
        n = self.y.shape[0]
        if self.X.shape[0] != n or self.locations.n != n:
            raise DataError(
                f"inconsistent row counts: y={n}, X={self.X.shape[0]}, "
                f"locations={self.locations.n}"
            )
        if self.beta_true is not None:
            self.beta_true = np.asarray(self.beta_true, dtype=float).reshape(-1)
            if self.beta_true.shape[0] != self.p:
                raise DataError("beta_true length does not match the number of covariates")
        bad = ~np.isfinite(self.y) | ~np.all(np.isfinite(self.X), axis=1)
        if np.any(bad):
            raise DataError(f"non-finite values in row {int(np.argmax(bad))}")

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def is_centered(self):
        scale = max(1.0, float(np.max(np.abs(self.y))), float(np.max(np.abs(self.X), initial=0.0)))
        tol = 1e-10 * scale
        return abs(self.y.mean()) <= tol and np.all(np.abs(self.X.mean(axis=0)) <= tol)

    def centered(self):
        """Return a copy with y and every covariate column mean-centered."""
        ymean = float(self.y.mean())
        xmeans = self.X.mean(axis=0)
        means = dict(self.column_means)
        means["y"] = means.get("y", 0.0) + ymean
        for j, m in enumerate(xmeans, start=1):
            means[f"x{j}"] = means.get(f"x{j}", 0.0) + float(m)
        return type(self)(**{**self._fields(), "y": self.y - ymean, "X": self.X - xmeans,
                             "column_means": means})

    def _fields(self):
        return {
            "y": self.y,
            "X": self.X,
            "locations": self.locations,
            "beta_true": self.beta_true,
            "column_means": self.column_means,
        }


@dataclass(eq=False)
class ScenarioData(Dataset):
    """Simulated dataset with its generating scenario recorded."""

    scenario_id: str = ""
    seed: int = 0

    def _fields(self):
        return {**super()._fields(), "scenario_id": self.scenario_id, "seed": self.seed}


def fmt_float(v):
    """Shortest round-tripping representation, stable across runs."""
    return repr(float(v))


def dataset_to_csv(ds, path):
    """Write ``s1, s2, x1..xp, y`` rows with a header."""
    header = ["s1", "s2"] + [f"x{j}" for j in range(1, ds.p + 1)] + ["y"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in range(ds.n):
        row = [*ds.locations.coords[i], *ds.X[i], ds.y[i]]
        w.writerow([fmt_float(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_dataset_csv(path):
    """Read the ``s1, s2, x1..xp, y`` schema; raises DataError on mismatch."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for col in ("s1", "s2", "y"):
        if col not in header:
            raise DataError(f"{path}: missing required column '{col}'")
    xcols = sorted(
        (h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:])
    )
    if not xcols:
        raise DataError(f"{path}: no covariate columns x1..xp")
    expected = [f"x{j}" for j in range(1, len(xcols) + 1)]
    if xcols != expected:
        raise DataError(f"{path}: covariate columns must be {expected}, got {xcols}")
    idx = {h: header.index(h) for h in ["s1", "s2", *xcols, "y"]}
    data = np.empty((len(rows) - 1, len(idx)))
    for r, row in enumerate(rows[1:]):
        for c, name in enumerate(idx):
            try:
                data[r, c] = float(row[idx[name]])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: row {r + 1}, column '{name}' is not numeric") from exc
            if not np.isfinite(data[r, c]):
                raise DataError(f"{path}: row {r + 1}, column '{name}' is not finite")
    return Dataset(y=data[:, -1], X=data[:, 2:-1], locations=data[:, :2])


def write_meta(path, items):
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
