"""Feature preprocessing: winsorize, log1p, min-max scale, F-value selection.

Every statistic is fitted on training rows only and frozen in a
:class:`FittedPipeline`; applying it to new rows never refits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PipelineSpec",
    "FittedPipeline",
    "winsorize_fit_apply",
    "log1p_transform",
    "min_max_fit_apply",
    "min_max_apply",
    "f_values",
    "f_value_select",
    "pairwise_products",
    "fit_pipeline",
]


def winsorize_fit_apply(values, lower_pct: float = 1.0, upper_pct: float = 99.0):
    """Clip a column to its empirical percentiles.

    Percentiles use linear interpolation between closest ranks. Returns
    ``((low, high), clipped)``.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty column")
    if not 0 <= lower_pct < upper_pct <= 100:
        raise ValueError("need 0 <= lower_pct < upper_pct <= 100")
    lo, hi = np.percentile(v, [lower_pct, upper_pct], method="linear")
    return (float(lo), float(hi)), np.clip(v, lo, hi)


def log1p_transform(value):
    """Natural log of ``1 + value``; rejects negative input."""
    v = np.asarray(value, dtype=float)
    if np.any(v < 0):
        raise ValueError("log1p_transform needs non-negative values")
    out = np.log1p(v)
    return float(out) if out.ndim == 0 else out


def min_max_apply(values, lo: float, hi: float):
    """Scale with fitted bounds and clip to [0, 1]; a constant column maps to 0."""
    v = np.asarray(values, dtype=float)
    if hi <= lo:
        return np.zeros_like(v)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def min_max_fit_apply(values):
    """Returns ``((min, max), scaled)``."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty column")
    lo, hi = float(v.min()), float(v.max())
    return (lo, hi), min_max_apply(v, lo, hi)


def f_values(X, y) -> np.ndarray:
    """Univariate regression F statistic ``r^2 (n - 2) / (1 - r^2)`` per column.

    ``r`` is the Pearson correlation with ``y``. A zero-variance column scores
    0; a perfectly correlated one scores ``+inf``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    if n < 3:
        raise ValueError("need at least 3 rows")
    if y.size != n:
        raise ValueError("X and y differ in length")
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sx = np.sqrt(np.sum(Xc**2, axis=0))
    sy = np.sqrt(np.sum(yc**2))
    F = np.zeros(X.shape[1])
    ok = (sx > 0) & (sy > 0)
    if not ok.any():
        return F
    r = (Xc[:, ok].T @ yc) / (sx[ok] * sy)
    r2 = np.clip(r * r, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        F[ok] = np.where(r2 >= 1.0 - 1e-15, np.inf, r2 * (n - 2) / (1.0 - r2))
    return F


def f_value_select(X, y, S: int):
    """Top ``S`` columns by F value, descending; ties go to the lower index.

    Returns ``(indices, scores)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not 1 <= S <= X.shape[1]:
        raise ValueError(f"S must lie in 1..{X.shape[1]}")
    F = f_values(X, y)
    order = np.lexsort((np.arange(F.size), -F))[:S]
    return order, F[order]


def pairwise_products(X) -> np.ndarray:
    """Append ``x_i * x_j`` for every ``i < j`` after the original columns."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    i, j = np.triu_indices(X.shape[1], k=1)
    return np.hstack([X, X[:, i] * X[:, j]])


@dataclass(frozen=True)
class PipelineSpec:
    winsor_lower_pct: float = 1.0
    winsor_upper_pct: float = 99.0
    log_transform_columns: frozenset = field(default_factory=frozenset)
    select_top_s: int | None = None
    interactions: bool = False

    def __post_init__(self):
        if not 0 <= self.winsor_lower_pct < self.winsor_upper_pct <= 100:
            raise ValueError("need 0 <= lower < upper <= 100")
        if self.select_top_s is not None and self.select_top_s < 1:
            raise ValueError("select_top_s must be >= 1")
        object.__setattr__(self, "log_transform_columns", frozenset(int(c) for c in self.log_transform_columns))


@dataclass(frozen=True, eq=False)
class FittedPipeline:
    spec: PipelineSpec
    n_input_columns: int
    winsor_bounds: dict
    minmax_bounds: dict
    selected: np.ndarray | None = None
    selected_scores: np.ndarray | None = None

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_input_columns:
            raise ValueError(f"expected {self.n_input_columns} columns, got {X.shape[1]}")
        Z = _scale(X, self.spec, self.winsor_bounds, self.minmax_bounds)
        if self.spec.interactions:
            Z = pairwise_products(Z)
        return Z if self.selected is None else Z[:, self.selected]

    def to_dict(self) -> dict:
        cols = {}
        for c in range(self.n_input_columns):
            cols[str(c)] = {
                "winsor": list(self.winsor_bounds[c]),
                "minmax": list(self.minmax_bounds[c]),
                "log1p": c in self.spec.log_transform_columns,
            }
        return {
            "spec": {
                "winsor_lower_pct": self.spec.winsor_lower_pct,
                "winsor_upper_pct": self.spec.winsor_upper_pct,
                "log_transform_columns": sorted(self.spec.log_transform_columns),
                "select_top_s": self.spec.select_top_s,
                "interactions": self.spec.interactions,
            },
            "n_input_columns": self.n_input_columns,
            "columns": cols,
            "selected": None if self.selected is None else self.selected.tolist(),
            "selected_scores": None
            if self.selected_scores is None
            else [s if np.isfinite(s) else "inf" for s in self.selected_scores.tolist()],
        }

    @classmethod
    def from_dict(cls, body: dict) -> "FittedPipeline":
        spec = PipelineSpec(**body["spec"])
        cols = body["columns"]
        n = int(body["n_input_columns"])
        sel = body.get("selected")
        scores = body.get("selected_scores")
        return cls(
            spec,
            n,
            {c: tuple(cols[str(c)]["winsor"]) for c in range(n)},
            {c: tuple(cols[str(c)]["minmax"]) for c in range(n)},
            None if sel is None else np.array(sel, dtype=int),
            None if scores is None else np.array([float(s) for s in scores]),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "FittedPipeline":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _scale(X, spec, winsor, minmax) -> np.ndarray:
    Z = np.empty_like(X)
    for c in range(X.shape[1]):
        lo, hi = winsor[c]
        col = np.clip(X[:, c], lo, hi)
        if c in spec.log_transform_columns:
            col = log1p_transform(col)
        Z[:, c] = min_max_apply(col, *minmax[c])
    return Z


def fit_pipeline(X, y=None, spec: PipelineSpec = PipelineSpec()) -> FittedPipeline:
    """Fit winsor bounds, min-max bounds and (with ``select_top_s``) the
    selected columns on training data."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    winsor, minmax = {}, {}
    for c in range(X.shape[1]):
        winsor[c], col = winsorize_fit_apply(X[:, c], spec.winsor_lower_pct, spec.winsor_upper_pct)
        if c in spec.log_transform_columns:
            col = log1p_transform(col)
        minmax[c], _ = min_max_fit_apply(col)
    fitted = FittedPipeline(spec, X.shape[1], winsor, minmax)
    if spec.select_top_s is None:
        return fitted
    if y is None:
        raise ValueError("feature selection needs a target")
    Z = fitted.transform(X)
    S = min(spec.select_top_s, Z.shape[1])
    idx, scores = f_value_select(Z, y, S)
    return FittedPipeline(spec, X.shape[1], winsor, minmax, idx, scores)
