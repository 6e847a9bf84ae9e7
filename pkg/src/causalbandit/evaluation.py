"""Offline policy evaluation against a randomized hold-out.

Customers of both cohorts are scored by a policy and ranked by the score of
their recommended campaign. Treated customers survive the replay filter only
when the campaign they were shown equals the recommendation.

Cut points are shared by deciles and lift curves: the top ``rho`` of the
joint ranked list holds ``ceil(rho * N)`` customers, so decile 10 is exactly
the top 10% and lift at ``rho = 0.1`` equals the decile-10 mean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "ScoredCustomer",
    "ScoredPopulation",
    "DecileReport",
    "UpliftReport",
    "PolicyComparison",
    "replay_filter",
    "decile_report",
    "lift_curve",
    "cohort_lift_curves",
    "uplift_curve",
    "uplift_report",
    "compare_policies",
    "default_rho_grid",
    "write_decile_csv",
    "write_curve_csv",
    "read_decile_csv",
    "read_curve_csv",
]

TREATMENT = "treatment"
HOLDOUT = "holdout"
DECILE_HEADER = ["decile", "treatment_mean", "control_mean", "cate", "treatment_count", "control_count"]
CURVE_HEADER = ["rho", "treatment_lift", "control_lift", "uplift"]


def default_rho_grid() -> np.ndarray:
    return np.arange(1, 101) / 100.0


@dataclass(frozen=True)
class ScoredCustomer:
    context: tuple[float, ...]
    cohort: str
    recommended_arm: int
    model_score: float
    observed_arm: int | None
    observed_outcome: float

    def __post_init__(self):
        if self.cohort not in (TREATMENT, HOLDOUT):
            raise ValueError(f"cohort must be {TREATMENT!r} or {HOLDOUT!r}")
        if self.cohort == HOLDOUT and self.observed_arm not in (0, None):
            raise ValueError("holdout customers have observed_arm 0")


@dataclass(frozen=True, eq=False)
class ScoredPopulation:
    """Columnar scored customers; row order is the tie-break order."""

    treated: np.ndarray
    recommended_arm: np.ndarray
    score: np.ndarray
    observed_arm: np.ndarray
    outcome: np.ndarray
    contexts: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.treated)
        for name in ("recommended_arm", "score", "observed_arm", "outcome"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from cohort length")
        if np.any(~self.treated & (self.observed_arm != 0)):
            raise ValueError("holdout customers have observed_arm 0")

    def __len__(self) -> int:
        return len(self.treated)

    @classmethod
    def from_arrays(cls, treated, recommended_arm, score, observed_arm, outcome, contexts=None):
        treated = np.asarray(treated, dtype=bool)
        obs = np.asarray(observed_arm, dtype=int).copy()
        obs[~treated] = 0
        return cls(
            treated,
            np.asarray(recommended_arm, dtype=int),
            np.asarray(score, dtype=float),
            obs,
            np.asarray(outcome, dtype=float),
            None if contexts is None else np.asarray(contexts, dtype=float),
        )

    @classmethod
    def from_customers(cls, customers: Sequence[ScoredCustomer]) -> "ScoredPopulation":
        return cls.from_arrays(
            [c.cohort == TREATMENT for c in customers],
            [c.recommended_arm for c in customers],
            [c.model_score for c in customers],
            [0 if c.observed_arm is None else c.observed_arm for c in customers],
            [c.observed_outcome for c in customers],
            [c.context for c in customers] if customers else None,
        )

    def to_customers(self) -> list[ScoredCustomer]:
        ctx = self.contexts if self.contexts is not None else [()] * len(self)
        return [
            ScoredCustomer(
                tuple(np.asarray(c, dtype=float).tolist()),
                TREATMENT if t else HOLDOUT,
                int(r),
                float(s),
                int(o),
                float(y),
            )
            for c, t, r, s, o, y in zip(
                ctx, self.treated, self.recommended_arm, self.score, self.observed_arm, self.outcome
            )
        ]

    def take(self, idx) -> "ScoredPopulation":
        idx = np.asarray(idx)
        return ScoredPopulation(
            self.treated[idx],
            self.recommended_arm[idx],
            self.score[idx],
            self.observed_arm[idx],
            self.outcome[idx],
            None if self.contexts is None else self.contexts[idx],
        )

    def ranking(self) -> np.ndarray:
        """Positions by descending score; equal scores keep row order."""
        return np.argsort(-self.score, kind="stable")


def replay_filter(scored):
    """Keep holdout customers and treated customers shown their recommendation.

    Accepts a :class:`ScoredPopulation` or a list of :class:`ScoredCustomer`
    and returns the same kind.
    """
    if isinstance(scored, ScoredPopulation):
        keep = ~scored.treated | (scored.observed_arm == scored.recommended_arm)
        return scored.take(np.flatnonzero(keep))
    return [
        c for c in scored if c.cohort == HOLDOUT or c.observed_arm == c.recommended_arm
    ]


def _as_population(scored) -> ScoredPopulation:
    return scored if isinstance(scored, ScoredPopulation) else ScoredPopulation.from_customers(list(scored))


def _cut(rho: float, n: int) -> int:
    """Number of top-ranked customers covered by fraction ``rho`` of ``n``."""
    return min(n, math.ceil(round(rho * n, 9)))


@dataclass(frozen=True, eq=False)
class DecileReport:
    """Per-decile cohort means; index 0 is decile 1 (lowest scores), index 9 is decile 10.

    A decile with no customers of a cohort has ``nan`` for that mean.
    """

    treatment_means: np.ndarray
    control_means: np.ndarray
    cate: np.ndarray
    treatment_counts: np.ndarray
    control_counts: np.ndarray

    @property
    def missing(self) -> list[tuple[int, str]]:
        out = []
        for i in range(10):
            if self.treatment_counts[i] == 0:
                out.append((i + 1, TREATMENT))
            if self.control_counts[i] == 0:
                out.append((i + 1, HOLDOUT))
        return out


def decile_report(filtered) -> DecileReport:
    """Rank all customers jointly, cut ten deciles, compare cohorts within each."""
    pop = _as_population(filtered)
    n = len(pop)
    if pop.treated.sum() < 10 or (~pop.treated).sum() < 10:
        raise ValueError("decile report needs at least 10 customers per cohort")
    order = pop.ranking()
    treated = pop.treated[order]
    y = pop.outcome[order]
    bounds = [_cut(j / 10, n) for j in range(11)]
    t_mean = np.full(10, np.nan)
    c_mean = np.full(10, np.nan)
    t_cnt = np.zeros(10, dtype=int)
    c_cnt = np.zeros(10, dtype=int)
    for j in range(10):
        sl = slice(bounds[j], bounds[j + 1])
        decile = 9 - j  # the top slice is decile 10
        tt, yy = treated[sl], y[sl]
        t_cnt[decile], c_cnt[decile] = tt.sum(), (~tt).sum()
        if t_cnt[decile]:
            t_mean[decile] = yy[tt].mean()
        if c_cnt[decile]:
            c_mean[decile] = yy[~tt].mean()
    return DecileReport(t_mean, c_mean, t_mean - c_mean, t_cnt, c_cnt)


def lift_curve(scores, outcomes, rho_grid=None, total: bool = False) -> np.ndarray:
    """Mean (or, with ``total``, summed) outcome of the top ``ceil(rho n)`` customers.

    ``scores`` rank one cohort; ties keep input order.
    """
    scores = np.asarray(scores, dtype=float)
    outcomes = np.asarray(outcomes, dtype=float)
    if len(scores) == 0:
        raise ValueError("empty cohort")
    rho = default_rho_grid() if rho_grid is None else np.asarray(rho_grid, dtype=float)
    if np.any((rho <= 0) | (rho > 1)):
        raise ValueError("rho values must lie in (0, 1]")
    y = outcomes[np.argsort(-scores, kind="stable")]
    csum = np.concatenate([[0.0], np.cumsum(y)])
    cuts = np.array([_cut(r, len(y)) for r in rho])
    if np.any(cuts == 0):
        raise ValueError("rho grid covers zero customers; start it at >= 1/n")
    return csum[cuts] if total else csum[cuts] / cuts


def cohort_lift_curves(pop: ScoredPopulation, rho_grid, total: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Treatment and control lift over the top ``rho`` of the *joint* ranking.

    A cut containing no customer of a cohort yields ``nan`` for that cohort.
    """
    order = pop.ranking()
    treated = pop.treated[order]
    y = pop.outcome[order]
    cuts = np.array([_cut(r, len(pop)) for r in rho_grid])
    out = []
    for mask in (treated, ~treated):
        csum = np.concatenate([[0.0], np.cumsum(np.where(mask, y, 0.0))])
        ccnt = np.concatenate([[0], np.cumsum(mask)])
        s, c = csum[cuts], ccnt[cuts]
        if total:
            out.append(s)
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                out.append(np.where(c > 0, s / np.maximum(c, 1), np.nan))
    return out[0], out[1]


def uplift_curve(treatment_lift, control_lift) -> np.ndarray:
    t = np.asarray(treatment_lift, dtype=float)
    c = np.asarray(control_lift, dtype=float)
    if t.shape != c.shape:
        raise ValueError(f"grid mismatch: {t.shape} vs {c.shape}")
    return t - c


@dataclass(frozen=True, eq=False)
class UpliftReport:
    decile_treatment_means: np.ndarray
    decile_control_means: np.ndarray
    decile_cate: np.ndarray
    decile_treatment_counts: np.ndarray
    decile_control_counts: np.ndarray
    rho_grid: np.ndarray
    treatment_lift: np.ndarray
    control_lift: np.ndarray
    uplift: np.ndarray

    def at(self, rho: float) -> float:
        """Uplift at the grid point closest to ``rho``."""
        return float(self.uplift[_grid_index(self.rho_grid, rho)])

    @property
    def deciles(self) -> DecileReport:
        return DecileReport(
            self.decile_treatment_means,
            self.decile_control_means,
            self.decile_cate,
            self.decile_treatment_counts,
            self.decile_control_counts,
        )


def uplift_report(scored, rho_grid=None, total: bool = False, replay: bool = True) -> UpliftReport:
    """Replay-filter (optional), then build deciles and lift/uplift curves.

    Grid points below ``1/N`` cover nobody and are dropped.
    """
    pop = _as_population(scored)
    if replay:
        pop = replay_filter(pop)
    rho = default_rho_grid() if rho_grid is None else np.asarray(rho_grid, dtype=float)
    rho = rho[rho >= 1.0 / len(pop)]
    dec = decile_report(pop)
    t, c = cohort_lift_curves(pop, rho, total=total)
    return UpliftReport(
        dec.treatment_means,
        dec.control_means,
        dec.cate,
        dec.treatment_counts,
        dec.control_counts,
        rho,
        t,
        c,
        uplift_curve(t, c),
    )


def _grid_index(grid, rho: float) -> int:
    grid = np.asarray(grid)
    i = int(np.argmin(np.abs(grid - rho)))
    if not math.isclose(grid[i], rho, abs_tol=1e-9):
        raise KeyError(f"rho={rho} not on the grid")
    return i


@dataclass(frozen=True)
class PolicyComparison:
    dominance_fraction: float
    gaps: dict

    def as_dict(self) -> dict:
        # nan (a cut with an empty cohort) becomes null so the output is valid JSON.
        gaps = {str(k): (v if np.isfinite(v) else None) for k, v in self.gaps.items()}
        return {"dominance_fraction": self.dominance_fraction, "gaps": gaps}


def compare_policies(report_a: UpliftReport, report_b: UpliftReport, gap_points=(0.01, 0.1, 1.0)) -> PolicyComparison:
    """How often uplift of ``a`` beats ``b`` over the grid, and gaps ``a - b``.

    Ties count one half, so identical reports give 0.5. Grid points where
    either uplift is ``nan`` are ignored.
    """
    if not np.allclose(report_a.rho_grid, report_b.rho_grid, rtol=0, atol=1e-12):
        raise ValueError("reports use different rho grids")
    a, b = report_a.uplift, report_b.uplift
    ok = np.isfinite(a) & np.isfinite(b)
    if not ok.any():
        raise ValueError("no comparable grid points")
    wins = np.sum(a[ok] > b[ok]) + 0.5 * np.sum(a[ok] == b[ok])
    gaps = {}
    for rho in gap_points:
        try:
            i = _grid_index(report_a.rho_grid, rho)
        except KeyError:
            continue
        gaps[rho] = float(a[i] - b[i])
    return PolicyComparison(float(wins / ok.sum()), gaps)


def _fmt(v) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def write_decile_csv(report, path) -> Path:
    dec = report.deciles if isinstance(report, UpliftReport) else report
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECILE_HEADER)
        for i in range(10):
            w.writerow([
                i + 1,
                _fmt(dec.treatment_means[i]),
                _fmt(dec.control_means[i]),
                _fmt(dec.cate[i]),
                int(dec.treatment_counts[i]),
                int(dec.control_counts[i]),
            ])
    return path


def write_curve_csv(report: UpliftReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r, t, c, u in zip(report.rho_grid, report.treatment_lift, report.control_lift, report.uplift):
            w.writerow([_fmt(r), _fmt(t), _fmt(c), _fmt(u)])
    return path


def _read_rows(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    return rows[1:]


def read_decile_csv(path) -> DecileReport:
    rows = _read_rows(path, DECILE_HEADER)
    cols = list(zip(*rows))
    f = lambda c: np.array([float(v) for v in c])  # noqa: E731
    return DecileReport(f(cols[1]), f(cols[2]), f(cols[3]),
                        np.array(cols[4], dtype=int), np.array(cols[5], dtype=int))


def read_curve_csv(path) -> UpliftReport:
    """Read a curve table; decile fields of the result are empty."""
    rows = _read_rows(path, CURVE_HEADER)
    r, t, c, u = (np.array([float(v) for v in col]) for col in zip(*rows))
    empty = np.zeros(0)
    return UpliftReport(empty, empty, empty, empty, empty, r, t, c, u)
