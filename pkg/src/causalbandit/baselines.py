"""Comparison estimators for conditional average treatment effects.

* non-incremental targets (IPS-corrected outcome, no counterfactual)
* single-model and two-model regressions
* transformed outcome
* the conversion decomposition ``(P(H=1|x,k) - P(H=1|x,0)) * (E[Y|x,H=1] - E[Y|x,H=0])``
  together with a small discrete joint distribution that lets the
  decomposition be checked by exhaustive enumeration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, LoggedEvent, TrainingExample
from .targets import bias_correct

logger = logging.getLogger(__name__)

__all__ = [
    "LinearRegressor",
    "TwoModel",
    "DiscreteJoint",
    "non_incremental_target",
    "non_incremental_examples",
    "fit_linear",
    "fit_two_model",
    "fit_multi_arm_two_model",
    "fit_single_model",
    "single_model_cate",
    "two_model_cate",
    "transformed_outcome",
    "decomposed_cate",
    "direct_cate_discrete",
    "decomposition_components",
    "transformed_outcome_expectation",
    "random_discrete_joint",
    "empirical_decomposed_cate",
]

RIDGE_FALLBACK = 1e-8


def non_incremental_target(event: LoggedEvent) -> TrainingExample:
    """Train on the corrected outcome itself, without subtracting a counterfactual."""
    return TrainingExample(event.context, event.arm, bias_correct(event.outcome, event.propensity))


def non_incremental_examples(dataset: Dataset, include_control: bool = False) -> list[TrainingExample]:
    return [non_incremental_target(e) for e in dataset.events if include_control or e.arm != 0]


@dataclass(frozen=True, eq=False)
class LinearRegressor:
    weights: np.ndarray
    intercept: float
    ridge: float = 0.0

    def predict(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.weights + self.intercept

    def __call__(self, x) -> float:
        return float(np.dot(self.weights, np.asarray(x, dtype=float)) + self.intercept)


def fit_linear(X, y) -> LinearRegressor:
    """Ordinary least squares with intercept via the normal equations.

    A rank-deficient design falls back to ridge with ``lambda = 1e-8``; the
    regularizer used is kept on the result.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] == 0:
        raise ValueError("cannot fit on an empty set")
    if X.shape[0] != y.size:
        raise ValueError("X and y differ in length")
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    G = A.T @ A
    b = A.T @ y
    ridge = 0.0
    if np.linalg.matrix_rank(A) < A.shape[1]:
        ridge = RIDGE_FALLBACK
        logger.info("rank-deficient design; ridge fallback lambda=%g", ridge)
        G = G + ridge * np.eye(G.shape[0])
    coef = np.linalg.solve(G, b)
    return LinearRegressor(coef[:-1], float(coef[-1]), ridge)


def fit_two_model(treatment_events: Dataset, control_events: Dataset) -> tuple[LinearRegressor, LinearRegressor]:
    """Separate outcome regressions for treated and control customers."""
    if len(treatment_events) == 0 or len(control_events) == 0:
        raise ValueError("two-model fit needs non-empty treatment and control sets")
    mu_t = fit_linear(treatment_events.contexts, treatment_events.outcomes)
    mu_c = fit_linear(control_events.contexts, control_events.outcomes)
    return mu_t, mu_c


def two_model_cate(models, context) -> float:
    mu_t, mu_c = models
    return mu_t(context) - mu_c(context)


@dataclass(frozen=True, eq=False)
class TwoModel:
    """One treatment regressor per campaign and a shared control regressor."""

    treatment: tuple[LinearRegressor, ...]
    control: LinearRegressor
    num_arms: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "num_arms", len(self.treatment))

    @property
    def dimension(self) -> int:
        return self.control.weights.size

    def cates(self, X) -> np.ndarray:
        """``(n, K)`` estimated effects ``mu_T,k(x) - mu_C(x)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        base = self.control.predict(X)
        return np.stack([m.predict(X) - base for m in self.treatment], axis=1)

    def recommend(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Campaign with the largest estimated effect, and that effect."""
        C = self.cates(X)
        best = np.argmax(C, axis=1)
        return best + 1, C[np.arange(len(C)), best]

    def to_dict(self) -> dict:
        def reg(m):
            return {"weights": m.weights.tolist(), "intercept": m.intercept, "ridge": m.ridge}

        return {"treatment": [reg(m) for m in self.treatment], "control": reg(self.control)}

    @classmethod
    def from_dict(cls, body: dict) -> "TwoModel":
        def reg(r):
            return LinearRegressor(np.array(r["weights"], dtype=float), float(r["intercept"]), float(r["ridge"]))

        return cls(tuple(reg(r) for r in body["treatment"]), reg(body["control"]))


def fit_multi_arm_two_model(treatment: Dataset, control: Dataset, num_arms: int | None = None) -> TwoModel:
    """Fit ``mu_T,k`` on the events of each campaign and one ``mu_C`` on controls."""
    K = treatment.num_arms if num_arms is None else num_arms
    arms = treatment.arms
    regs = []
    for k in range(1, K + 1):
        rows = np.flatnonzero(arms == k)
        if len(rows) == 0:
            raise ValueError(f"no treatment events for arm {k}")
        regs.append(fit_linear(treatment.contexts[rows], treatment.outcomes[rows]))
    if len(control) == 0:
        raise ValueError("no control events")
    return TwoModel(tuple(regs), fit_linear(control.contexts, control.outcomes))


def fit_single_model(treatment: Dataset, control: Dataset) -> LinearRegressor:
    """One regression on the pooled set with the treatment indicator as last feature."""
    X = np.vstack([treatment.contexts, control.contexts])
    w = np.concatenate([np.ones(len(treatment)), np.zeros(len(control))])
    y = np.concatenate([treatment.outcomes, control.outcomes])
    return fit_linear(np.column_stack([X, w]), y)


def single_model_cate(model: LinearRegressor, context) -> float:
    """Score twice with the indicator set to 1 and 0 and take the difference."""
    x = np.asarray(context, dtype=float)
    return model(np.append(x, 1.0)) - model(np.append(x, 0.0))


def transformed_outcome(y: float, w: int, e: float) -> float:
    """``y w / e - y (1 - w) / (1 - e)``; its conditional mean is the CATE."""
    if not 0 < e < 1:
        raise ValueError(f"propensity must lie in (0, 1), got {e}")
    if w not in (0, 1):
        raise ValueError(f"treatment indicator must be 0 or 1, got {w}")
    return y * w / e - y * (1 - w) / (1 - e)


def decomposed_cate(p_conv_k: float, p_conv_0: float, ey_h1: float, ey_h0: float) -> float:
    """Incremental conversion propensity times the converted/unconverted metric gap."""
    for p in (p_conv_k, p_conv_0):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability outside [0, 1]: {p}")
    return (p_conv_k - p_conv_0) * (ey_h1 - ey_h0)


@dataclass(frozen=True, eq=False)
class DiscreteJoint:
    """Finite joint over context X, arm W, conversion H and metric Y.

    The factorisation ``P(x) P(w|x) P(h|x,w) P(y|x,h)`` has no ``W`` in the
    last factor, so ``Y`` is conditionally independent of ``W`` given
    ``(H, X)`` by construction.

    Attributes
    ----------
    p_x : (nx,)
    p_w_given_x : (nx, K+1)
    p_h_given_xw : (nx, K+1, 2)
    p_y_given_xh : (nx, 2, ny)
    y_values : (ny,)
    """

    p_x: np.ndarray
    p_w_given_x: np.ndarray
    p_h_given_xw: np.ndarray
    p_y_given_xh: np.ndarray
    y_values: np.ndarray

    def __post_init__(self):
        nx = len(self.p_x)
        checks = {
            "p_x": (np.asarray(self.p_x), (nx,)),
            "p_w_given_x": (np.asarray(self.p_w_given_x), (nx, None)),
            "p_h_given_xw": (np.asarray(self.p_h_given_xw), (nx, None, 2)),
            "p_y_given_xh": (np.asarray(self.p_y_given_xh), (nx, 2, len(self.y_values))),
        }
        for name, (arr, shape) in checks.items():
            if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if np.any(arr < 0) or not np.allclose(arr.sum(axis=-1), 1.0, atol=1e-12, rtol=0):
                raise ValueError(f"{name} is not a probability table")
        if np.asarray(self.p_h_given_xw).shape[1] != np.asarray(self.p_w_given_x).shape[1]:
            raise ValueError("arm axes disagree")

    @property
    def num_arms(self) -> int:
        return np.asarray(self.p_w_given_x).shape[1] - 1

    def full(self) -> np.ndarray:
        """Joint table ``P(x, w, h, y)`` of shape ``(nx, K+1, 2, ny)``."""
        return (
            np.asarray(self.p_x)[:, None, None, None]
            * np.asarray(self.p_w_given_x)[:, :, None, None]
            * np.asarray(self.p_h_given_xw)[:, :, :, None]
            * np.asarray(self.p_y_given_xh)[:, None, :, :]
        )


def random_discrete_joint(
    rng: np.random.Generator, n_x: int = 3, num_arms: int = 3, n_y: int = 4
) -> DiscreteJoint:
    """Random joint with strictly positive tables (Dirichlet draws)."""

    def simplex(*shape):
        return rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])

    return DiscreteJoint(
        p_x=rng.dirichlet(np.ones(n_x)),
        p_w_given_x=simplex(n_x, num_arms + 1),
        p_h_given_xw=simplex(n_x, num_arms + 1, 2),
        p_y_given_xh=simplex(n_x, 2, n_y),
        y_values=rng.normal(0.0, 5.0, size=n_y),
    )


def _conditional_mean_y(table: np.ndarray, y_values: np.ndarray) -> float:
    mass = table.sum()
    if mass <= 0:
        raise ZeroDivisionError("conditioning event has zero probability")
    return float((table * y_values).sum() / mass)


def direct_cate_discrete(joint: DiscreteJoint, x: int, k: int) -> float:
    """``E[Y|X=x,W=k] - E[Y|X=x,W=0]`` by summing the full joint table."""
    if not 1 <= k <= joint.num_arms:
        raise ValueError(f"arm {k} outside 1..{joint.num_arms}")
    J = joint.full()[x]
    yv = np.asarray(joint.y_values)
    return _conditional_mean_y(J[k], yv) - _conditional_mean_y(J[0], yv)


def decomposition_components(joint: DiscreteJoint, x: int, k: int) -> tuple[float, float, float, float]:
    """``(P(H=1|x,k), P(H=1|x,0), E[Y|x,H=1], E[Y|x,H=0])``, each read off the
    full joint by marginalisation."""
    J = joint.full()[x]  # (w, h, y)
    yv = np.asarray(joint.y_values)

    def p_conv(w):
        m = J[w].sum()
        if m <= 0:
            raise ZeroDivisionError("conditioning event has zero probability")
        return float(J[w, 1].sum() / m)

    JH = J.sum(axis=0)  # (h, y), marginal over arms
    return p_conv(k), p_conv(0), _conditional_mean_y(JH[1], yv), _conditional_mean_y(JH[0], yv)


def transformed_outcome_expectation(joint: DiscreteJoint, x: int, k: int) -> float:
    """Exact ``E[Y~ | X=x]`` for the binary comparison of arm ``k`` against arm 0.

    The population is restricted to ``W in {0, k}``; the propensity is
    ``P(W=k | x, W in {0, k})``.
    """
    J = joint.full()[x][[0, k]]  # (2, h, y)
    J = J / J.sum()
    e = float(J[1].sum())
    yv = np.asarray(joint.y_values)
    total = 0.0
    for w in (0, 1):
        for h in (0, 1):
            for j, y in enumerate(yv):
                total += J[w, h, j] * transformed_outcome(float(y), w, e)
    return total


def empirical_decomposed_cate(cells, arms, conversions, metric, cell, k: int) -> float:
    """Plug-in decomposition from samples within one context cell.

    Conversion rates are frequencies among samples of the cell shown ``k``
    and shown nothing; metric means pool every sample of the cell.
    """
    cells = np.asarray(cells)
    arms = np.asarray(arms)
    h = np.asarray(conversions, dtype=int)
    y = np.asarray(metric, dtype=float)
    in_cell = cells == cell
    sel_k = in_cell & (arms == k)
    sel_0 = in_cell & (arms == 0)
    if not sel_k.any() or not sel_0.any():
        raise ValueError("cell has no samples for arm k or control")
    conv, noconv = in_cell & (h == 1), in_cell & (h == 0)
    if not conv.any() or not noconv.any():
        raise ValueError("cell lacks converted or unconverted samples")
    return decomposed_cate(h[sel_k].mean(), h[sel_0].mean(), y[conv].mean(), y[noconv].mean())
