"""Synthetic marketing environment with known organic and incremental effects.

Outcome model::

    Y(x, k) = b . x + 1{k >= 1} delta_k . x + eps,   eps ~ N(0, noise_sd^2)

so the true effect of campaign ``k`` against no treatment is ``delta_k . x``
and the organic part ``b . x`` is what a customer does anyway.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset

__all__ = [
    "SyntheticEnvironment",
    "sample_context",
    "realize_outcome",
    "true_cate",
    "generate_log",
    "default_environment",
    "confounded_environment",
    "save_environment",
    "load_environment",
]


@dataclass(frozen=True, eq=False)
class SyntheticEnvironment:
    """Linear ground truth.

    Parameters
    ----------
    organic_weights : (d,) array
        ``b``; organic outcome is ``b . x``.
    incremental_weights : (K, d) array
        Row ``k - 1`` is ``delta_k``.
    noise_sd : float
        Standard deviation of the additive Gaussian noise.
    quadratic : float
        Adds ``quadratic * (x . x)`` to the organic outcome. Zero by default;
        a non-zero value makes the linear bandit misspecified.
    """

    organic_weights: np.ndarray
    incremental_weights: np.ndarray
    noise_sd: float = 1.0
    seed: int = 0
    quadratic: float = 0.0
    name: str = field(default="custom")

    def __post_init__(self):
        b = np.array(self.organic_weights, dtype=float).ravel()
        D = np.array(self.incremental_weights, dtype=float, ndmin=2)
        if D.shape[1] != b.size:
            raise ValueError("incremental weights must have d columns")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        b.setflags(write=False)
        D.setflags(write=False)
        object.__setattr__(self, "organic_weights", b)
        object.__setattr__(self, "incremental_weights", D)

    @property
    def dimension(self) -> int:
        return self.organic_weights.size

    @property
    def num_arms(self) -> int:
        return self.incremental_weights.shape[0]

    # Vectorised helpers; the run loop and generate_log use these.

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, self.dimension))

    def organic(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = X @ self.organic_weights
        if self.quadratic:
            out = out + self.quadratic * np.sum(X * X, axis=1)
        return out

    def true_cates(self, X) -> np.ndarray:
        """``(n, K)`` true incremental effects ``delta_k . x``."""
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.incremental_weights.T

    def expected_outcomes(self, X, arms) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        arms = np.asarray(arms, dtype=int)
        lift = np.zeros(len(X))
        treated = arms >= 1
        if np.any(treated):
            lift[treated] = np.einsum("ij,ij->i", X[treated], self.incremental_weights[arms[treated] - 1])
        return self.organic(X) + lift

    def realize_outcomes(self, X, arms, rng: np.random.Generator) -> np.ndarray:
        mean = self.expected_outcomes(X, arms)
        return mean + self.noise_sd * rng.standard_normal(len(mean))

    def optimal_arms(self, X) -> np.ndarray:
        """Arm id with the largest true effect for each row (lowest id on ties)."""
        return np.argmax(self.true_cates(X), axis=1) + 1


def sample_context(env: SyntheticEnvironment, rng: np.random.Generator) -> np.ndarray:
    return env.sample_contexts(1, rng)[0]


def realize_outcome(env: SyntheticEnvironment, x, arm: int, rng: np.random.Generator) -> float:
    if not 0 <= arm <= env.num_arms:
        raise ValueError(f"arm {arm} outside 0..{env.num_arms}")
    return float(env.realize_outcomes(np.asarray(x, dtype=float)[None, :], [arm], rng)[0])


def true_cate(env: SyntheticEnvironment, x, arm: int) -> float:
    if not 1 <= arm <= env.num_arms:
        raise ValueError(f"true_cate needs a campaign arm in 1..{env.num_arms}, got {arm}")
    return float(np.dot(env.incremental_weights[arm - 1], np.asarray(x, dtype=float)))


def generate_log(
    env: SyntheticEnvironment,
    n_events: int,
    holdout_fraction: float = 0.0,
    policy="uniform",
    seed: int | None = None,
    n_propensity_samples: int = 1024,
) -> tuple[Dataset, Dataset]:
    """Simulate a logged campaign and a no-treatment holdout.

    ``n_events`` counts both groups; ``round(n_events * holdout_fraction)``
    events go to the holdout (arm 0, propensity 1, organic outcome).
    ``policy`` is ``"uniform"`` (each arm with probability 1/K) or a
    :class:`~causalbandit.bandit.BanditModel`, whose Thompson decisions and
    estimated propensities are logged.

    Returns ``(treatment, holdout)``; event ids run on across both.
    """
    if n_events < 1:
        raise ValueError("n_events must be >= 1")
    if not 0 <= holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in [0, 1)")
    rng = np.random.default_rng(env.seed if seed is None else seed)
    n_hold = int(round(n_events * holdout_fraction))
    n_treat = n_events - n_hold
    X = env.sample_contexts(n_events, rng)
    K = env.num_arms
    if isinstance(policy, str):
        if policy != "uniform":
            raise ValueError(f"unknown policy {policy!r}")
        arms_t = rng.integers(1, K + 1, size=n_treat)
        prop_t = np.full(n_treat, 1.0 / K)
    else:
        from .bandit import select_arms

        decisions = select_arms(policy, X[:n_treat], n_propensity_samples, rng=rng)
        arms_t = np.array([d.chosen_arm for d in decisions], dtype=int)
        prop_t = np.array([d.propensity_estimate for d in decisions])
    arms = np.concatenate([arms_t, np.zeros(n_hold, dtype=int)])
    props = np.concatenate([prop_t, np.ones(n_hold)])
    y = env.realize_outcomes(X, arms, rng)
    ids = np.arange(n_events)
    treat = Dataset.from_arrays(X[:n_treat], arms[:n_treat], props[:n_treat], y[:n_treat], ids[:n_treat], num_arms=K)
    hold = Dataset.from_arrays(X[n_treat:], arms[n_treat:], props[n_treat:], y[n_treat:], ids[n_treat:], num_arms=K)
    return treat, hold


def default_environment(seed: int = 0, noise_sd: float = 1.0) -> SyntheticEnvironment:
    """d=10, K=4 scenario with separated campaign effects.

    Campaign ``k`` persuades customers high on feature ``k - 1`` and
    cannibalises the other three campaigns' audiences, so effects are
    well separated and the best arm changes across the context space.
    Organic weights spread over features 4..9.
    """
    d, K = 10, 4
    delta = np.zeros((K, d))
    for k in range(K):
        delta[k, :K] = -0.5
        delta[k, k] = 1.5
    b = np.zeros(d)
    b[K:] = np.linspace(1.0, 0.5, d - K)
    return SyntheticEnvironment(b, delta, noise_sd=noise_sd, seed=seed, name="default")


def confounded_environment(seed: int = 0, noise_sd: float = 1.0) -> SyntheticEnvironment:
    """Scenario where high organic outcome marks low persuadability.

    Feature 0 drives the organic outcome strongly (``b_0 = 3``) and lowers
    every campaign's effect, so customers who "would buy anyway" look
    attractive to an outcome-maximising model while the persuadable ones are
    those high on feature ``k`` and low on feature 0.
    """
    d, K = 10, 4
    delta = np.zeros((K, d))
    for k in range(K):
        delta[k, 0] = -0.75
        delta[k, k + 1] = 1.5
    b = np.zeros(d)
    b[0] = 3.0
    b[K + 1:] = 0.25
    return SyntheticEnvironment(b, delta, noise_sd=noise_sd, seed=seed, name="confounded")


def environment_to_dict(env: SyntheticEnvironment) -> dict:
    return {
        "name": env.name,
        "d": env.dimension,
        "K": env.num_arms,
        "b": env.organic_weights.tolist(),
        "delta": env.incremental_weights.tolist(),
        "noise_sd": env.noise_sd,
        "quadratic": env.quadratic,
        "seed": env.seed,
    }


def save_environment(env: SyntheticEnvironment, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(environment_to_dict(env), indent=1) + "\n", encoding="utf-8")
    return path


def load_environment(path) -> SyntheticEnvironment:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    env = SyntheticEnvironment(
        body["b"], body["delta"], noise_sd=body["noise_sd"], seed=body["seed"],
        quadratic=body.get("quadratic", 0.0), name=body.get("name", "custom"),
    )
    if env.dimension != body["d"] or env.num_arms != body["K"]:
        raise ValueError("environment file: d/K do not match weight shapes")
    return env
