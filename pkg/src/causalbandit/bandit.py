"""K-armed contextual Thompson sampling over Bayesian linear reward models.

Each arm ``k = 1..K`` keeps an independent Gaussian posterior over a weight
vector ``theta_k``; the reward model is ``theta_k . x`` with known noise
variance. Arms are stored zero-based (``model.arms[k - 1]``) but every public
function speaks in arm ids, where 0 is the never-played control.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import linalg

from .data import Dataset, LoggedEvent, TrainingExample
from .targets import GenerationConfig, generate_training_data

logger = logging.getLogger(__name__)

__all__ = [
    "ArmPosterior",
    "BanditModel",
    "Decision",
    "PosteriorUpdateError",
    "init_model",
    "sample_parameters",
    "score",
    "select_arm",
    "select_arms",
    "estimate_propensity",
    "propensities",
    "batch_update",
    "posterior_mean_scores",
    "recommend",
    "batch_update_arrays",
    "model_to_dict",
    "model_from_dict",
    "run_loop",
    "LoopResult",
    "LogReplayEnvironment",
    "save_model",
    "load_model",
    "write_decision_log",
    "read_decision_log",
    "MODEL_FORMAT",
    "MODEL_VERSION",
]

MODEL_FORMAT = "causalbandit-model"
MODEL_VERSION = 1
_PSD_TOL = 1e-10


class PosteriorUpdateError(ArithmeticError):
    """The conjugate update could not be solved; the input model is untouched."""


@dataclass(frozen=True, eq=False)
class ArmPosterior:
    mean: np.ndarray
    covariance: np.ndarray
    noise_variance: float
    observation_count: int = 0

    def __post_init__(self):
        m = np.array(self.mean, dtype=float)
        c = np.array(self.covariance, dtype=float)
        if c.shape != (m.size, m.size):
            raise ValueError(f"covariance shape {c.shape} does not match mean of length {m.size}")
        if not np.allclose(c, c.T, atol=_PSD_TOL, rtol=0):
            raise ValueError("covariance is not symmetric")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be > 0")
        m.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", c)

    @property
    def dimension(self) -> int:
        return self.mean.size

    def is_positive_definite(self) -> bool:
        return bool(np.linalg.eigvalsh(self.covariance).min() > 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArmPosterior):
            return NotImplemented
        return (
            np.array_equal(self.mean, other.mean)
            and np.array_equal(self.covariance, other.covariance)
            and self.noise_variance == other.noise_variance
            and self.observation_count == other.observation_count
        )


@dataclass(frozen=True, eq=False)
class BanditModel:
    """Immutable snapshot of all arm posteriors plus a shared random stream.

    ``rng`` is the only mutable part; it advances as decisions are drawn.
    """

    arms: tuple[ArmPosterior, ...]
    dimension: int
    seed: int = 0
    prior_variance: float = 1.0
    rng: np.random.Generator = field(default=None, repr=False)
    _decision_counter: itertools.count = field(default_factory=itertools.count, repr=False)

    def __post_init__(self):
        if self.rng is None:
            object.__setattr__(self, "rng", np.random.default_rng(self.seed))
        if any(a.dimension != self.dimension for a in self.arms):
            raise ValueError("all arms must share the model dimension")
        if len({a.noise_variance for a in self.arms}) > 1:
            raise ValueError("all arms must share the noise variance")

    @property
    def num_arms(self) -> int:
        return len(self.arms)

    @property
    def noise_variance(self) -> float:
        return self.arms[0].noise_variance

    def arm(self, arm_id: int) -> ArmPosterior:
        if not 1 <= arm_id <= self.num_arms:
            raise ValueError(f"arm id {arm_id} outside 1..{self.num_arms}")
        return self.arms[arm_id - 1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BanditModel):
            return NotImplemented
        return self.dimension == other.dimension and self.arms == other.arms


@dataclass(frozen=True)
class Decision:
    context: tuple[float, ...]
    chosen_arm: int
    sampled_scores: tuple[float, ...]
    propensity_estimate: float
    decision_id: str


def init_model(
    d: int, K: int, prior_variance: float = 1.0, noise_variance: float = 1.0, seed: int = 0
) -> BanditModel:
    """Zero-mean isotropic prior ``N(0, prior_variance * I)`` for every arm."""
    if d < 1 or K < 1:
        raise ValueError("need d >= 1 and K >= 1")
    if not (prior_variance > 0 and noise_variance > 0):
        raise ValueError("variances must be positive")
    arm = ArmPosterior(np.zeros(d), prior_variance * np.eye(d), float(noise_variance), 0)
    return BanditModel(arms=(arm,) * K, dimension=d, seed=seed, prior_variance=float(prior_variance))


def _sqrt_cov(cov: np.ndarray) -> np.ndarray:
    """Factor ``L`` with ``L @ L.T == cov``; tolerates singular PSD matrices."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(cov)
        scale = max(1.0, float(np.abs(w).max(initial=0.0)))
        if w.min(initial=0.0) < -_PSD_TOL * scale:
            raise ValueError("covariance is not positive semi-definite") from None
        return V * np.sqrt(np.clip(w, 0.0, None))


def sample_parameters(arm: ArmPosterior, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``theta`` from the arm posterior (``size`` draws stacked, if given)."""
    L = _sqrt_cov(arm.covariance)
    z = rng.standard_normal(arm.dimension if size is None else (size, arm.dimension))
    return arm.mean + z @ L.T


def score(theta, context) -> float:
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(context, dtype=float)
    if theta.shape != x.shape:
        raise ValueError(f"dimension mismatch: {theta.shape} vs {x.shape}")
    return float(theta @ x)


def _score_moments(model: BanditModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    means = np.array([a.mean @ x for a in model.arms])
    sds = np.sqrt(np.clip([x @ a.covariance @ x for a in model.arms], 0.0, None))
    return means, sds


def propensities(
    model: BanditModel, context, n_samples: int = 1024, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Monte Carlo probability of each arm being the Thompson argmax.

    For a fixed context the sampled score ``theta_k . x`` is Gaussian with
    mean ``mu_k . x`` and variance ``x' S_k x``, so scores are drawn directly.
    Each probability is floored at ``1 / (n_samples + 1)``.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    rng = model.rng if rng is None else rng
    x = np.asarray(context, dtype=float)
    means, sds = _score_moments(model, x)
    draws = means + sds * rng.standard_normal((n_samples, model.num_arms))
    wins = np.bincount(np.argmax(draws, axis=1), minlength=model.num_arms)
    return np.maximum(wins / n_samples, 1.0 / (n_samples + 1))


def estimate_propensity(
    model: BanditModel,
    context,
    arm: int,
    n_samples: int = 1024,
    rng: np.random.Generator | None = None,
) -> float:
    """Probability that ``arm`` (1-based id) wins the Thompson draw at ``context``."""
    model.arm(arm)
    return float(propensities(model, context, n_samples, rng)[arm - 1])


def select_arm(
    model: BanditModel,
    context,
    n_propensity_samples: int = 1024,
    rng: np.random.Generator | None = None,
    decision_id: str | None = None,
) -> Decision:
    """One Thompson decision: a posterior draw per arm, play the argmax.

    Ties go to the lowest arm id.
    """
    rng = model.rng if rng is None else rng
    x = np.asarray(context, dtype=float)
    if x.shape != (model.dimension,):
        raise ValueError(f"context has shape {x.shape}, expected ({model.dimension},)")
    scores = np.array([score(sample_parameters(a, rng), x) for a in model.arms])
    chosen = int(np.argmax(scores)) + 1
    p = estimate_propensity(model, x, chosen, n_propensity_samples, rng)
    if decision_id is None:
        decision_id = f"d{next(model._decision_counter)}"
    return Decision(tuple(x.tolist()), chosen, tuple(scores.tolist()), p, decision_id)


def select_arms(
    model: BanditModel,
    X,
    n_propensity_samples: int = 1024,
    rng: np.random.Generator | None = None,
    decision_ids: Sequence[str] | None = None,
) -> list[Decision]:
    """Batched :func:`select_arm` for the rows of ``X``.

    Same decision rule and propensity estimator, vectorised over contexts;
    the random stream is consumed in a different order than row-by-row calls.
    """
    if n_propensity_samples < 100:
        raise ValueError("n_samples must be >= 100")
    rng = model.rng if rng is None else rng
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dimension:
        raise ValueError(f"contexts have {X.shape[1]} columns, expected {model.dimension}")
    n, K = X.shape[0], model.num_arms
    scores = np.stack([np.einsum("ij,ij->i", sample_parameters(a, rng, size=n), X) for a in model.arms], axis=1)
    chosen = np.argmax(scores, axis=1)
    means = np.stack([X @ a.mean for a in model.arms], axis=1)
    sds = np.sqrt(np.clip(np.stack([np.einsum("ij,jk,ik->i", X, a.covariance, X) for a in model.arms], axis=1), 0, None))
    draws = means[:, None, :] + sds[:, None, :] * rng.standard_normal((n, n_propensity_samples, K))
    winner = np.argmax(draws, axis=2)
    wins = (winner == chosen[:, None]).sum(axis=1)
    props = np.maximum(wins / n_propensity_samples, 1.0 / (n_propensity_samples + 1))
    if decision_ids is None:
        decision_ids = [f"d{next(model._decision_counter)}" for _ in range(n)]
    return [
        Decision(tuple(X[i].tolist()), int(chosen[i]) + 1, tuple(scores[i].tolist()), float(props[i]), decision_ids[i])
        for i in range(n)
    ]


def posterior_mean_scores(model: BanditModel, X) -> np.ndarray:
    """``(n, K)`` matrix of ``mu_k . x``; used for deterministic evaluation."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    M = np.stack([a.mean for a in model.arms], axis=1)
    return X @ M


def recommend(model: BanditModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Greedy posterior-mean recommendation: ``(arm ids, scores)`` per row."""
    S = posterior_mean_scores(model, X)
    best = np.argmax(S, axis=1)
    return best + 1, S[np.arange(len(S)), best]


def _update_arm(arm: ArmPosterior, X: np.ndarray, y: np.ndarray) -> ArmPosterior:
    s2 = arm.noise_variance
    try:
        prior_prec = linalg.inv(arm.covariance)
        prec = prior_prec + (X.T @ X) / s2
        prec = (prec + prec.T) / 2
        cho = linalg.cho_factor(prec, lower=True)
        cov = linalg.cho_solve(cho, np.eye(arm.dimension))
        cov = (cov + cov.T) / 2
        mean = cov @ (prior_prec @ arm.mean + X.T @ y / s2)
    except (linalg.LinAlgError, ValueError) as exc:
        raise PosteriorUpdateError(f"posterior solve failed: {exc}") from exc
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise PosteriorUpdateError("posterior solve produced non-finite values")
    return ArmPosterior(mean, cov, s2, arm.observation_count + len(y))


def batch_update(model: BanditModel, examples: Sequence[TrainingExample]) -> BanditModel:
    """Conjugate Gaussian update of every arm on its own examples.

    ``cov' = (cov^-1 + X'X / s2)^-1`` and
    ``mean' = cov' (cov^-1 mean + X'y / s2)``. Arms without examples keep
    their posterior. Returns a new model sharing the random stream.
    """
    if len(examples) == 0:
        return model
    X = np.array([e.context for e in examples], dtype=float)
    arms = np.array([e.arm for e in examples], dtype=int)
    y = np.array([e.incremental_target for e in examples], dtype=float)
    return batch_update_arrays(model, X, arms, y)


def batch_update_arrays(model: BanditModel, X, arms, y) -> BanditModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    arms = np.asarray(arms, dtype=int)
    y = np.asarray(y, dtype=float)
    if X.shape[1] != model.dimension:
        raise ValueError(f"examples have dimension {X.shape[1]}, model has {model.dimension}")
    if np.any((arms < 1) | (arms > model.num_arms)):
        raise ValueError(f"example arms must lie in 1..{model.num_arms}")
    new_arms = list(model.arms)
    for k in np.unique(arms):
        rows = arms == k
        new_arms[k - 1] = _update_arm(model.arms[k - 1], X[rows], y[rows])
    return replace(model, arms=tuple(new_arms))


# -- closed loop --------------------------------------------------------------


class Environment(Protocol):
    dimension: int

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def realize_outcomes(self, X: np.ndarray, arms: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


class LogReplayEnvironment:
    """Replays a logged dataset as an environment.

    Contexts are served in log order. An outcome is revealed only when the
    chosen arm equals the logged arm; otherwise it is ``nan`` and the round's
    event is discarded (replay method).
    """

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.dimension = dataset.dimension
        self._cursor = 0
        self._served: list[int] = []

    def sample_contexts(self, n: int, rng=None) -> np.ndarray:
        idx = (self._cursor + np.arange(n)) % len(self.dataset)
        self._cursor += n
        self._served = idx.tolist()
        return self.dataset.contexts[idx]

    def realize_outcomes(self, X, arms, rng=None) -> np.ndarray:
        idx = np.asarray(self._served)
        logged = self.dataset.arms[idx]
        return np.where(np.asarray(arms) == logged, self.dataset.outcomes[idx], np.nan)


@dataclass
class LoopResult:
    model: BanditModel
    decisions: list[Decision]
    rewards: list[dict]
    log: Dataset | None


def run_loop(
    model: BanditModel,
    environment,
    generation: GenerationConfig = GenerationConfig(),
    rounds: int = 50,
    batch_size: int = 200,
    delay: int = 1,
    seed: int = 0,
    n_propensity_samples: int = 1024,
) -> LoopResult:
    """Online scoring with batch retraining.

    Round ``t`` scores ``batch_size`` fresh contexts with Thompson draws and
    logs ``(x, arm, propensity)``. Outcomes of round ``t`` join the log at the
    end of round ``t + delay``; the model is then refitted from the initial
    prior on incremental targets regenerated over the whole available log.

    The reward log holds one dict per decision with the realised outcome
    and, when the environment exposes ``optimal_arms``/``true_cates``, the
    optimal arm and the true effect of the chosen one.
    """
    if delay < 0:
        raise ValueError("delay must be >= 0")
    prior = model
    rng = np.random.default_rng(seed)
    ctx_rng, out_rng, gen_seeds = (np.random.default_rng(s) for s in rng.spawn(3))
    decisions: list[Decision] = []
    rewards: list[dict] = []
    pending: list[tuple[int, list[LoggedEvent]]] = []
    log_events: list[LoggedEvent] = []
    next_id = 0
    num_arms = model.num_arms
    for t in range(1, rounds + 1):
        X = environment.sample_contexts(batch_size, ctx_rng)
        round_decisions = select_arms(
            model, X, n_propensity_samples, decision_ids=[f"r{t}-{m}" for m in range(len(X))]
        )
        decisions.extend(round_decisions)
        arms = np.array([d.chosen_arm for d in round_decisions])
        y = environment.realize_outcomes(X, arms, out_rng)
        optimal = environment.optimal_arms(X) if hasattr(environment, "optimal_arms") else None
        cates = environment.true_cates(X) if hasattr(environment, "true_cates") else None
        events = []
        for m, d in enumerate(round_decisions):
            rec = {"round": t, "decision_id": d.decision_id, "arm": d.chosen_arm, "outcome": float(y[m])}
            if optimal is not None:
                rec["optimal_arm"] = int(optimal[m])
                rec["optimal"] = bool(optimal[m] == d.chosen_arm)
            if cates is not None:
                rec["true_cate"] = float(cates[m, d.chosen_arm - 1])
                rec["regret"] = float(cates[m].max() - cates[m, d.chosen_arm - 1])
            rewards.append(rec)
            if np.isfinite(y[m]):
                events.append(LoggedEvent(d.context, d.chosen_arm, d.propensity_estimate, float(y[m]), next_id))
                next_id += 1
        pending.append((t + delay, events))
        arrived = [ev for due, ev in pending if due <= t]
        pending = [(due, ev) for due, ev in pending if due > t]
        for ev in arrived:
            log_events.extend(ev)
        if arrived and log_events:
            log = Dataset.from_events(log_events, num_arms=num_arms, dimension=model.dimension)
            cfg = replace(generation, sample_size=None, rng_seed=int(gen_seeds.integers(2**31)))
            result = generate_training_data(log, cfg)
            fitted = batch_update(prior, result.examples)
            model = replace(fitted, rng=model.rng, _decision_counter=model._decision_counter)
    log = Dataset.from_events(log_events, num_arms=num_arms, dimension=model.dimension) if log_events else None
    return LoopResult(model=model, decisions=decisions, rewards=rewards, log=log)


# -- persistence --------------------------------------------------------------


def model_to_dict(model: BanditModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": "bandit",
        "d": model.dimension,
        "K": model.num_arms,
        "noise_variance": model.noise_variance,
        "prior_variance": model.prior_variance,
        "seed": model.seed,
        "arms": [
            {
                "mean": a.mean.tolist(),
                "covariance": a.covariance.ravel().tolist(),
                "observation_count": a.observation_count,
            }
            for a in model.arms
        ],
    }


def model_from_dict(body: dict) -> BanditModel:
    if body.get("format") != MODEL_FORMAT or body.get("kind") != "bandit":
        raise ValueError("not a bandit model snapshot")
    if body.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {body.get('version')}")
    d = int(body["d"])
    arms = tuple(
        ArmPosterior(
            np.array(a["mean"], dtype=float),
            np.array(a["covariance"], dtype=float).reshape(d, d),
            float(body["noise_variance"]),
            int(a["observation_count"]),
        )
        for a in body["arms"]
    )
    if len(arms) != int(body["K"]):
        raise ValueError("arm count does not match K")
    return BanditModel(arms=arms, dimension=d, seed=int(body.get("seed", 0)),
                       prior_variance=float(body.get("prior_variance", 1.0)))


def save_model(model: BanditModel, path, extra: dict | None = None) -> Path:
    body = model_to_dict(model)
    if extra:
        body.update(extra)
    path = Path(path)
    path.write_text(json.dumps(body, indent=1) + "\n", encoding="utf-8")
    return path


def load_model(path) -> BanditModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_decision_log(decisions: Sequence[Decision], path) -> Path:
    """Write one JSON line per decision.

    The file is created exclusively: an existing log is never overwritten
    (``FileExistsError``), so concurrent writers cannot clobber each other.
    """
    path = Path(path)
    with open(path, "x", encoding="utf-8", newline="\n") as fh:
        for d in decisions:
            fh.write(
                json.dumps(
                    {
                        "decision_id": d.decision_id,
                        "context": list(d.context),
                        "chosen_arm": d.chosen_arm,
                        "propensity_estimate": d.propensity_estimate,
                    }
                )
                + "\n"
            )
    return path


def read_decision_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
