"""End-to-end offline workflow: split, build targets, train, score, evaluate.

Three training modes share one scoring path:

``incremental``
    bandit fitted on matched-counterfactual incremental targets
``non-incremental``
    bandit fitted on inverse-propensity corrected outcomes
``two-model``
    per-campaign treatment regressions minus a control regression

Evaluation scores with posterior means (no Thompson noise) so reports are
deterministic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bandit as bd
from .baselines import TwoModel, fit_multi_arm_two_model, non_incremental_examples
from .data import Dataset
from .evaluation import ScoredPopulation, UpliftReport, uplift_report
from .features import f_value_select
from .simulator import SyntheticEnvironment, generate_log
from .targets import GenerationConfig, generate_training_data

logger = logging.getLogger(__name__)

MODES = ("incremental", "non-incremental", "two-model")

__all__ = [
    "MODES",
    "Policy",
    "TrainingConfig",
    "split_dataset",
    "training_examples",
    "train_policy",
    "select_features",
    "score_population",
    "top_decile_true_cate",
    "ExperimentOutcome",
    "run_offline_experiment",
    "save_policy",
    "load_policy",
]


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "incremental"
    m_prime: int = 10
    sample_size: int | None = None
    matching_mode: str = "exact"
    prior_variance: float = 1.0
    noise_variance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def generation(self) -> GenerationConfig:
        return GenerationConfig(
            sample_size=self.sample_size,
            neighbors=self.m_prime,
            rng_seed=self.seed,
            matching_mode=self.matching_mode,
        )


@dataclass(frozen=True, eq=False)
class Policy:
    """A trained scorer plus the context columns it reads (``None`` = all)."""

    model: object
    mode: str
    columns: tuple[int, ...] | None = None
    info: dict = field(default_factory=dict)

    def _view(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X if self.columns is None else X[:, list(self.columns)]

    def recommend(self, X) -> tuple[np.ndarray, np.ndarray]:
        """``(arm ids, scores)`` of the best campaign per row."""
        Z = self._view(X)
        if isinstance(self.model, TwoModel):
            return self.model.recommend(Z)
        return bd.recommend(self.model, Z)


def split_dataset(dataset: Dataset, train_fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; each part keeps log order."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


def training_examples(train: Dataset, config: TrainingConfig):
    """Examples and metadata for a bandit mode."""
    if config.mode == "incremental":
        gen = config.generation()
        result = generate_training_data(train, gen)
        return result.examples, result.metadata(gen)
    if config.mode == "non-incremental":
        ex = non_incremental_examples(train)
        return ex, {"mode": "non-incremental", "neighbor_matching": False, "examples": len(ex)}
    raise ValueError("two-model mode has no bandit training examples")


def _fit(train: Dataset, holdout_train: Dataset | None, config: TrainingConfig, columns=None) -> Policy:
    view = train if columns is None else train.select_columns(columns)
    if config.mode == "two-model":
        if holdout_train is None or len(holdout_train) == 0:
            raise ValueError("two-model mode needs control (holdout) training events")
        hview = holdout_train if columns is None else holdout_train.select_columns(columns)
        model = fit_multi_arm_two_model(view, hview, train.num_arms)
        return Policy(model, config.mode, None if columns is None else tuple(columns),
                      {"mode": config.mode, "control_events": len(holdout_train)})
    examples, meta = training_examples(view, config)
    prior = bd.init_model(view.dimension, train.num_arms, config.prior_variance, config.noise_variance, config.seed)
    model = bd.batch_update(prior, examples)
    return Policy(model, config.mode, None if columns is None else tuple(columns), meta)


def select_features(
    train: Dataset,
    holdout_train: Dataset | None,
    config: TrainingConfig,
    s_grid: Sequence[int],
    validation_fraction: float = 0.2,
) -> tuple[tuple[int, ...], dict]:
    """Pick the feature count S by validation uplift at rho = 0.1.

    Columns are ranked by F value against the mode's training target on the
    fitting part; one policy per S is trained there and evaluated on the
    validation part.
    """
    fit_part, val_part = split_dataset(train, 1 - validation_fraction, config.seed + 1)
    if holdout_train is None or len(holdout_train) < 20:
        raise ValueError("feature selection needs holdout events for validation uplift")
    h_fit, h_val = split_dataset(holdout_train, 1 - validation_fraction, config.seed + 1)
    if config.mode == "two-model":
        X, y = fit_part.contexts[fit_part.arms != 0], fit_part.outcomes[fit_part.arms != 0]
    else:
        ex, _ = training_examples(fit_part, config)
        X = np.array([e.context for e in ex])
        y = np.array([e.incremental_target for e in ex])
    grid = sorted({min(int(s), train.dimension) for s in s_grid})
    scores = {}
    best = None
    for S in grid:
        cols, _ = f_value_select(X, y, S)
        cols = tuple(sorted(cols.tolist()))
        policy = _fit(fit_part, h_fit, config, cols)
        report = uplift_report(score_population(policy, val_part, h_val))
        u = report.at(0.1)
        scores[S] = u
        if best is None or (np.isfinite(u) and u > scores[best[0]]):
            best = (S, cols)
    return best[1], {"s_grid": grid, "criterion": "validation uplift at rho=0.1",
                     "validation_uplift": {str(k): v for k, v in scores.items()}, "chosen_S": best[0]}


def train_policy(
    train: Dataset,
    config: TrainingConfig,
    holdout_train: Dataset | None = None,
    s_grid: Sequence[int] | None = None,
) -> Policy:
    """Train one policy; with ``s_grid`` the feature count is chosen first."""
    if s_grid:
        cols, sel_info = select_features(train, holdout_train, config, s_grid)
        policy = _fit(train, holdout_train, config, cols)
        policy.info["feature_selection"] = sel_info
        return policy
    return _fit(train, holdout_train, config)


def score_population(policy: Policy, treatment: Dataset, holdout: Dataset) -> ScoredPopulation:
    """Score treated and holdout customers; rows are treated first, then holdout."""
    X = np.vstack([treatment.contexts, holdout.contexts])
    arms, scores = policy.recommend(X)
    treated = np.concatenate([np.ones(len(treatment), bool), np.zeros(len(holdout), bool)])
    observed = np.concatenate([treatment.arms, np.zeros(len(holdout), int)])
    y = np.concatenate([treatment.outcomes, holdout.outcomes])
    return ScoredPopulation.from_arrays(treated, arms, scores, observed, y, X)


def top_decile_true_cate(pop: ScoredPopulation, env: SyntheticEnvironment, fraction: float = 0.1) -> float:
    """Mean true effect of the recommended campaign over the top-scored fraction."""
    order = pop.ranking()
    top = order[: max(1, int(np.ceil(fraction * len(pop))))]
    cates = env.true_cates(pop.contexts[top])
    return float(cates[np.arange(len(top)), pop.recommended_arm[top] - 1].mean())


@dataclass
class ExperimentOutcome:
    policy: Policy
    report: UpliftReport
    top_decile_true_cate: float


def run_offline_experiment(
    env: SyntheticEnvironment,
    seed: int,
    modes: Sequence[str] = ("incremental", "non-incremental"),
    n_events: int = 60000,
    holdout_fraction: float = 1 / 6,
    m_prime: int = 10,
    prior_variance: float = 1.0,
    noise_variance: float = 1.0,
) -> dict[str, ExperimentOutcome]:
    """Simulate a uniform-random campaign log, split 70:30, train every mode
    on the same training split and evaluate on the same test split."""
    treat, hold = generate_log(env, n_events, holdout_fraction, seed=seed)
    t_train, t_test = split_dataset(treat, 0.7, seed)
    h_train, h_test = split_dataset(hold, 0.7, seed)
    out = {}
    for mode in modes:
        cfg = TrainingConfig(mode=mode, m_prime=m_prime, prior_variance=prior_variance,
                             noise_variance=noise_variance, seed=seed)
        policy = train_policy(t_train, cfg, h_train)
        pop = score_population(policy, t_test, h_test)
        out[mode] = ExperimentOutcome(policy, uplift_report(pop), top_decile_true_cate(pop, env))
    return out


# -- persistence --------------------------------------------------------------


def save_policy(policy: Policy, path) -> Path:
    extra = {"mode": policy.mode, "columns": None if policy.columns is None else list(policy.columns),
             "info": policy.info}
    if isinstance(policy.model, TwoModel):
        body = {"format": bd.MODEL_FORMAT, "version": bd.MODEL_VERSION, "kind": "two-model",
                "d": policy.model.dimension, "K": policy.model.num_arms, "two_model": policy.model.to_dict()}
        body.update(extra)
        path = Path(path)
        path.write_text(json.dumps(body, indent=1, default=_json_default) + "\n", encoding="utf-8")
        return path
    return bd.save_model(policy.model, path, json.loads(json.dumps(extra, default=_json_default)))


def load_policy(path) -> Policy:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    if body.get("format") != bd.MODEL_FORMAT:
        raise ValueError(f"{path}: not a model snapshot")
    cols = body.get("columns")
    cols = None if cols is None else tuple(int(c) for c in cols)
    if body.get("kind") == "two-model":
        model = TwoModel.from_dict(body["two_model"])
    else:
        model = bd.model_from_dict(body)
    return Policy(model, body.get("mode", "incremental"), cols, body.get("info", {}))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")
