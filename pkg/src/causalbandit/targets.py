"""Incremental training targets from logged events.

Each sampled event contributes ``y_obs / p`` (inverse-propensity corrected
outcome) minus the average corrected outcome of its nearest neighbours that
were shown a different arm. The difference is the customer-level incremental
effect of the arm the customer actually received.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, LoggedEvent, TrainingExample
from .matching import (
    EmptyPoolError,
    ExactIndex,
    build_exact_index,
    build_graph_index,
    query_counterfactual_neighbors,
)

logger = logging.getLogger(__name__)

__all__ = [
    "GenerationConfig",
    "GenerationResult",
    "bias_correct",
    "estimate_counterfactual",
    "incremental_target",
    "generate_training_data",
    "write_training_set",
    "read_training_set",
]


@dataclass(frozen=True)
class GenerationConfig:
    """Inputs of the target generator.

    ``sample_size=None`` draws as many examples as there are eligible
    events. ``neighbors`` is M' (default 10).
    """

    sample_size: int | None = None
    neighbors: int = 10
    rng_seed: int = 0
    matching_mode: str = "exact"
    train_on_control: bool = False
    ef_search: int = 64

    def __post_init__(self):
        if self.sample_size is not None and self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.matching_mode not in ("exact", "graph"):
            raise ValueError(f"matching_mode must be 'exact' or 'graph', got {self.matching_mode!r}")


@dataclass
class GenerationResult:
    examples: list[TrainingExample]
    skipped: int
    sampled_event_ids: list[int]
    neighbor_ids: list[tuple[int, ...]] = field(repr=False, default_factory=list)

    def metadata(self, config: GenerationConfig) -> dict:
        meta = asdict(config)
        meta.update(
            M=len(self.sampled_event_ids),
            M_prime=config.neighbors,
            seed=config.rng_seed,
            skipped=self.skipped,
            examples=len(self.examples),
        )
        return meta

    @property
    def contexts(self) -> np.ndarray:
        return np.array([e.context for e in self.examples], dtype=float)

    @property
    def arms(self) -> np.ndarray:
        return np.array([e.arm for e in self.examples], dtype=int)

    @property
    def targets(self) -> np.ndarray:
        return np.array([e.incremental_target for e in self.examples], dtype=float)


def bias_correct(outcome: float, propensity: float) -> float:
    """Inverse-propensity corrected outcome ``outcome / propensity``."""
    if not propensity > 0:
        raise ValueError(f"propensity must be > 0, got {propensity}")
    return outcome / propensity


def estimate_counterfactual(neighbors: Sequence[LoggedEvent]) -> float:
    """Mean corrected outcome of the matched neighbours.

    Divides by the number of neighbours actually supplied, not by a nominal
    M', so a short list does not deflate the estimate.
    """
    if len(neighbors) == 0:
        raise ValueError("empty neighbour list")
    return sum(bias_correct(e.outcome, e.propensity) for e in neighbors) / len(neighbors)


def incremental_target(corrected: float, counterfactual: float) -> float:
    return corrected - counterfactual


def _sample_positions(dataset: Dataset, config: GenerationConfig) -> np.ndarray:
    arms = dataset.arms
    candidates = np.arange(len(dataset)) if config.train_on_control else np.flatnonzero(arms != 0)
    if len(candidates) == 0:
        raise ValueError("no eligible events to sample")
    m = len(candidates) if config.sample_size is None else config.sample_size
    rng = np.random.default_rng(config.rng_seed)
    return candidates[rng.integers(0, len(candidates), size=m)]


def generate_training_data(
    dataset: Dataset, config: GenerationConfig = GenerationConfig(), index=None
) -> GenerationResult:
    """Turn a log into incremental-target training examples.

    Events are sampled with replacement under ``config.rng_seed``. An event
    whose counterfactual pool is empty is skipped and counted in
    ``result.skipped``. Output order follows the sampling order.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if index is None:
        if config.matching_mode == "graph":
            index = build_graph_index(dataset, rng_seed=config.rng_seed, ef_search=config.ef_search)
        else:
            index = build_exact_index(dataset)
    if not index.matches(dataset):
        raise ValueError("index was not built over this dataset")

    sampled = _sample_positions(dataset, config)
    corrected_all = dataset.outcomes / dataset.propensities
    m_prime = config.neighbors
    nbr_pos = np.full((len(sampled), m_prime), -1, dtype=np.int64)

    if isinstance(index, ExactIndex):
        # Exact neighbours depend only on the event, so repeated draws share one query.
        uniq, inverse = np.unique(sampled, return_inverse=True)
        uniq_nbrs = np.full((len(uniq), m_prime), -1, dtype=np.int64)
        arms = dataset.arms[uniq]
        for arm in np.unique(arms):
            rows = np.flatnonzero(arms == arm)
            pos, _ = index.query_batch(
                dataset.contexts[uniq[rows]],
                m_prime,
                exclude_arm=int(arm),
                exclude_events=dataset.event_ids[uniq[rows]],
            )
            uniq_nbrs[rows] = pos
        nbr_pos = uniq_nbrs[inverse.ravel()]
    else:
        position_of = dataset.position_of
        for r, s in enumerate(sampled.tolist()):
            e = dataset.events[s]
            try:
                nbrs = query_counterfactual_neighbors(
                    index, dataset, e.context, e.arm, m_prime, e.event_id, config.ef_search
                )
            except EmptyPoolError:
                continue
            nbr_pos[r, : len(nbrs)] = [position_of[n.event_id] for n in nbrs]

    examples: list[TrainingExample] = []
    neighbor_ids: list[tuple[int, ...]] = []
    skipped = 0
    valid = nbr_pos >= 0
    counts = valid.sum(axis=1)
    sums = np.where(valid, corrected_all[np.where(valid, nbr_pos, 0)], 0.0).sum(axis=1)
    event_ids = dataset.event_ids
    for r, s in enumerate(sampled.tolist()):
        if counts[r] == 0:
            skipped += 1
            continue
        e = dataset.events[s]
        target = incremental_target(corrected_all[s], sums[r] / counts[r])
        examples.append(TrainingExample(e.context, e.arm, float(target)))
        neighbor_ids.append(tuple(event_ids[nbr_pos[r, : counts[r]]].tolist()))
    if skipped:
        logger.warning("skipped %d sampled event(s) with an empty counterfactual pool", skipped)
    return GenerationResult(
        examples=examples,
        skipped=skipped,
        sampled_event_ids=event_ids[sampled].tolist(),
        neighbor_ids=neighbor_ids,
    )


def write_training_set(examples: Sequence[TrainingExample], path, metadata: dict | None = None) -> Path:
    """JSON lines: one ``{"meta": ...}`` header, then ``context/arm/target`` records."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"meta": metadata or {}}) + "\n")
        for ex in examples:
            fh.write(
                json.dumps({"context": list(ex.context), "arm": ex.arm, "target": ex.incremental_target})
                + "\n"
            )
    return path


def read_training_set(path) -> tuple[list[TrainingExample], dict]:
    examples = []
    meta: dict = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            rec = json.loads(line)
            if i == 0 and "meta" in rec:
                meta = rec["meta"]
                continue
            examples.append(
                TrainingExample(tuple(float(v) for v in rec["context"]), int(rec["arm"]), float(rec["target"]))
            )
    return examples, meta
