"""Event-log data model shared by every other module.

A :class:`Dataset` is an ordered, immutable collection of :class:`LoggedEvent`
records ``(context, arm, propensity, outcome, event_id)``. Arm ``0`` is the
reserved no-treatment indicator; arms ``1..K`` are campaigns.

Columnar numpy views (``contexts``, ``arms``, ...) are built lazily and cached,
so the record view and the array view never disagree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "LoggedEvent",
    "TrainingExample",
    "Dataset",
    "Violation",
    "ValidationReport",
    "DataValidationError",
    "validate_dataset",
    "validate_records",
    "read_event_log",
    "write_event_log",
    "events_from_records",
]


class DataValidationError(ValueError):
    """Raised at ingestion when records violate the event-log invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        more = len(self.violations) - 5
        if more > 0:
            head += f"; ... ({more} more)"
        super().__init__(f"{len(self.violations)} invalid record(s): {head}")


@dataclass(frozen=True)
class LoggedEvent:
    context: tuple[float, ...]
    arm: int
    propensity: float
    outcome: float
    event_id: int


@dataclass(frozen=True)
class TrainingExample:
    context: tuple[float, ...]
    arm: int
    incremental_target: float


@dataclass(frozen=True)
class Violation:
    event_id: Any
    field: str
    message: str

    def __str__(self) -> str:
        return f"event {self.event_id}: {self.field}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True, eq=True)
class Dataset:
    """Ordered collection of logged events.

    Parameters
    ----------
    events : tuple of LoggedEvent
        Records in log order.
    dimension : int
        Context dimensionality ``d`` shared by all events.
    num_arms : int
        Number of campaigns ``K``; valid arms are ``0..K``.
    """

    events: tuple[LoggedEvent, ...]
    dimension: int
    num_arms: int
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[LoggedEvent]:
        return iter(self.events)

    def __getitem__(self, i: int) -> LoggedEvent:
        return self.events[i]

    @classmethod
    def from_events(
        cls,
        events: Iterable[LoggedEvent],
        num_arms: int | None = None,
        dimension: int | None = None,
    ) -> "Dataset":
        events = tuple(events)
        if dimension is None:
            dimension = len(events[0].context) if events else 1
        if num_arms is None:
            num_arms = max([1] + [e.arm for e in events])
        return cls(events=events, dimension=int(dimension), num_arms=int(num_arms))

    @classmethod
    def from_arrays(
        cls,
        contexts,
        arms,
        propensities,
        outcomes,
        event_ids=None,
        num_arms: int | None = None,
        validate: bool = True,
    ) -> "Dataset":
        """Build a dataset from columnar arrays.

        ``event_ids`` default to ``0..n-1``. With ``validate=True`` (the
        default) invalid records raise :class:`DataValidationError`.
        """
        X = np.atleast_2d(np.asarray(contexts, dtype=float))
        arms = np.asarray(arms).astype(int).ravel()
        p = np.asarray(propensities, dtype=float).ravel()
        y = np.asarray(outcomes, dtype=float).ravel()
        n = X.shape[0]
        if not (len(arms) == len(p) == len(y) == n):
            raise ValueError("contexts, arms, propensities and outcomes differ in length")
        ids = np.arange(n) if event_ids is None else np.asarray(event_ids).astype(int).ravel()
        if num_arms is None:
            num_arms = max(1, int(arms.max()) if n else 1)
        events = tuple(
            LoggedEvent(ctx, a, pr, out, eid)
            for ctx, a, pr, out, eid in zip(
                map(tuple, X.tolist()), arms.tolist(), p.tolist(), y.tolist(), ids.tolist()
            )
        )
        ds = cls(events=events, dimension=X.shape[1], num_arms=int(num_arms))
        if validate:
            report = validate_dataset(ds)
            if not report.ok:
                raise DataValidationError(report.violations)
        return ds

    def _column(self, name: str, build):
        if name not in self._cache:
            arr = build()
            arr.setflags(write=False)
            self._cache[name] = arr
        return self._cache[name]

    @property
    def contexts(self) -> np.ndarray:
        """``(n, d)`` float array of contexts."""
        return self._column(
            "contexts",
            lambda: np.array([e.context for e in self.events], dtype=float).reshape(
                len(self.events), self.dimension
            ),
        )

    @property
    def arms(self) -> np.ndarray:
        return self._column("arms", lambda: np.array([e.arm for e in self.events], dtype=int))

    @property
    def propensities(self) -> np.ndarray:
        return self._column(
            "propensities", lambda: np.array([e.propensity for e in self.events], dtype=float)
        )

    @property
    def outcomes(self) -> np.ndarray:
        return self._column(
            "outcomes", lambda: np.array([e.outcome for e in self.events], dtype=float)
        )

    @property
    def event_ids(self) -> np.ndarray:
        return self._column(
            "event_ids", lambda: np.array([e.event_id for e in self.events], dtype=np.int64)
        )

    @cached_property
    def position_of(self) -> dict[int, int]:
        """Map event_id to its position in the log."""
        return {e.event_id: i for i, e in enumerate(self.events)}

    def subset(self, indices) -> "Dataset":
        """Dataset with the events at ``indices`` (positions), in that order."""
        idx = np.asarray(indices, dtype=int).ravel()
        return Dataset(
            events=tuple(self.events[i] for i in idx.tolist()),
            dimension=self.dimension,
            num_arms=self.num_arms,
        )

    def select_columns(self, columns: Sequence[int]) -> "Dataset":
        """Project every context onto ``columns``."""
        cols = list(columns)
        X = self.contexts[:, cols]
        return Dataset(
            events=tuple(
                LoggedEvent(tuple(row), e.arm, e.propensity, e.outcome, e.event_id)
                for row, e in zip(X.tolist(), self.events)
            ),
            dimension=len(cols),
            num_arms=self.num_arms,
        )


def _is_real(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def _check_record(rec, dimension, num_arms, eid) -> list[Violation]:
    out: list[Violation] = []
    ctx = rec.get("context")
    if not isinstance(ctx, (list, tuple, np.ndarray)) or len(ctx) == 0:
        out.append(Violation(eid, "context", "missing or empty"))
    else:
        if not all(_is_real(v) and math.isfinite(v) for v in ctx):
            out.append(Violation(eid, "context", "non-finite or non-numeric value"))
        if dimension is not None and len(ctx) != dimension:
            out.append(Violation(eid, "context", f"dimension {len(ctx)} != {dimension}"))
    arm = rec.get("arm")
    if not isinstance(arm, (int, np.integer)) or isinstance(arm, bool):
        out.append(Violation(eid, "arm", f"not an integer: {arm!r}"))
    elif arm < 0 or (num_arms is not None and arm > num_arms):
        out.append(Violation(eid, "arm", f"{arm} outside 0..{num_arms}"))
    p = rec.get("propensity")
    if not _is_real(p) or not math.isfinite(p):
        out.append(Violation(eid, "propensity", f"not a finite number: {p!r}"))
    elif not (0.0 < p <= 1.0):
        out.append(Violation(eid, "propensity", f"{p} outside (0, 1]"))
    y = rec.get("outcome")
    if not _is_real(y) or not math.isfinite(y):
        out.append(Violation(eid, "outcome", f"not a finite number: {y!r}"))
    return out


def validate_records(
    records: Iterable[dict], dimension: int | None = None, num_arms: int | None = None
) -> ValidationReport:
    """Check raw record dicts against the event-log invariants.

    Never raises on malformed fields; every problem becomes a
    :class:`Violation`. When ``dimension`` is ``None`` the first record with a
    usable context fixes it.
    """
    violations: list[Violation] = []
    seen: set = set()
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            violations.append(Violation(i, "record", "not an object"))
            continue
        eid = rec.get("event_id", i)
        if dimension is None:
            ctx = rec.get("context")
            if isinstance(ctx, (list, tuple)) and len(ctx) > 0:
                dimension = len(ctx)
        violations.extend(_check_record(rec, dimension, num_arms, eid))
        if rec.get("event_id") is not None and (not isinstance(eid, (int, np.integer)) or isinstance(eid, bool)):
            violations.append(Violation(eid, "event_id", f"not an integer: {eid!r}"))
            continue
        if eid in seen:
            violations.append(Violation(eid, "event_id", "duplicate"))
        seen.add(eid)
    return ValidationReport(tuple(violations))


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Return every invariant violation in ``dataset`` (empty report when valid)."""
    records = (
        {
            "context": e.context,
            "arm": e.arm,
            "propensity": e.propensity,
            "outcome": e.outcome,
            "event_id": e.event_id,
        }
        for e in dataset.events
    )
    return validate_records(records, dataset.dimension, dataset.num_arms)


def events_from_records(
    records: Sequence[dict], num_arms: int | None = None, dimension: int | None = None
) -> Dataset:
    """Validate raw records and build a :class:`Dataset`.

    Missing ``event_id`` values are assigned as the next integer after the
    largest id seen so far (monotone in log order).
    """
    records = list(records)
    report = validate_records(records, dimension, num_arms)
    if not report.ok:
        raise DataValidationError(report.violations)
    events = []
    next_id = 0
    for rec in records:
        eid = rec.get("event_id")
        if eid is None:
            eid = next_id
        eid = int(eid)
        next_id = max(next_id, eid + 1)
        events.append(
            LoggedEvent(
                tuple(float(v) for v in rec["context"]),
                int(rec["arm"]),
                float(rec["propensity"]),
                float(rec["outcome"]),
                eid,
            )
        )
    ids = [e.event_id for e in events]
    if len(set(ids)) != len(ids):
        raise DataValidationError([Violation(None, "event_id", "duplicate after assignment")])
    return Dataset.from_events(events, num_arms=num_arms, dimension=dimension)


def read_event_log(path, num_arms: int | None = None) -> Dataset:
    """Read a JSON-lines event log; invalid records raise DataValidationError."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataValidationError(
                    [Violation(lineno, "record", f"unparseable line: {exc.msg}")]
                ) from exc
    return events_from_records(records, num_arms=num_arms)


def write_event_log(dataset: Dataset, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in dataset.events:
            fh.write(
                json.dumps(
                    {
                        "event_id": e.event_id,
                        "context": list(e.context),
                        "arm": e.arm,
                        "propensity": e.propensity,
                        "outcome": e.outcome,
                    }
                )
                + "\n"
            )
    return path
