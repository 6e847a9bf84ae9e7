import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalbandit.data import (
    Dataset,
    DataValidationError,
    LoggedEvent,
    events_from_records,
    read_event_log,
    validate_dataset,
    validate_records,
    write_event_log,
)


def rec(ctx=(0.1, 0.2), arm=1, p=0.5, y=1.0, **kw):
    r = {"context": list(ctx), "arm": arm, "propensity": p, "outcome": y}
    r.update(kw)
    return r


def test_valid_dataset_is_ok():
    ds = Dataset.from_arrays(np.random.default_rng(0).random((20, 3)), [1, 2] * 10, [0.5] * 20, np.ones(20))
    report = validate_dataset(ds)
    assert report.ok and bool(report)


def test_zero_propensity_names_event():
    report = validate_records([rec(event_id=1), rec(p=0.0, event_id=7)])
    assert not report.ok
    (v,) = report.violations
    assert v.event_id == 7 and v.field == "propensity"


def test_propensity_one_allowed_above_one_rejected():
    assert validate_records([rec(p=1.0)]).ok
    assert not validate_records([rec(p=1.0000001)]).ok


def test_dimension_mismatch_reported():
    report = validate_records([rec(ctx=(0.1, 0.2), event_id=0), rec(ctx=(0.1, 0.2, 0.3), event_id=1)])
    assert [(v.event_id, v.field) for v in report.violations] == [(1, "context")]


def test_arm_out_of_range():
    report = validate_records([rec(arm=5)], num_arms=4)
    assert report.violations[0].field == "arm"
    assert not validate_records([rec(arm=-1)]).ok


def test_validation_is_total_on_garbage():
    records = [
        rec(ctx=("a", None)),
        rec(p="x"),
        rec(y=float("nan")),
        rec(arm=1.5),
        {"nothing": True},
        "not a dict",
        rec(event_id="abc"),
        rec(p=True),
    ]
    report = validate_records(records)
    assert len(report.violations) >= len(records)


def test_duplicate_event_ids():
    report = validate_records([rec(event_id=3), rec(event_id=3)])
    assert any(v.field == "event_id" for v in report.violations)


def test_missing_event_ids_assigned_monotonically():
    ds = events_from_records([rec(), rec(event_id=10), rec(), rec()])
    assert ds.event_ids.tolist() == [0, 10, 11, 12]


def test_ingestion_rejects_instead_of_clamping():
    with pytest.raises(DataValidationError) as err:
        events_from_records([rec(p=0.0, event_id=4)])
    assert err.value.violations[0].event_id == 4


def test_columnar_views_agree_with_records():
    rng = np.random.default_rng(1)
    X = rng.random((5, 2))
    ds = Dataset.from_arrays(X, [0, 1, 2, 1, 0], [1, 0.5, 0.5, 0.5, 1], [1, 2, 3, 4, 5], [9, 8, 7, 6, 5])
    assert np.array_equal(ds.contexts, X)
    assert ds[2] == LoggedEvent(tuple(X[2]), 2, 0.5, 3.0, 7)
    assert ds.position_of[6] == 3
    assert not ds.contexts.flags.writeable


def test_subset_and_select_columns():
    ds = Dataset.from_arrays(np.arange(12.0).reshape(4, 3) / 12, [1, 2, 1, 2], [0.5] * 4, [1, 2, 3, 4])
    sub = ds.subset([3, 1])
    assert sub.event_ids.tolist() == [3, 1]
    proj = ds.select_columns([2, 0])
    assert proj.dimension == 2
    assert np.array_equal(proj.contexts, ds.contexts[:, [2, 0]])


def test_file_keys_and_field_order(tmp_path):
    path = tmp_path / "log.jsonl"
    lines = [
        json.dumps({"outcome": 1.5, "arm": 2, "context": [0.25, 0.5], "propensity": 0.5}),
        json.dumps({"propensity": 1.0, "context": [0.75, 0.0], "outcome": 0.0, "arm": 0, "event_id": 5}),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    ds = read_event_log(path)
    assert ds.event_ids.tolist() == [0, 5]
    assert ds[0].arm == 2 and ds[1].propensity == 1.0


def test_unparseable_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json}\n", encoding="utf-8")
    with pytest.raises(DataValidationError):
        read_event_log(path)


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 4).flatmap(
        lambda d: st.lists(
            st.tuples(
                st.lists(finite, min_size=d, max_size=d),
                st.integers(0, 3),
                st.floats(min_value=1e-9, max_value=1.0, exclude_min=False),
                finite,
            ),
            min_size=1,
            max_size=15,
        )
    )
)
def test_round_trip_is_exact(tmp_path_factory, rows):
    events = [LoggedEvent(tuple(c), a, p, y, i) for i, (c, a, p, y) in enumerate(rows)]
    ds = Dataset.from_events(events, num_arms=3)
    path = tmp_path_factory.mktemp("rt") / "log.jsonl"
    write_event_log(ds, path)
    back = read_event_log(path, num_arms=3)
    assert back == ds
    for a, b in zip(ds, back):
        assert all(math.copysign(1, u) == math.copysign(1, v) for u, v in zip(a.context, b.context))
