import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalbandit.features import (
    FittedPipeline,
    PipelineSpec,
    f_value_select,
    f_values,
    fit_pipeline,
    log1p_transform,
    min_max_apply,
    min_max_fit_apply,
    pairwise_products,
    winsorize_fit_apply,
)


def test_winsorize():
    (lo, hi), out = winsorize_fit_apply(np.arange(101.0), 1, 99)
    assert (lo, hi) == (1.0, 99.0)
    assert out[0] == 1.0 and out[-1] == 99.0 and out[50] == 50.0
    with pytest.raises(ValueError):
        winsorize_fit_apply([1.0], 50, 10)


def test_log1p():
    assert log1p_transform(0.0) == 0.0
    assert log1p_transform(np.e - 1) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        log1p_transform(-1.0)


def test_min_max():
    (lo, hi), out = min_max_fit_apply([2.0, 4.0, 6.0])
    assert (lo, hi) == (2.0, 6.0) and out.tolist() == [0.0, 0.5, 1.0]
    assert min_max_apply([0.0, 10.0], 2.0, 6.0).tolist() == [0.0, 1.0]
    assert min_max_apply([3.0, 3.0], 3.0, 3.0).tolist() == [0.0, 0.0]


def test_f_values():
    rng = np.random.default_rng(0)
    y = rng.normal(size=200)
    X = np.column_stack([y + 0.1 * rng.normal(size=200), rng.normal(size=200), np.ones(200), 2 * y])
    F = f_values(X, y)
    assert F[0] > F[1] and F[2] == 0.0 and np.isinf(F[3])
    r = np.corrcoef(X[:, 1], y)[0, 1]
    assert F[1] == pytest.approx(r * r * 198 / (1 - r * r))
    idx, _ = f_value_select(X, y, 2)
    assert idx.tolist() == [3, 0]
    with pytest.raises(ValueError):
        f_value_select(X, y, 5)


def test_f_select_ties_to_lower_index():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.5], [4.0, 4.0]])
    X[:, 1] = X[:, 0]
    idx, _ = f_value_select(X, [1, 3, 2, 5], 1)
    assert idx.tolist() == [0]


def test_pairwise_products():
    out = pairwise_products([[2.0, 3.0, 5.0]])
    assert out.tolist() == [[2.0, 3.0, 5.0, 6.0, 10.0, 15.0]]


def test_pipeline_frozen_on_train():
    rng = np.random.default_rng(1)
    X = rng.exponential(size=(300, 3))
    p = fit_pipeline(X, spec=PipelineSpec(log_transform_columns={1}))
    Z = p.transform(X)
    assert np.all((Z >= 0) & (Z <= 1))
    new = np.array([[1e6, 1e6, -1e6]])
    assert p.transform(new).tolist() == [[1.0, 1.0, 0.0]]
    # Refitting on other data would change bounds; transform must not.
    assert p.winsor_bounds == fit_pipeline(X, spec=PipelineSpec(log_transform_columns={1})).winsor_bounds
    with pytest.raises(ValueError):
        p.transform(np.zeros((1, 2)))


def test_pipeline_selection_and_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    X = rng.random((200, 4))
    y = 3 * X[:, 2] + 0.1 * rng.normal(size=200)
    p = fit_pipeline(X, y, PipelineSpec(select_top_s=2, interactions=True))
    assert p.selected[0] == 2 and p.transform(X).shape == (200, 2)
    back = FittedPipeline.load(p.save(tmp_path / "p.json"))
    assert np.array_equal(back.transform(X), p.transform(X))
    with pytest.raises(ValueError):
        fit_pipeline(X, None, PipelineSpec(select_top_s=2))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40))
def test_scaled_column_in_unit_interval(col):
    (_, _), out = min_max_fit_apply(col)
    assert np.all((out >= 0) & (out <= 1))
