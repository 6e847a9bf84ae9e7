import numpy as np
import pytest

from causalbandit.baselines import (
    DiscreteJoint,
    TwoModel,
    decomposed_cate,
    decomposition_components,
    direct_cate_discrete,
    empirical_decomposed_cate,
    fit_linear,
    fit_multi_arm_two_model,
    fit_single_model,
    fit_two_model,
    non_incremental_examples,
    non_incremental_target,
    random_discrete_joint,
    single_model_cate,
    transformed_outcome,
    transformed_outcome_expectation,
    two_model_cate,
)
from causalbandit.data import Dataset, LoggedEvent
from causalbandit.simulator import default_environment, generate_log


def test_non_incremental_target():
    ex = non_incremental_target(LoggedEvent((0.1,), 2, 0.25, 3.0, 0))
    assert ex.incremental_target == 12.0 and ex.arm == 2
    ds = Dataset.from_arrays([[0.0], [1.0]], [0, 1], [1.0, 0.5], [1.0, 2.0])
    assert [e.arm for e in non_incremental_examples(ds)] == [1]
    assert len(non_incremental_examples(ds, include_control=True)) == 2


def test_fit_linear_recovers_plane():
    rng = np.random.default_rng(0)
    X = rng.random((50, 3))
    m = fit_linear(X, X @ [1.0, -2.0, 0.5] + 4.0)
    assert np.allclose(m.weights, [1.0, -2.0, 0.5], atol=1e-10)
    assert m.intercept == pytest.approx(4.0, abs=1e-10) and m.ridge == 0.0


def test_fit_linear_rank_deficient_uses_ridge():
    X = np.ones((5, 2))
    m = fit_linear(X, np.arange(5.0))
    assert m.ridge == 1e-8
    assert np.all(np.isfinite(m.weights))
    with pytest.raises(ValueError):
        fit_linear(np.zeros((0, 2)), [])


def test_two_model_and_single_model_on_noiseless_data():
    rng = np.random.default_rng(1)
    Xt, Xc = rng.random((40, 2)), rng.random((40, 2))
    t = Dataset.from_arrays(Xt, [1] * 40, [1.0] * 40, Xt @ [2.0, 1.0] + 1.0)
    c = Dataset.from_arrays(Xc, [0] * 40, [1.0] * 40, Xc @ [1.0, 1.0], np.arange(40, 80))
    x = np.array([0.3, 0.6])
    assert two_model_cate(fit_two_model(t, c), x) == pytest.approx(0.3 + 1.0, abs=1e-10)
    # The pooled model has a constant effect equal to the indicator weight.
    assert np.isfinite(single_model_cate(fit_single_model(t, c), x))
    with pytest.raises(ValueError):
        fit_two_model(t, Dataset.from_events([], num_arms=1, dimension=2))


def test_multi_arm_two_model_round_trip():
    treat, hold = generate_log(default_environment(), 3000, 0.3, seed=0)
    tm = fit_multi_arm_two_model(treat, hold)
    assert tm.num_arms == 4 and tm.dimension == 10
    X = treat.contexts[:20]
    arms, best = tm.recommend(X)
    C = tm.cates(X)
    assert np.array_equal(arms, np.argmax(C, axis=1) + 1)
    assert np.allclose(best, C.max(axis=1))
    back = TwoModel.from_dict(tm.to_dict())
    assert np.allclose(back.cates(X), C, atol=0)


def test_transformed_outcome():
    assert transformed_outcome(2.0, 1, 0.5) == 4.0
    assert transformed_outcome(2.0, 0, 0.5) == -4.0
    for bad in ((1.0, 1, 0.0), (1.0, 1, 1.0), (1.0, 2, 0.5)):
        with pytest.raises(ValueError):
            transformed_outcome(*bad)


def test_decomposed_cate_examples():
    assert decomposed_cate(0.3, 0.1, 10.0, 0.0) == pytest.approx(2.0)
    assert decomposed_cate(0.2, 0.2, 5.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        decomposed_cate(1.2, 0.1, 1.0, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_decomposition_identity_on_random_joints(seed):
    joint = random_discrete_joint(np.random.default_rng(seed))
    for x in range(len(joint.p_x)):
        for k in range(1, joint.num_arms + 1):
            direct = direct_cate_discrete(joint, x, k)
            assert decomposed_cate(*decomposition_components(joint, x, k)) == pytest.approx(direct, abs=1e-10)
            assert transformed_outcome_expectation(joint, x, k) == pytest.approx(direct, abs=1e-10)


def test_discrete_joint_validation():
    good = random_discrete_joint(np.random.default_rng(0), n_x=2, num_arms=1, n_y=2)
    with pytest.raises(ValueError):
        DiscreteJoint(good.p_x * 2, good.p_w_given_x, good.p_h_given_xw, good.p_y_given_xh, good.y_values)
    assert good.full().sum() == pytest.approx(1.0)


def test_empirical_decomposition_converges():
    joint = random_discrete_joint(np.random.default_rng(3), n_x=1, num_arms=2, n_y=3)
    rng = np.random.default_rng(4)
    J = joint.full()[0]
    n = 200_000
    flat = rng.choice(J.size, size=n, p=J.ravel())
    w, h, yi = np.unravel_index(flat, J.shape)
    est = empirical_decomposed_cate(np.zeros(n), w, h, joint.y_values[yi], 0, 1)
    assert est == pytest.approx(direct_cate_discrete(joint, 0, 1), abs=0.1)
    with pytest.raises(ValueError):
        empirical_decomposed_cate(np.zeros(n), w, h, joint.y_values[yi], 5, 1)
