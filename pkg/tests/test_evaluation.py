import numpy as np
import pytest

from causalbandit.evaluation import (
    ScoredCustomer,
    ScoredPopulation,
    compare_policies,
    cohort_lift_curves,
    decile_report,
    default_rho_grid,
    lift_curve,
    read_curve_csv,
    read_decile_csv,
    replay_filter,
    uplift_curve,
    uplift_report,
    write_curve_csv,
    write_decile_csv,
)


def random_pop(n=500, seed=0, K=3):
    rng = np.random.default_rng(seed)
    treated = rng.random(n) < 0.6
    return ScoredPopulation.from_arrays(
        treated,
        rng.integers(1, K + 1, n),
        rng.normal(size=n),
        np.where(treated, rng.integers(1, K + 1, n), 0),
        rng.normal(size=n),
        rng.random((n, 2)),
    )


def test_customer_validation():
    with pytest.raises(ValueError):
        ScoredCustomer((0.0,), "other", 1, 0.0, 1, 0.0)
    with pytest.raises(ValueError):
        ScoredCustomer((0.0,), "holdout", 1, 0.0, 2, 0.0)


def test_replay_filter_keeps_matches_and_holdout():
    cs = [
        ScoredCustomer((0.0,), "treatment", 1, 0.5, 1, 1.0),
        ScoredCustomer((0.0,), "treatment", 2, 0.5, 1, 1.0),
        ScoredCustomer((0.0,), "holdout", 3, 0.5, None, 1.0),
    ]
    kept = replay_filter(cs)
    assert kept == [cs[0], cs[2]]
    pop = replay_filter(ScoredPopulation.from_customers(cs))
    assert len(pop) == 2 and pop.to_customers()[1].observed_arm == 0


def test_lift_curve_hand_example():
    scores = [5, 4, 3, 2, 1]
    y = [10, 0, 5, 0, 0]
    assert lift_curve(scores, y, [0.2, 0.4, 1.0]).tolist() == [10.0, 5.0, 3.0]
    assert lift_curve(scores, y, [0.2, 1.0], total=True).tolist() == [10.0, 15.0]
    # ceil(0.3 * 5) = 2 customers.
    assert lift_curve(scores, y, [0.3])[0] == 5.0
    with pytest.raises(ValueError):
        lift_curve(scores, y, [0.0])
    # Any positive rho covers at least one customer.
    assert lift_curve(scores, y, [0.1])[0] == 10.0


def test_lift_ties_keep_input_order():
    assert lift_curve([1, 1, 1], [3, 6, 9], [1 / 3])[0] == 3.0


def test_uplift_curve():
    assert uplift_curve([3, 2], [1, 1]).tolist() == [2, 1]
    with pytest.raises(ValueError):
        uplift_curve([1, 2], [1])


@pytest.mark.parametrize("seed", range(5))
def test_lift_at_decile_points_equals_cumulative_decile_means(seed):
    pop = random_pop(437 + seed, seed)
    dec = decile_report(pop)
    grid = np.arange(1, 11) / 10
    t, c = cohort_lift_curves(pop, grid, total=True)
    for j, rho in enumerate(grid):
        top = slice(9 - j, 10)
        assert t[j] == pytest.approx(np.sum(dec.treatment_means[top] * dec.treatment_counts[top]), abs=1e-10)
        assert c[j] == pytest.approx(np.sum(dec.control_means[top] * dec.control_counts[top]), abs=1e-10)
    tm, cm = cohort_lift_curves(pop, [0.1])
    assert tm[0] == pytest.approx(dec.treatment_means[9], abs=1e-10)
    assert cm[0] == pytest.approx(dec.control_means[9], abs=1e-10)


def test_decile_sizes_follow_ceil_cuts():
    pop = random_pop(95)
    dec = decile_report(pop)
    sizes = dec.treatment_counts + dec.control_counts
    bounds = [int(np.ceil(j * 9.5 - 1e-9)) for j in range(11)]
    assert sizes[::-1].tolist() == np.diff(bounds).tolist()
    assert sizes.sum() == 95


def test_decile_needs_both_cohorts():
    pop = ScoredPopulation.from_arrays([True] * 20, [1] * 20, np.arange(20.0), [1] * 20, np.zeros(20))
    with pytest.raises(ValueError):
        decile_report(pop)


def test_empty_decile_cohort_is_nan():
    n = 40
    treated = np.arange(n) < 20
    # Treated customers hold every top score, so the top decile has no controls.
    pop = ScoredPopulation.from_arrays(treated, [1] * n, -np.arange(n, dtype=float), [1] * n, np.ones(n))
    dec = decile_report(pop)
    assert np.isnan(dec.control_means[9])
    assert (10, "holdout") in dec.missing


def test_uplift_report_and_compare():
    pop = random_pop(2000, 3)
    rep = uplift_report(pop)
    assert np.allclose(rep.rho_grid, default_rho_grid())
    assert rep.at(0.1) == pytest.approx(rep.deciles.cate[9], abs=1e-10)
    same = compare_policies(rep, rep)
    assert same.dominance_fraction == 0.5 and all(v == 0 for v in same.gaps.values())
    shifted = uplift_report(ScoredPopulation.from_arrays(
        pop.treated, pop.recommended_arm, pop.score, pop.observed_arm, pop.outcome + pop.treated * 1.0))
    cmp = compare_policies(shifted, rep)
    assert cmp.dominance_fraction == 1.0
    assert cmp.gaps[1.0] == pytest.approx(1.0)
    with pytest.raises(KeyError):
        rep.at(0.005)


def test_compare_rejects_mismatched_grids():
    pop = random_pop(500)
    with pytest.raises(ValueError):
        compare_policies(uplift_report(pop), uplift_report(pop, rho_grid=[0.5, 1.0]))


def test_csv_round_trip(tmp_path):
    rep = uplift_report(random_pop(800, 1))
    dec = read_decile_csv(write_decile_csv(rep, tmp_path / "d.csv"))
    assert np.allclose(dec.cate, rep.decile_cate, atol=1e-6)
    assert np.array_equal(dec.treatment_counts, rep.decile_treatment_counts)
    cur = read_curve_csv(write_curve_csv(rep, tmp_path / "u.csv"))
    assert np.allclose(cur.uplift, rep.uplift, atol=1e-6)
    assert (tmp_path / "d.csv").read_text().splitlines()[0].startswith("decile,treatment_mean")
