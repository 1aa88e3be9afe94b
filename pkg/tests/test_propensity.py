import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from policyeval.data import DataError
from policyeval.propensity import (
    EMPIRICAL,
    PropensityConfig,
    PropensityModel,
    apply_floor,
    empirical_propensities,
    estimate_propensities,
    positivity_check,
    read_propensities,
    write_propensities,
)

from conftest import make_dataset, policy_for


def test_empirical_individual_counts():
    ds = make_dataset(["L1"] * 50 + ["L2"] * 30 + ["L3"] * 20, [0] * 100)
    assert np.allclose(empirical_propensities(ds, "individual").marginal, [0.5, 0.3, 0.2])
    assert np.allclose(empirical_propensities(ds, "case").marginal, [0.5, 0.3, 0.2])


def test_empirical_single_location():
    ds = make_dataset(["L1"] * 3, [0, 1, 0])
    assert empirical_propensities(ds).marginal.tolist() == [1.0]


def test_empirical_case_vs_individual():
    # cases of sizes {2,1,1} at L1, L1, L2
    ds = make_dataset(["L1", "L1", "L1", "L2"], [0] * 4, cases=["c1", "c1", "c2", "c3"])
    assert np.allclose(empirical_propensities(ds, "case").marginal, [2 / 3, 1 / 3])
    assert np.allclose(empirical_propensities(ds, "individual").marginal, [3 / 4, 1 / 4])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["L1", "L2", "L3"]), min_size=1, max_size=30), st.randoms())
def test_empirical_row_order_invariant(labels, rnd):
    ds = make_dataset(labels, [0] * len(labels))
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    ds2 = make_dataset(shuffled, [0] * len(labels))
    m1 = dict(zip(ds.location_ids, empirical_propensities(ds).marginal))
    m2 = dict(zip(ds2.location_ids, empirical_propensities(ds2).marginal))
    assert m1 == pytest.approx(m2, abs=1e-15)
    assert abs(sum(m1.values()) - 1) <= 1e-9


def _constant_cov_dataset(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice(["L1", "L2", "L3"], size=n, p=[0.5, 0.3, 0.2])
    return make_dataset(list(labels), [0] * n, X=np.ones((n, 2)))


def test_estimated_constant_covariates_match_empirical():
    ds = _constant_cov_dataset(1000, 0)
    est = estimate_propensities(ds, PropensityConfig(seed=0))
    emp = empirical_propensities(ds).marginal
    assert est.conditional.shape == (1000, 3)
    assert np.abs(est.conditional - emp).max() <= 0.02
    assert np.allclose(est.conditional.sum(axis=1), 1.0, atol=1e-9)


def test_estimated_converges_with_weak_regularization():
    ds = _constant_cov_dataset(10_000, 1)
    est = estimate_propensities(ds, PropensityConfig(C=1e6, seed=0))
    assert np.abs(est.conditional - empirical_propensities(ds).marginal).max() <= 0.01


def test_estimated_single_location():
    ds = make_dataset(["L1"] * 4, [0] * 4, X=np.arange(4.0))
    assert estimate_propensities(ds).conditional.tolist() == [[1.0]] * 4


def test_estimated_separable_is_floored():
    x = np.linspace(-3, 3, 400)
    labels = ["L1" if v < 0 else "L2" for v in x]
    ds = make_dataset(labels, [0] * 400, X=x)
    floor = 1e-3
    est = estimate_propensities(ds, PropensityConfig(C=1e4, floor=floor))
    assert est.conditional.min() >= floor - 1e-15
    assert est.conditional.max() <= 1 - floor + 1e-15
    # raw fit would be far more extreme than the floor
    assert est.conditional[0, 1] == pytest.approx(floor)


def test_estimated_is_deterministic():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((200, 2))
    labels = np.where(X[:, 0] + rng.standard_normal(200) > 0, "L1", "L2")
    ds = make_dataset(list(labels), [0] * 200, X=X)
    a = estimate_propensities(ds, PropensityConfig(seed=5)).conditional
    b = estimate_propensities(ds, PropensityConfig(seed=5)).conditional
    assert np.array_equal(a, b)


def test_estimated_rejects_empty_location():
    ds = make_dataset(["L1", "L2"], [0, 1], X=[0.0, 1.0], capacities={"L3": 1})
    with pytest.raises(DataError, match="no historical units"):
        estimate_propensities(ds)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=1, max_size=5),
    st.sampled_from([0.0, 1e-3, 0.05, 0.2]),
)
@example(rows=[[0.0, 0.0, 0.0, 0.0]], floor=1e-3)
def test_apply_floor_properties(rows, floor):
    probs = np.asarray(rows) + 1e-12
    out = apply_floor(probs, floor)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert (out >= floor - 1e-12).all()


def test_positivity_passes_on_used_locations():
    ds = make_dataset(["L1", "L2", "L1"], [0, 1, 0])
    res = positivity_check(empirical_propensities(ds), policy_for(ds, ["L2", "L1", "L1"]), ds, 0.0)
    assert res.passed


def test_positivity_zero_propensity_location():
    ds = make_dataset(["L1", "L1", "L2"], [0, 1, 0], cases=["c1", "c1", "c2"], capacities={"L3": 5})
    res = positivity_check(empirical_propensities(ds), policy_for(ds, ["L3", "L3", "L2"]), ds, 0.0)
    assert res.violations == ("i1", "i2")
    assert res.locations == ("L3",)


def test_positivity_floor_is_inclusive():
    ds = make_dataset(["L1", "L2", "L3"], [0, 0, 0])
    props = PropensityModel(EMPIRICAL, ds.location_ids, np.array([0.6, 0.39, 0.01]))
    res = positivity_check(props, policy_for(ds, ["L3", "L1", "L3"]), ds, 0.01)
    assert res.violations == ("i1", "i3")
    assert positivity_check(props, policy_for(ds, ["L3", "L1", "L3"]), ds, 0.0099).passed


def test_propensity_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 1))
    ds = make_dataset(list(np.where(X[:, 0] > 0, "L1", "L2")), [0] * 30, X=X)
    est = estimate_propensities(ds)
    write_propensities(tmp_path / "pi.csv", est, ds.individual_ids)
    back = read_propensities(tmp_path / "pi.csv", ds)
    assert np.array_equal(back.conditional, est.conditional)


def test_rows_must_sum_to_one():
    with pytest.raises(DataError):
        PropensityModel(EMPIRICAL, ("a", "b"), np.array([0.5, 0.6]))
