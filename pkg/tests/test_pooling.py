import io

import numpy as np
import pytest

from policyeval.data import PolicyAssignment
from policyeval.propensity import EMPIRICAL, ESTIMATED, PropensityModel, empirical_propensities
from policyeval.pooling import (
    build_pooling,
    pool_policy,
    pool_problem,
    resolve_pooled_assignment,
    write_pooling,
)

from conftest import make_dataset, policy_for, predictions_for

SIX = ("L1", "L2", "L3", "L4", "L5", "L6")
SIX_PI = np.array([0.6, 0.3, 0.08, 0.012, 0.005, 0.003])


def _props(ids, pi):
    return PropensityModel(EMPIRICAL, tuple(ids), np.asarray(pi))


def test_build_pooling_members_and_mass():
    pm = build_pooling(_props(SIX, SIX_PI), 0.01)
    assert pm.members == ("L5", "L6")
    assert abs(pm.pooled_propensity - 0.008) <= 1e-12
    assert pm.forward["L1"] == "L1" and pm.forward["L5"] == pm.forward["L6"] == "POOL"
    assert pm.pooled_ids == ("L1", "L2", "L3", "L4", "POOL")
    assert pm.weights == pytest.approx({"L5": 0.625, "L6": 0.375})


def test_build_pooling_strict_threshold():
    pm = build_pooling(_props("abc", [0.98, 0.01, 0.01]), 0.01)
    assert pm.is_identity


@pytest.mark.parametrize("pi", [[0.5, 0.5], [0.995, 0.005]])
def test_build_pooling_identity(pi):
    assert build_pooling(_props(["L1", "L2"], pi), 0.01).is_identity


@pytest.mark.parametrize("threshold", [0.0, 1.0, -0.1])
def test_build_pooling_threshold_range(threshold):
    with pytest.raises(ValueError):
        build_pooling(_props(["L1"], [1.0]), threshold)


def _six_location_problem():
    labels = ["L1", "L2", "L3", "L4", "L5", "L6"]
    ds = make_dataset(labels, [1, 0, 1, 0, 1, 0], capacities=dict(zip(labels, [3, 3, 3, 3, 2, 1])))
    mu = np.tile([0.1, 0.2, 0.3, 0.35, 0.4, 0.8], (6, 1))
    return ds, predictions_for(ds, mu)


def test_pool_problem_weighted_predictions():
    ds, preds = _six_location_problem()
    pm = build_pooling(_props(SIX, SIX_PI), 0.01)
    pooled = pool_problem(ds, preds, _props(SIX, SIX_PI), pm)
    assert pooled.dataset.K == 5
    assert pooled.dataset.location_ids[-1] == "POOL"
    assert pooled.predictions.values[0, -1] == pytest.approx((0.005 * 0.4 + 0.003 * 0.8) / 0.008)
    assert pooled.predictions.values[0, -1] == pytest.approx(0.55)
    assert pooled.propensities.marginal[-1] == pytest.approx(0.008)
    assert abs(pooled.propensities.marginal.sum() - 1) <= 1e-9
    # historical A = L6 maps to the pseudo-location
    assert pooled.dataset.individuals[5].historical_location == "POOL"
    assert pooled.dataset.A[5] == 4
    assert pooled.dataset.declared_capacities()["POOL"] == 3


def test_pool_problem_identity_is_passthrough():
    ds, preds = _six_location_problem()
    props = _props(SIX, [0.5, 0.1, 0.1, 0.1, 0.1, 0.1])
    pm = build_pooling(props, 0.01)
    pooled = pool_problem(ds, preds, props, pm)
    assert pooled.dataset is ds and pooled.predictions is preds and pooled.propensities is props


def test_pool_problem_estimated_rowwise_sum():
    ds, preds = _six_location_problem()
    rng = np.random.default_rng(0)
    table = rng.dirichlet(np.ones(6), size=6)
    props = PropensityModel(ESTIMATED, SIX, SIX_PI, "individual", table)
    pooled = pool_problem(ds, preds, props, build_pooling(props, 0.01))
    assert np.allclose(pooled.propensities.conditional[:, -1], table[:, 4] + table[:, 5])
    assert np.allclose(pooled.propensities.conditional.sum(axis=1), 1.0, atol=1e-9)


def test_match_semantics_in_pooled_space():
    ds, preds = _six_location_problem()
    pm = build_pooling(_props(SIX, SIX_PI), 0.01)
    pooled = pool_problem(ds, preds, _props(SIX, SIX_PI), pm)
    # individual 5 was at L5 and is sent to L6: both in the pool, so matched
    policy = pool_policy(policy_for(ds, ["L1", "L2", "L3", "L4", "L6", "L5"]), pm, pooled.dataset)
    g = policy.indices(pooled.dataset)
    assert list(pooled.dataset.A == g) == [True] * 6


def test_resolve_no_pool_cases():
    ds, _ = _six_location_problem()
    pm = build_pooling(_props(SIX, SIX_PI), 0.01)
    policy = policy_for(ds, ["L1"] * 6)
    out = resolve_pooled_assignment(policy, pm, ds, seed=1)
    assert dict(out.case_assignment) == dict(policy.case_assignment)


def test_resolve_proportional_split_and_determinism():
    n = 10_000
    ds = make_dataset(["L5", "L6"] * (n // 2), [0] * n, locations=list(SIX))
    pm = build_pooling(_props(SIX, SIX_PI), 0.01)
    pooled_policy = PolicyAssignment.from_cases(ds.cases, {c.id: "POOL" for c in ds.cases})
    out = resolve_pooled_assignment(pooled_policy, pm, ds, seed=123)
    counts = np.bincount(out.case_indices(ds), minlength=6) / n
    assert abs(counts[4] - 0.625) <= 0.02 and abs(counts[5] - 0.375) <= 0.02
    again = resolve_pooled_assignment(pooled_policy, pm, ds, seed=123)
    assert dict(again.case_assignment) == dict(out.case_assignment)


def test_pooling_map_export():
    buf = io.StringIO()
    write_pooling(buf, build_pooling(_props(SIX, SIX_PI), 0.01))
    lines = buf.getvalue().splitlines()
    assert lines[0] == "original_location,pooled_location,weight"
    assert lines[1] == "L1,L1,1.0"
    assert lines[5] == "L5,POOL,0.625"


def test_empirical_pooling_on_real_dataset():
    labels = ["L1"] * 990 + ["L2"] * 6 + ["L3"] * 4
    ds = make_dataset(labels, [0] * 1000)
    pm = build_pooling(empirical_propensities(ds), 0.01)
    assert pm.members == ("L2", "L3")
