"""Merge rarely used locations into a single pseudo-location.

Locations with marginal propensity strictly below the threshold form one
pooled arm. Matching and evaluation both run in the pooled location space;
a case sent to the pool is later resolved to one member location at random,
proportionally to the member propensities.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, TextIO

import numpy as np

from .data import EvaluationDataset, Individual, PolicyAssignment, PredictionMatrix
from .propensity import PropensityModel

DEFAULT_THRESHOLD = 0.01
DEFAULT_POOL_ID = "POOL"


@dataclass(frozen=True)
class PoolingMap:
    threshold: float
    pooled_location_id: str
    members: tuple[str, ...]
    forward: Mapping[str, str]
    weights: Mapping[str, float]
    pooled_propensity: float
    original_ids: tuple[str, ...]
    pooled_ids: tuple[str, ...]

    @property
    def is_identity(self) -> bool:
        return not self.members

    def forward_index(self) -> np.ndarray:
        """Original location index -> pooled location index."""
        pos = {lid: k for k, lid in enumerate(self.pooled_ids)}
        return np.array([pos[self.forward[lid]] for lid in self.original_ids], dtype=np.int64)

    def member_indices(self) -> np.ndarray:
        pos = {lid: k for k, lid in enumerate(self.original_ids)}
        return np.array([pos[m] for m in self.members], dtype=np.int64)

    def member_weights(self) -> np.ndarray:
        return np.array([self.weights[m] for m in self.members])


def build_pooling(
    propensities: PropensityModel,
    threshold: float = DEFAULT_THRESHOLD,
    pooled_location_id: str = DEFAULT_POOL_ID,
) -> PoolingMap:
    """Pool every location with pi(a) < threshold; identity if fewer than two qualify."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"pooling threshold must lie in (0, 1), got {threshold}")
    ids = propensities.location_ids
    pi = propensities.marginal
    small = [k for k in range(len(ids)) if pi[k] < threshold]
    if len(small) < 2:
        return PoolingMap(threshold, pooled_location_id, (), {lid: lid for lid in ids}, {}, 0.0, ids, ids)
    if pooled_location_id in ids:
        raise ValueError(f"pooled location id {pooled_location_id!r} clashes with an existing location")
    members = tuple(ids[k] for k in small)
    total = float(sum(pi[k] for k in small))
    forward = {lid: (pooled_location_id if lid in members else lid) for lid in ids}
    weights = {ids[k]: float(pi[k]) / total if total > 0 else 1.0 / len(small) for k in small}
    pooled_ids = tuple(lid for lid in ids if lid not in members) + (pooled_location_id,)
    return PoolingMap(threshold, pooled_location_id, members, forward, weights, total, ids, pooled_ids)


@dataclass(frozen=True, eq=False)
class PooledProblem:
    dataset: EvaluationDataset
    predictions: PredictionMatrix | None
    propensities: PropensityModel


def _pool_columns(table: np.ndarray, pooling: PoolingMap, weights: np.ndarray | None) -> np.ndarray:
    """Collapse member columns into one trailing column (weighted sum)."""
    members = pooling.member_indices()
    keep = [k for k in range(table.shape[1]) if k not in set(members.tolist())]
    part = table[:, members]
    pooled = part.sum(axis=1) if weights is None else part @ weights
    return np.column_stack([table[:, keep], pooled])


def pool_problem(
    dataset: EvaluationDataset,
    predictions: PredictionMatrix | None,
    propensities: PropensityModel,
    pooling: PoolingMap,
) -> PooledProblem:
    """Re-express dataset, predictions and propensities in the pooled location space.

    The pooled-arm prediction is the propensity-weighted mean of the member
    predictions; the pooled-arm capacity is the sum of member capacities.
    """
    if pooling.is_identity:
        return PooledProblem(dataset, predictions, propensities)
    fwd = pooling.forward
    individuals = [
        Individual(ind.id, ind.case_id, fwd[ind.historical_location], ind.outcome, ind.covariates)
        for ind in dataset.individuals
    ]
    declared = dataset.declared_capacities()
    capacities = {fwd[lid]: 0 for lid in declared}
    for lid, cap in declared.items():
        capacities[fwd[lid]] += cap
    pooled_ds = EvaluationDataset.from_individuals(individuals, capacities, locations=pooling.pooled_ids)
    # from_individuals sorts ids; pooled space keeps the pool last
    pooled_ds = _reorder_locations(pooled_ds, pooling.pooled_ids)

    pooled_pred = None
    if predictions is not None:
        predictions.check_aligned(dataset)
        values = _pool_columns(predictions.values, pooling, pooling.member_weights())
        pooled_pred = PredictionMatrix.for_dataset(pooled_ds, np.clip(values, 0.0, 1.0))

    marginal = _pool_columns(propensities.marginal[None, :], pooling, None)[0]
    conditional = None
    if propensities.conditional is not None:
        conditional = _pool_columns(propensities.conditional, pooling, None)
    pooled_prop = PropensityModel(propensities.kind, pooling.pooled_ids, marginal, propensities.unit, conditional)
    return PooledProblem(pooled_ds, pooled_pred, pooled_prop)


def _reorder_locations(dataset: EvaluationDataset, order: tuple[str, ...]) -> EvaluationDataset:
    by_id = {loc.id: loc for loc in dataset.locations}
    return EvaluationDataset(tuple(by_id[lid] for lid in order), dataset.individuals, dataset.cases)


def pool_policy(policy: PolicyAssignment, pooling: PoolingMap, pooled_dataset: EvaluationDataset) -> PolicyAssignment:
    """Map an original-space policy into the pooled space."""
    mapping = {cid: pooling.forward[loc] for cid, loc in policy.case_assignment.items()}
    return PolicyAssignment.from_cases(pooled_dataset.cases, mapping)


def resolve_pooled_assignment(
    policy: PolicyAssignment,
    pooling: PoolingMap,
    dataset: EvaluationDataset,
    seed: int,
) -> PolicyAssignment:
    """Draw a member location for every case the policy sends to the pool.

    ``dataset`` is the original-space dataset; draws are made in its case
    order, so the result depends only on ``seed``.
    """
    if pooling.is_identity:
        return policy
    rng = np.random.default_rng(seed)
    pool_cases = [cid for cid in dataset.case_ids if policy.case_assignment[cid] == pooling.pooled_location_id]
    if not pool_cases:
        return PolicyAssignment.from_cases(dataset.cases, dict(policy.case_assignment))
    draws = rng.choice(len(pooling.members), size=len(pool_cases), p=pooling.member_weights())
    mapping = dict(policy.case_assignment)
    for cid, k in zip(pool_cases, draws):
        mapping[cid] = pooling.members[k]
    return PolicyAssignment.from_cases(dataset.cases, mapping)


def write_pooling(target: str | Path | TextIO, pooling: PoolingMap) -> None:
    """Rows ``original_location,pooled_location,weight``; weight is 1 off the pool."""
    if not isinstance(target, (str, Path)):
        _write_pooling_rows(target, pooling)
        return
    with open(target, "w", newline="", encoding="utf-8") as fh:
        _write_pooling_rows(fh, pooling)


def _write_pooling_rows(fh: TextIO, pooling: PoolingMap) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["original_location", "pooled_location", "weight"])
    for lid in pooling.original_ids:
        w.writerow([lid, pooling.forward[lid], repr(pooling.weights.get(lid, 1.0))])
