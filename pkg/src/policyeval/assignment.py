"""Counterfactual case-to-location assignment under capacity constraints.

Cases (families) are atomic: a case occupies ``size`` units of its location's
capacity. The offline problem is a generalized assignment problem, solved
exactly as a 0-1 integer program with HiGHS; for unit-size cases its LP
relaxation is a transportation problem and is integral at the root.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp
from scipy.sparse import coo_matrix

from .data import Case, EvaluationDataset, PolicyAssignment, PredictionMatrix


class InfeasibleAssignmentError(RuntimeError):
    pass


# (remaining capacities, case rewards, arrival index, case size) -> location index
OnlineStrategy = Callable[[np.ndarray, np.ndarray, int, int], int]


@dataclass(frozen=True, eq=False)
class AssignmentProblem:
    cases: tuple[Case, ...]
    location_ids: tuple[str, ...]
    case_rewards: np.ndarray
    case_sizes: np.ndarray
    capacities: np.ndarray
    arrival_order: np.ndarray | None = field(default=None)

    def __post_init__(self):
        rewards = np.asarray(self.case_rewards, dtype=float)
        if rewards.shape != (len(self.cases), len(self.location_ids)):
            raise ValueError("case_rewards must have shape (cases, locations)")
        if not np.isfinite(rewards).all():
            raise ValueError("case rewards must be finite")
        if self.case_sizes.sum() > self.capacities.sum():
            raise InfeasibleAssignmentError(
                f"total capacity {self.capacities.sum():g} is below {int(self.case_sizes.sum())} individuals"
            )
        if self.arrival_order is not None:
            order = np.asarray(self.arrival_order)
            if sorted(order.tolist()) != list(range(len(self.cases))):
                raise ValueError("arrival order must list every case exactly once")


def build_problem(
    dataset: EvaluationDataset,
    predictions: PredictionMatrix,
    capacities: Mapping[str, float] | None = None,
    arrival: Sequence[float] | None = None,
) -> AssignmentProblem:
    """Case rewards are summed member predictions.

    Capacities not given explicitly (argument, then the dataset's declared
    capacities) default to historical individual counts. ``arrival`` holds one
    sortable key per case; ties keep case order.
    """
    predictions.check_aligned(dataset)
    rewards = np.zeros((dataset.C, dataset.K))
    np.add.at(rewards, dataset.case_of, predictions.values)
    caps = dataset.historical_counts().astype(float)
    explicit = {**dataset.declared_capacities(), **dict(capacities or {})}
    for lid, cap in explicit.items():
        caps[dataset.location_index(lid)] = cap
    order = None
    if arrival is not None:
        order = np.lexsort((np.arange(dataset.C), np.asarray(arrival, dtype=float)))
    return AssignmentProblem(dataset.cases, dataset.location_ids, rewards, dataset.case_sizes.copy(), caps, order)


def _to_policy(problem: AssignmentProblem, choice: np.ndarray) -> PolicyAssignment:
    mapping = {case.id: problem.location_ids[int(k)] for case, k in zip(problem.cases, choice)}
    return PolicyAssignment.from_cases(problem.cases, mapping)


def total_reward(problem: AssignmentProblem, policy: PolicyAssignment) -> float:
    pos = {lid: k for k, lid in enumerate(problem.location_ids)}
    vals = [problem.case_rewards[c, pos[policy.case_assignment[case.id]]] for c, case in enumerate(problem.cases)]
    return float(np.sum(vals))


def solve_offline(rewards: np.ndarray, sizes: np.ndarray, capacities: np.ndarray) -> np.ndarray:
    """Location index per case maximizing total reward within capacities.

    Infinite capacities are unconstrained.
    """
    rewards = np.asarray(rewards, dtype=float)
    sizes = np.asarray(sizes)
    capacities = np.asarray(capacities, dtype=float)
    C, K = rewards.shape
    bounded = np.isfinite(capacities)
    if not bounded.any():
        return rewards.argmax(axis=1)

    allowed = sizes[:, None] <= capacities[None, :]
    if not allowed.any(axis=1).all():
        raise InfeasibleAssignmentError("a case is larger than every location's capacity")
    peak = np.abs(rewards).max()
    scale = 1e6 / peak if peak > 0 else 1.0
    c = -scale * rewards.ravel()

    rows = np.repeat(np.arange(C), K)
    cols = np.arange(C * K)
    one_each = coo_matrix((np.ones(C * K), (rows, cols)), shape=(C, C * K))
    bk = np.flatnonzero(bounded)
    cap_rows, cap_cols, cap_vals = [], [], []
    for r, k in enumerate(bk):
        cap_rows.append(np.full(C, r))
        cap_cols.append(np.arange(C) * K + k)
        cap_vals.append(sizes.astype(float))
    cap_mat = coo_matrix(
        (np.concatenate(cap_vals), (np.concatenate(cap_rows), np.concatenate(cap_cols))), shape=(len(bk), C * K)
    )
    constraints = [
        LinearConstraint(one_each.tocsr(), 1, 1),
        LinearConstraint(cap_mat.tocsr(), -np.inf, capacities[bk]),
    ]
    res = milp(
        c,
        constraints=constraints,
        integrality=np.ones(C * K),
        bounds=Bounds(0, allowed.ravel().astype(float)),
        options={"mip_rel_gap": 0.0},
    )
    if res.status != 0 or res.x is None:
        raise InfeasibleAssignmentError(f"no feasible assignment ({res.message})")
    choice = res.x.reshape(C, K).argmax(axis=1)
    loads = np.bincount(choice, weights=sizes, minlength=K)
    if (loads[bounded] > capacities[bounded]).any():
        raise InfeasibleAssignmentError("solver returned a capacity-violating assignment")
    return choice


def offline_assign(problem: AssignmentProblem) -> PolicyAssignment:
    """Exact capacity-constrained maximizer of total predicted outcome."""
    return _to_policy(problem, solve_offline(problem.case_rewards, problem.case_sizes, problem.capacities))


def greedy_strategy(remaining: np.ndarray, rewards: np.ndarray, arrival_index: int, case_size: int) -> int:
    """Best feasible location right now; lowest index wins ties."""
    feasible = remaining >= case_size
    return int(np.where(feasible, rewards, -np.inf).argmax())


def solve_online(
    rewards: np.ndarray,
    sizes: np.ndarray,
    capacities: np.ndarray,
    order: Sequence[int],
    strategy: OnlineStrategy = greedy_strategy,
) -> np.ndarray:
    remaining = np.asarray(capacities, dtype=float).copy()
    choice = np.full(len(sizes), -1, dtype=np.int64)
    for t, c in enumerate(order):
        size = int(sizes[c])
        if not (remaining >= size).any():
            raise InfeasibleAssignmentError(f"case at arrival {t} (size {size}) fits in no remaining location")
        k = int(strategy(remaining.copy(), np.asarray(rewards[c]), t, size))
        if not 0 <= k < len(remaining) or remaining[k] < size:
            raise InfeasibleAssignmentError(f"strategy chose infeasible location {k} at arrival {t}")
        remaining[k] -= size
        choice[c] = k
    return choice


def online_assign(problem: AssignmentProblem, strategy: OnlineStrategy | str = "greedy") -> PolicyAssignment:
    """Commit cases one at a time in arrival order.

    ``strategy`` is ``"greedy"`` or a callable receiving (remaining
    capacities, the case's rewards, arrival index, case size) and returning a
    location index.
    """
    if problem.arrival_order is None:
        raise ValueError("online assignment needs an arrival order")
    if strategy == "greedy":
        strategy = greedy_strategy
    elif isinstance(strategy, str):
        raise ValueError(f"unknown online strategy {strategy!r}")
    choice = solve_online(problem.case_rewards, problem.case_sizes, problem.capacities, problem.arrival_order, strategy)
    return _to_policy(problem, choice)
