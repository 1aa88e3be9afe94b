"""Historical assignment probabilities and positivity checks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .data import DataError, EvaluationDataset, PolicyAssignment, _read_rows

EMPIRICAL = "empirical"
ESTIMATED = "estimated"
UNITS = ("case", "individual")


class ProbabilityModel(Protocol):
    """Anything with the scikit-learn classifier fit/predict_proba surface."""

    classes_: np.ndarray

    def fit(self, X, y): ...

    def predict_proba(self, X) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """Assignment probabilities over a dataset's locations.

    ``empirical`` holds the homogeneous vector pi(a); ``conditional`` the
    per-individual table pi(a | X_i) for estimated models. ``marginal`` is
    always the empirical frequency vector (used e.g. for pooling membership).
    """

    kind: str
    location_ids: tuple[str, ...]
    marginal: np.ndarray
    unit: str = "case"
    conditional: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (EMPIRICAL, ESTIMATED):
            raise ValueError(f"unknown propensity kind {self.kind!r}")
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}")
        marginal = np.array(self.marginal, dtype=float)
        _check_rows(marginal[None, :])
        object.__setattr__(self, "marginal", marginal)
        if self.kind == ESTIMATED:
            if self.conditional is None:
                raise ValueError("estimated propensities need a conditional table")
            table = np.array(self.conditional, dtype=float)
            _check_rows(table)
            object.__setattr__(self, "conditional", table)

    @property
    def empirical(self) -> np.ndarray | None:
        return self.marginal if self.kind == EMPIRICAL else None

    @property
    def K(self) -> int:
        return len(self.location_ids)

    def matrix(self, n: int) -> np.ndarray:
        """Full (n, K) probability table."""
        if self.conditional is not None:
            if self.conditional.shape[0] != n:
                raise DataError("propensity table does not match dataset size")
            return self.conditional
        return np.broadcast_to(self.marginal, (n, self.K))

    def lookup(self, locations: np.ndarray) -> np.ndarray:
        """pi_{a_i, i} for one location index per individual."""
        locations = np.asarray(locations)
        if self.conditional is None:
            return self.marginal[locations]
        return self.conditional[np.arange(len(locations)), locations]


def _check_rows(table: np.ndarray, tol: float = 1e-9) -> None:
    if not np.isfinite(table).all() or (table < 0).any() or (table > 1).any():
        raise DataError("propensities must lie in [0, 1]")
    bad = np.abs(table.sum(axis=1) - 1.0) > tol
    if bad.any():
        raise DataError(f"propensity row {int(bad.argmax())} does not sum to 1")


def _unit_counts(dataset: EvaluationDataset, unit: str) -> np.ndarray:
    if unit == "case":
        return np.bincount(dataset.case_A, minlength=dataset.K)
    if unit == "individual":
        return np.bincount(dataset.A, minlength=dataset.K)
    raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")


def empirical_propensities(dataset: EvaluationDataset, unit: str = "case") -> PropensityModel:
    """pi(a) = share of units (cases or individuals) historically placed at a."""
    counts = _unit_counts(dataset, unit)
    return PropensityModel(EMPIRICAL, dataset.location_ids, counts / counts.sum(), unit)


def apply_floor(probs: np.ndarray, floor: float) -> np.ndarray:
    """Normalize rows, raise entries below ``floor`` to it, rescale the rest.

    Rescaling only touches unfloored entries, repeated until stable, so every
    output entry is at least ``floor`` and rows sum to 1.
    """
    probs = np.array(probs, dtype=float)
    K = probs.shape[1]
    probs = probs / probs.sum(axis=1, keepdims=True)
    if floor <= 0:
        return probs
    if floor * K > 1:
        raise ValueError(f"floor {floor} is infeasible for {K} classes")
    fixed = np.zeros_like(probs, dtype=bool)
    for _ in range(K):
        fixed |= probs < floor
        free_mass = 1.0 - floor * fixed.sum(axis=1, keepdims=True)
        free_total = np.where(fixed, 0.0, probs).sum(axis=1, keepdims=True)
        scale = np.divide(free_mass, free_total, out=np.zeros_like(free_total), where=free_total > 0)
        probs = np.where(fixed, floor, probs * scale)
        if not (probs < floor - 1e-15).any():
            break
    return probs


@dataclass
class PropensityConfig:
    """Reference model: L2-regularized multinomial logistic regression.

    ``C`` is the inverse regularization strength of scikit-learn.
    """

    C: float = 1.0
    floor: float = 1e-3
    unit: str = "case"
    seed: int = 0
    max_iter: int = 2000


def _default_classifier(config: PropensityConfig):
    return make_pipeline(
        StandardScaler(),
        LogisticRegression(C=config.C, max_iter=config.max_iter, random_state=config.seed),
    )


def estimate_propensities(
    dataset: EvaluationDataset,
    config: PropensityConfig | None = None,
    classifier: ProbabilityModel | None = None,
) -> PropensityModel:
    """Fit pi(a | X) with a probability classifier.

    At ``unit="case"`` each case contributes one row (mean member covariates)
    and the fitted row is broadcast to its members.
    """
    config = config or PropensityConfig()
    counts = _unit_counts(dataset, config.unit)
    if (counts == 0).any():
        empty = [dataset.location_ids[k] for k in np.flatnonzero(counts == 0)]
        raise DataError(f"location(s) {empty} have no historical units and cannot be a class")
    marginal = counts / counts.sum()
    if dataset.K == 1:
        table = np.ones((dataset.N, 1))
        return PropensityModel(ESTIMATED, dataset.location_ids, marginal, config.unit, table)

    if config.unit == "case":
        sums = np.zeros((dataset.C, dataset.X.shape[1]))
        np.add.at(sums, dataset.case_of, dataset.X)
        X, y = sums / dataset.case_sizes[:, None], dataset.case_A
    else:
        X, y = dataset.X, dataset.A
    if X.shape[1] == 0:
        X = np.zeros((len(y), 1))

    model = classifier if classifier is not None else _default_classifier(config)
    model.fit(X, y)
    raw = model.predict_proba(X)
    probs = np.zeros((len(y), dataset.K))
    probs[:, np.asarray(model.classes_, dtype=int)] = raw
    probs = apply_floor(probs, config.floor)
    if config.unit == "case":
        probs = probs[dataset.case_of]
    return PropensityModel(ESTIMATED, dataset.location_ids, marginal, config.unit, probs)


@dataclass(frozen=True)
class PositivityResult:
    floor: float
    violations: tuple[str, ...]
    locations: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.violations

    def describe(self) -> str:
        return (
            f"positivity violation: {len(self.violations)} individual(s) assigned where "
            f"propensity <= {self.floor:g} (locations: {', '.join(self.locations)})"
        )


def positivity_check(
    propensities: PropensityModel,
    policy: PolicyAssignment,
    dataset: EvaluationDataset,
    floor: float = 0.0,
) -> PositivityResult:
    """Individuals whose policy location has pi_{g_i, i} <= floor."""
    g = policy.indices(dataset)
    bad = np.flatnonzero(propensities.lookup(g) <= floor)
    ids = tuple(dataset.individual_ids[i] for i in bad)
    locs = tuple(dataset.location_ids[k] for k in np.unique(g[bad]))
    return PositivityResult(floor, ids, locs)


class PositivityError(DataError):
    def __init__(self, result: PositivityResult):
        self.result = result
        super().__init__(result.describe())


def write_propensities(path: str | Path, model: PropensityModel, individual_ids: Sequence[str]) -> None:
    table = model.matrix(len(individual_ids))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["individual_id", *(f"pi_{lid}" for lid in model.location_ids)])
        for iid, row in zip(individual_ids, table):
            w.writerow([iid, *(repr(float(v)) for v in row)])


def read_propensities(path: str | Path, dataset: EvaluationDataset, unit: str = "individual") -> PropensityModel:
    """Import an externally fitted pi(a | X_i) table."""
    header, rows = _read_rows(path)
    if not header or header[0] != "individual_id":
        raise DataError("propensities header must start with individual_id", 1, path)
    cols = {name[3:]: j for j, name in enumerate(header) if name.startswith("pi_")}
    missing = [lid for lid in dataset.location_ids if lid not in cols]
    if missing:
        raise DataError(f"missing propensity column(s) for {missing}", 1, path)
    table = np.full((dataset.N, dataset.K), np.nan)
    for line, row in rows:
        i = dataset.individual_index(row[0].strip())
        try:
            table[i] = [float(row[cols[lid]]) for lid in dataset.location_ids]
        except (ValueError, IndexError):
            raise DataError("malformed row", line, path) from None
    if np.isnan(table).any():
        raise DataError("propensity file does not cover every individual", path=path)
    try:
        _check_rows(table)
    except DataError as exc:
        raise DataError(str(exc), path=path) from None
    counts = _unit_counts(dataset, unit)
    return PropensityModel(ESTIMATED, dataset.location_ids, counts / counts.sum(), unit, table)
