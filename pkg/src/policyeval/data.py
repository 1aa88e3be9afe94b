"""Population, outcome, prediction and policy containers, and their CSV formats.

Everything downstream works on the integer-indexed numpy views exposed by
:class:`EvaluationDataset` (``A``, ``Y``, ``X``, ``case_of`` ...). Location
and case orderings are canonical: ids are sorted with a natural sort so that
``"L2"`` precedes ``"L10"``.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

INDIVIDUAL_COLUMNS = ("individual_id", "case_id", "location", "outcome")


class DataError(ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, row: int | None = None, path: str | Path | None = None):
        self.row = row
        self.path = None if path is None else str(path)
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


def natural_key(value: str) -> tuple:
    """Sort key treating digit runs as integers (``L2`` < ``L10``)."""
    parts = re.split(r"(\d+)", value)
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in parts if p != "")


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Location:
    id: str
    capacity: int | None = None

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 0:
            raise DataError(f"negative capacity for location {self.id!r}")


@dataclass(frozen=True)
class Individual:
    id: str
    case_id: str
    historical_location: str
    outcome: int
    covariates: tuple[float, ...] = ()

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise DataError(f"outcome for {self.id!r} must be 0 or 1, got {self.outcome!r}")


@dataclass(frozen=True)
class Case:
    id: str
    member_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.member_ids:
            raise DataError(f"case {self.id!r} has no members")


@dataclass(frozen=True, eq=False)
class EvaluationDataset:
    """Validated evaluation population.

    Use :meth:`from_individuals` (or :func:`ingest_dataset`) rather than the raw
    constructor; it discovers locations, groups cases and checks invariants.

    Attributes
    ----------
    A : ndarray of int, shape (N,)
        Historical location index per individual.
    Y : ndarray of float, shape (N,)
        Observed binary outcome.
    X : ndarray of float, shape (N, p)
        Covariates.
    case_of : ndarray of int, shape (N,)
        Case index per individual.
    case_A, case_sizes : ndarray of int, shape (C,)
        Historical location and member count per case.
    """

    locations: tuple[Location, ...]
    individuals: tuple[Individual, ...]
    cases: tuple[Case, ...]
    A: np.ndarray = field(init=False, repr=False)
    Y: np.ndarray = field(init=False, repr=False)
    X: np.ndarray = field(init=False, repr=False)
    case_of: np.ndarray = field(init=False, repr=False)
    case_A: np.ndarray = field(init=False, repr=False)
    case_sizes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.individuals:
            raise DataError("empty dataset")
        loc_ids = [loc.id for loc in self.locations]
        if len(set(loc_ids)) != len(loc_ids):
            raise DataError("duplicate location ids")
        loc_index = {lid: k for k, lid in enumerate(loc_ids)}
        ind_index: dict[str, int] = {}
        for i, ind in enumerate(self.individuals):
            if ind.id in ind_index:
                raise DataError(f"duplicate individual id {ind.id!r}")
            if ind.historical_location not in loc_index:
                raise DataError(f"unknown location id {ind.historical_location!r}")
            ind_index[ind.id] = i
        widths = {len(ind.covariates) for ind in self.individuals}
        if len(widths) != 1:
            raise DataError("covariate vectors have non-uniform length")

        case_of = np.full(len(self.individuals), -1, dtype=np.int64)
        case_ids = set()
        for c, case in enumerate(self.cases):
            if case.id in case_ids:
                raise DataError(f"duplicate case id {case.id!r}")
            case_ids.add(case.id)
            for mid in case.member_ids:
                i = ind_index.get(mid)
                if i is None:
                    raise DataError(f"case {case.id!r} lists unknown individual {mid!r}")
                if case_of[i] != -1:
                    raise DataError(f"individual {mid!r} belongs to more than one case")
                if self.individuals[i].case_id != case.id:
                    raise DataError(f"individual {mid!r} case_id disagrees with case {case.id!r}")
                case_of[i] = c
        if (case_of < 0).any():
            missing = self.individuals[int(np.argmin(case_of))].id
            raise DataError(f"individual {missing!r} belongs to no case")

        A = np.array([loc_index[ind.historical_location] for ind in self.individuals], dtype=np.int64)
        case_A = np.full(len(self.cases), -1, dtype=np.int64)
        for i, c in enumerate(case_of):
            if case_A[c] == -1:
                case_A[c] = A[i]
            elif case_A[c] != A[i]:
                raise DataError(f"inconsistent case placement for case {self.cases[c].id!r}")

        X = np.array([ind.covariates for ind in self.individuals], dtype=float)
        X = X.reshape(len(self.individuals), widths.pop())
        setattr_ = object.__setattr__
        setattr_(self, "_loc_index", loc_index)
        setattr_(self, "_ind_index", ind_index)
        setattr_(self, "_case_index", {case.id: c for c, case in enumerate(self.cases)})
        setattr_(self, "A", _readonly(A))
        setattr_(self, "Y", _readonly(np.array([ind.outcome for ind in self.individuals], dtype=float)))
        setattr_(self, "X", _readonly(X))
        setattr_(self, "case_of", _readonly(case_of))
        setattr_(self, "case_A", _readonly(case_A))
        setattr_(self, "case_sizes", _readonly(np.bincount(case_of, minlength=len(self.cases))))

    @classmethod
    def from_individuals(
        cls,
        individuals: Sequence[Individual],
        capacities: Mapping[str, int] | None = None,
        locations: Sequence[str] | None = None,
    ) -> "EvaluationDataset":
        """Build a dataset, grouping cases by ``case_id``.

        Locations are the union of historical locations, ``capacities`` keys
        and the optional explicit ``locations`` list.
        """
        capacities = dict(capacities or {})
        ids = {ind.historical_location for ind in individuals} | set(capacities) | set(locations or ())
        locs = tuple(Location(lid, capacities.get(lid)) for lid in sorted(ids, key=natural_key))
        members: dict[str, list[str]] = {}
        for ind in individuals:
            members.setdefault(ind.case_id, []).append(ind.id)
        cases = tuple(Case(cid, tuple(members[cid])) for cid in sorted(members, key=natural_key))
        return cls(locs, tuple(individuals), cases)

    @property
    def N(self) -> int:
        return len(self.individuals)

    @property
    def K(self) -> int:
        return len(self.locations)

    @property
    def C(self) -> int:
        return len(self.cases)

    @property
    def location_ids(self) -> tuple[str, ...]:
        return tuple(loc.id for loc in self.locations)

    @property
    def individual_ids(self) -> tuple[str, ...]:
        return tuple(ind.id for ind in self.individuals)

    @property
    def case_ids(self) -> tuple[str, ...]:
        return tuple(case.id for case in self.cases)

    def location_index(self, location_id: str) -> int:
        try:
            return self._loc_index[location_id]
        except KeyError:
            raise DataError(f"unknown location id {location_id!r}") from None

    def individual_index(self, individual_id: str) -> int:
        try:
            return self._ind_index[individual_id]
        except KeyError:
            raise DataError(f"unknown individual id {individual_id!r}") from None

    def case_index(self, case_id: str) -> int:
        try:
            return self._case_index[case_id]
        except KeyError:
            raise DataError(f"unknown case id {case_id!r}") from None

    def declared_capacities(self) -> dict[str, int]:
        return {loc.id: loc.capacity for loc in self.locations if loc.capacity is not None}

    def historical_counts(self) -> np.ndarray:
        """Individuals historically placed at each location."""
        return np.bincount(self.A, minlength=self.K)


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    """Outcome predictions ``values[i, a]`` aligned with a dataset's orderings."""

    values: np.ndarray
    individual_ids: tuple[str, ...]
    location_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (len(self.individual_ids), len(self.location_ids)):
            raise DataError(f"prediction matrix shape {values.shape} does not match ids")
        if not np.isfinite(values).all():
            raise DataError("missing or non-finite prediction entry")
        if (values < 0).any() or (values > 1).any():
            raise DataError("prediction entries must lie in [0, 1]")
        object.__setattr__(self, "values", _readonly(values))

    @classmethod
    def for_dataset(cls, dataset: EvaluationDataset, values) -> "PredictionMatrix":
        return cls(values, dataset.individual_ids, dataset.location_ids)

    def check_aligned(self, dataset: EvaluationDataset) -> None:
        if self.individual_ids != dataset.individual_ids or self.location_ids != dataset.location_ids:
            raise DataError("predictions are not aligned with the dataset")


@dataclass(frozen=True)
class PolicyAssignment:
    """Case-level policy and the individual-level assignment it induces."""

    case_assignment: Mapping[str, str]
    individual_assignment: Mapping[str, str]

    @classmethod
    def from_cases(cls, cases: Sequence[Case], case_assignment: Mapping[str, str]) -> "PolicyAssignment":
        case_assignment = {case.id: case_assignment[case.id] for case in cases if case.id in case_assignment}
        return cls(case_assignment, derive_individual_assignment(cases, case_assignment))

    @classmethod
    def from_indices(cls, dataset: EvaluationDataset, case_locations: Sequence[int]) -> "PolicyAssignment":
        """Policy from one location index per case (dataset case order)."""
        ids = dataset.location_ids
        mapping = {case.id: ids[int(k)] for case, k in zip(dataset.cases, case_locations)}
        return cls.from_cases(dataset.cases, mapping)

    def indices(self, dataset: EvaluationDataset) -> np.ndarray:
        """Per-individual location index ``g_i``."""
        try:
            return np.array(
                [dataset.location_index(self.individual_assignment[iid]) for iid in dataset.individual_ids],
                dtype=np.int64,
            )
        except KeyError as exc:
            raise DataError(f"individual {exc.args[0]!r} has no policy assignment") from None

    def case_indices(self, dataset: EvaluationDataset) -> np.ndarray:
        try:
            return np.array(
                [dataset.location_index(self.case_assignment[cid]) for cid in dataset.case_ids], dtype=np.int64
            )
        except KeyError as exc:
            raise DataError(f"unassigned case {exc.args[0]!r}") from None

    def location_loads(self, dataset: EvaluationDataset) -> np.ndarray:
        return np.bincount(self.indices(dataset), minlength=dataset.K)

    def validate(self, dataset: EvaluationDataset) -> None:
        """Check totality and any declared capacities."""
        self.case_indices(dataset)
        loads = self.location_loads(dataset)
        for loc, load in zip(dataset.locations, loads):
            if loc.capacity is not None and load > loc.capacity:
                raise DataError(f"policy places {load} individuals at {loc.id!r} (capacity {loc.capacity})")


@dataclass(frozen=True, eq=False)
class PotentialOutcomeTable:
    """Binary potential outcomes ``values[i, a]``; synthetic data only."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or not np.isin(values, (0, 1)).all():
            raise DataError("potential outcomes must be a 2-d table of 0/1 entries")
        object.__setattr__(self, "values", _readonly(values.astype(np.int8)))

    def consistent_with(self, dataset: EvaluationDataset) -> bool:
        return bool(np.array_equal(self.values[np.arange(dataset.N), dataset.A], dataset.Y))


def derive_individual_assignment(cases: Iterable[Case], case_assignment: Mapping[str, str]) -> dict[str, str]:
    """Broadcast each case's location to its members."""
    out = {}
    for case in cases:
        if case.id not in case_assignment:
            raise DataError(f"unassigned case {case.id!r}")
        for mid in case.member_ids:
            out[mid] = case_assignment[case.id]
    return out


def observed_baseline(dataset: EvaluationDataset) -> float:
    """Observed mean outcome under the historical assignment."""
    return float(dataset.Y.mean())


# --- file formats -----------------------------------------------------------


def _read_rows(path: str | Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [(reader.line_num, row) for row in reader if any(cell.strip() for cell in row)]
    if header is None:
        return [], []
    return [h.strip() for h in header], rows


def _parse_float(text: str, what: str, row: int, path) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"malformed {what} {text!r}", row, path) from None
    if not np.isfinite(value):
        raise DataError(f"non-finite {what} {text!r}", row, path)
    return value


def _parse_int(text: str, what: str, row: int, path) -> int:
    value = _parse_float(text, what, row, path)
    if value != int(value):
        raise DataError(f"malformed {what} {text!r}", row, path)
    return int(value)


def read_capacities(path: str | Path) -> dict[str, int]:
    header, rows = _read_rows(path)
    if header[:2] != ["location_id", "capacity"]:
        raise DataError("capacities header must be 'location_id,capacity'", 1, path)
    out: dict[str, int] = {}
    for line, row in rows:
        if len(row) != 2:
            raise DataError("malformed row", line, path)
        lid = row[0].strip()
        if lid in out:
            raise DataError(f"duplicate location id {lid!r}", line, path)
        cap = _parse_int(row[1], "capacity", line, path)
        if cap < 0:
            raise DataError(f"negative capacity {cap}", line, path)
        out[lid] = cap
    return out


def ingest_dataset(
    individuals_file: str | Path,
    capacities_file: str | Path | None = None,
    exclude_columns: Sequence[str] = (),
) -> EvaluationDataset:
    """Read the individuals file (and optional capacities file).

    Columns after ``outcome`` are covariates, except those named in
    ``exclude_columns`` (e.g. an arrival-order column).
    """
    path = individuals_file
    header, rows = _read_rows(path)
    if not header or not rows:
        raise DataError("empty dataset", path=path)
    if tuple(header[:4]) != INDIVIDUAL_COLUMNS:
        raise DataError(f"header must start with {','.join(INDIVIDUAL_COLUMNS)}", 1, path)
    cov_cols = [j for j in range(4, len(header)) if header[j] not in set(exclude_columns)]

    individuals: list[Individual] = []
    seen: dict[str, int] = {}
    case_loc: dict[str, str] = {}
    for line, row in rows:
        if len(row) != len(header):
            raise DataError(f"malformed row: expected {len(header)} fields, got {len(row)}", line, path)
        iid, cid, loc = (cell.strip() for cell in row[:3])
        if not iid or not cid or not loc:
            raise DataError("malformed row: empty id field", line, path)
        if iid in seen:
            raise DataError(f"duplicate individual id {iid!r}", line, path)
        seen[iid] = line
        outcome = row[3].strip()
        if outcome not in ("0", "1"):
            raise DataError(f"outcome outside {{0,1}}: {outcome!r}", line, path)
        if case_loc.setdefault(cid, loc) != loc:
            raise DataError(f"inconsistent case placement for case {cid!r}", line, path)
        covs = tuple(_parse_float(row[j], f"covariate {header[j]}", line, path) for j in cov_cols)
        individuals.append(Individual(iid, cid, loc, int(outcome), covs))

    capacities = read_capacities(capacities_file) if capacities_file is not None else None
    return EvaluationDataset.from_individuals(individuals, capacities)


def covariate_names(individuals_file: str | Path, exclude_columns: Sequence[str] = ()) -> list[str]:
    header, _ = _read_rows(individuals_file)
    return [h for h in header[4:] if h not in set(exclude_columns)]


def read_case_column(individuals_file: str | Path, column: str, dataset: EvaluationDataset) -> np.ndarray:
    """Per-case value of an extra numeric column (minimum over members).

    Used for arrival order: a case arrives when its first member does.
    """
    header, rows = _read_rows(individuals_file)
    if column not in header:
        raise DataError(f"column {column!r} not found", 1, individuals_file)
    j = header.index(column)
    values = np.full(dataset.C, np.inf)
    for line, row in rows:
        c = dataset.case_of[dataset.individual_index(row[0].strip())]
        values[c] = min(values[c], _parse_float(row[j], column, line, individuals_file))
    return values


def read_predictions(path: str | Path, dataset: EvaluationDataset) -> PredictionMatrix:
    header, rows = _read_rows(path)
    if not header or header[0] != "individual_id":
        raise DataError("predictions header must start with individual_id", 1, path)
    cols = {}
    for j, name in enumerate(header[1:], start=1):
        if not name.startswith("mu_"):
            raise DataError(f"unexpected predictions column {name!r}", 1, path)
        cols[name[3:]] = j
    missing = [lid for lid in dataset.location_ids if lid not in cols]
    if missing:
        raise DataError(f"missing prediction column(s) for {missing}", 1, path)
    values = np.full((dataset.N, dataset.K), np.nan)
    for line, row in rows:
        if len(row) != len(header):
            raise DataError("malformed row", line, path)
        i = dataset.individual_index(row[0].strip())
        for k, lid in enumerate(dataset.location_ids):
            v = _parse_float(row[cols[lid]], f"prediction mu_{lid}", line, path)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"prediction mu_{lid}={v} outside [0,1]", line, path)
            values[i, k] = v
    if np.isnan(values).any():
        i = int(np.isnan(values).any(axis=1).argmax())
        raise DataError(f"missing prediction entry for individual {dataset.individual_ids[i]!r}", path=path)
    return PredictionMatrix.for_dataset(dataset, values)


def read_policy(path: str | Path, dataset: EvaluationDataset) -> PolicyAssignment:
    header, rows = _read_rows(path)
    if header[:2] != ["case_id", "location"]:
        raise DataError("policy header must be 'case_id,location'", 1, path)
    mapping: dict[str, str] = {}
    for line, row in rows:
        if len(row) != 2:
            raise DataError("malformed row", line, path)
        cid, loc = row[0].strip(), row[1].strip()
        if cid in mapping:
            raise DataError(f"duplicate case id {cid!r}", line, path)
        dataset.case_index(cid)
        dataset.location_index(loc)
        mapping[cid] = loc
    for cid in dataset.case_ids:
        if cid not in mapping:
            raise DataError(f"unassigned case {cid!r}", path=path)
    return PolicyAssignment.from_cases(dataset.cases, mapping)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_policy(path: str | Path, policy: PolicyAssignment, dataset: EvaluationDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "location"])
        for cid in dataset.case_ids:
            w.writerow([cid, policy.case_assignment[cid]])


def write_individuals(
    path: str | Path, dataset: EvaluationDataset, covariate_names: Sequence[str] | None = None
) -> None:
    p = dataset.X.shape[1]
    names = list(covariate_names) if covariate_names is not None else [f"x{j + 1}" for j in range(p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*INDIVIDUAL_COLUMNS, *names])
        for ind in dataset.individuals:
            w.writerow([ind.id, ind.case_id, ind.historical_location, ind.outcome, *map(_fmt, ind.covariates)])


def write_capacities(path: str | Path, capacities: Mapping[str, int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location_id", "capacity"])
        for lid in sorted(capacities, key=natural_key):
            w.writerow([lid, int(capacities[lid])])


def write_predictions(path: str | Path, predictions: PredictionMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["individual_id", *(f"mu_{lid}" for lid in predictions.location_ids)])
        for iid, row in zip(predictions.individual_ids, predictions.values):
            w.writerow([iid, *map(_fmt, row)])
