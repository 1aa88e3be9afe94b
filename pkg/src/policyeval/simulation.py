"""Synthetic populations and design-based verification of the estimators.

The population, potential outcomes, predictions and policy stay fixed; only
the historical assignment is redrawn (per case, from the known propensity
vector), and observed outcomes are read off the potential-outcome table.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np
from scipy.special import expit, logit

from .data import (
    EvaluationDataset,
    Individual,
    PolicyAssignment,
    PotentialOutcomeTable,
    PredictionMatrix,
)
from .estimators import (
    AIPW,
    AIPWL,
    ESTIMATORS,
    IPW,
    MODEL_BASED,
    Z95,
    UndefinedEstimateError,
    aipw_value,
    aipw_variance,
    ipw_value,
    ipw_variance,
    local_propensities,
)
from .pooling import PoolingMap

ENUMERATION_LIMIT = 10**6


@dataclass
class SyntheticConfig:
    """Synthetic population settings.

    ``case_size_probs[j]`` is the probability of a case with ``j + 1``
    members. ``propensities`` defaults to uniform. ``noise`` is the standard
    deviation of the logit-scale perturbation applied to the true outcome
    probabilities to form predictions.
    """

    n: int = 200
    k: int = 3
    p: int = 2
    case_size_probs: tuple[float, ...] = (1.0,)
    propensities: tuple[float, ...] | None = None
    intercept_mean: float = -0.5
    intercept_sd: float = 0.5
    coef_sd: float = 0.7
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.k < 1 or self.p < 0:
            raise ValueError("n and k must be >= 1 and p >= 0")
        if self.propensities is not None:
            pi = np.asarray(self.propensities, dtype=float)
            if len(pi) != self.k or (pi < 0).any() or abs(pi.sum() - 1) > 1e-9:
                raise ValueError("propensities must be a length-k probability vector")
        sizes = np.asarray(self.case_size_probs, dtype=float)
        if len(sizes) == 0 or (sizes < 0).any() or abs(sizes.sum() - 1) > 1e-9:
            raise ValueError("case_size_probs must be a probability vector")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    @property
    def pi(self) -> np.ndarray:
        if self.propensities is None:
            return np.full(self.k, 1.0 / self.k)
        return np.asarray(self.propensities, dtype=float)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "SyntheticConfig":
        """Coerce string values (e.g. from a key-value file)."""
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                continue
            if key in ("case_size_probs", "propensities"):
                kwargs[key] = tuple(float(v) for v in str(raw).replace(",", " ").split()) if raw != "" else None
            elif key in ("n", "k", "p", "seed"):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class SyntheticPopulation:
    dataset: EvaluationDataset
    table: PotentialOutcomeTable
    predictions: PredictionMatrix
    outcome_probs: np.ndarray
    pi: np.ndarray


def build_dataset(
    case_of: np.ndarray,
    case_A: np.ndarray,
    Y: np.ndarray,
    X: np.ndarray,
    location_ids,
) -> EvaluationDataset:
    """Dataset from integer arrays; ids are ``i<j>``, ``c<j>``."""
    individuals = [
        Individual(f"i{i}", f"c{case_of[i]}", location_ids[case_A[case_of[i]]], int(Y[i]), tuple(map(float, X[i])))
        for i in range(len(case_of))
    ]
    return EvaluationDataset.from_individuals(individuals, locations=location_ids)


def _case_structure(rng: np.random.Generator, n: int, probs) -> np.ndarray:
    sizes = []
    total = 0
    while total < n:
        s = min(int(rng.choice(len(probs), p=probs)) + 1, n - total)
        sizes.append(s)
        total += s
    return np.repeat(np.arange(len(sizes)), sizes)


def generate_population(
    config: SyntheticConfig,
    seed: int | None = None,
    outcome_probs: np.ndarray | None = None,
) -> SyntheticPopulation:
    """Draw a population with fixed potential outcomes; deterministic given the seed.

    ``outcome_probs`` (N x K) overrides the logistic outcome surface.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n, k = config.n, config.k
    case_of = _case_structure(rng, n, np.asarray(config.case_size_probs, dtype=float))
    X = rng.standard_normal((n, config.p))
    alpha = rng.normal(config.intercept_mean, config.intercept_sd, size=k)
    beta = rng.normal(0.0, config.coef_sd, size=(config.p, k))
    probs = expit(alpha + X @ beta) if outcome_probs is None else np.asarray(outcome_probs, dtype=float)
    table = (rng.random((n, k)) < probs).astype(np.int8)
    case_A = rng.choice(k, size=case_of.max() + 1, p=config.pi)
    if config.noise > 0:
        clipped = np.clip(probs, 1e-9, 1 - 1e-9)
        mu = expit(logit(clipped) + config.noise * rng.standard_normal((n, k)))
    else:
        mu = probs.copy()
    location_ids = tuple(f"L{a + 1}" for a in range(k))
    A = case_A[case_of]
    dataset = build_dataset(case_of, case_A, table[np.arange(n), A], X, location_ids)
    return SyntheticPopulation(
        dataset, PotentialOutcomeTable(table), PredictionMatrix.for_dataset(dataset, mu), probs, config.pi
    )


def true_policy_value(table: PotentialOutcomeTable, policy, dataset: EvaluationDataset | None = None) -> float:
    """(1/N) sum_i Y_i(g_i); ``policy`` is a PolicyAssignment or an index array."""
    g = policy.indices(dataset) if isinstance(policy, PolicyAssignment) else np.asarray(policy)
    values = table.values
    return float(values[np.arange(values.shape[0]), g].mean())


def design_variance_aipw(table: PotentialOutcomeTable, mu: np.ndarray, g: np.ndarray, pi: np.ndarray) -> float:
    """Exact design variance of AIPW under independent individual draws."""
    n = len(g)
    idx = np.arange(n)
    pg = pi[g]
    resid = (table.values[idx, g] - mu[idx, g]) / pg
    return float(np.sum(pg * (1 - pg) * resid**2) / n**2)


class Design:
    """A fixed instance whose historical assignment is random.

    With ``pooling`` the estimators run in the pooled location space, while
    draws and outcomes stay in the original space.
    """

    def __init__(
        self,
        dataset: EvaluationDataset,
        table: PotentialOutcomeTable,
        predictions: PredictionMatrix,
        policy,
        pi,
        pooling: PoolingMap | None = None,
        local_unit: str = "case",
    ):
        predictions.check_aligned(dataset)
        self.n = dataset.N
        self.case_of = np.asarray(dataset.case_of)
        self.n_cases = dataset.C
        self.pi = np.asarray(pi, dtype=float)
        self.table = table.values
        self.g = policy.indices(dataset) if isinstance(policy, PolicyAssignment) else np.asarray(policy)
        self.target = true_policy_value(table, self.g)
        self.groups = self.case_of if local_unit == "case" else None
        mu = np.asarray(predictions.values)
        if pooling is None or pooling.is_identity:
            self.fwd = np.arange(len(self.pi))
            self.eval_pi = self.pi
            self.eval_mu = mu
        else:
            self.fwd = pooling.forward_index()
            members = pooling.member_indices()
            keep = np.setdiff1d(np.arange(len(self.pi)), members)
            self.eval_pi = np.append(self.pi[keep], self.pi[members].sum())
            self.eval_mu = np.column_stack([mu[:, keep], mu[:, members] @ pooling.member_weights()])
        self.eval_g = self.fwd[self.g]
        self._rows = np.arange(self.n)
        self.mu_g = self.eval_mu[self._rows, self.eval_g]

    @property
    def n_arms(self) -> int:
        return len(self.pi)

    def evaluate(self, case_A: np.ndarray) -> dict[str, tuple[float, float]]:
        """(point, variance estimate) per estimator for one assignment draw."""
        A_orig = case_A[self.case_of]
        Y = self.table[self._rows, A_orig].astype(float)
        A = self.fwd[A_orig]
        matched = A == self.eval_g
        pi_A = self.eval_pi[A]
        mu_A = self.eval_mu[self._rows, A]
        out = {}
        out[AIPW] = (
            aipw_value(self.mu_g, Y, mu_A, matched, pi_A),
            aipw_variance(Y, mu_A, matched, pi_A),
        )
        pi_L = local_propensities(A, self.eval_g, len(self.eval_pi), self.groups)[A]
        out[AIPWL] = (
            aipw_value(self.mu_g, Y, mu_A, matched, pi_L),
            aipw_variance(Y, mu_A, matched, pi_L),
        )
        try:
            point = ipw_value(Y, matched, pi_A)
            out[IPW] = (point, ipw_variance(Y, matched, pi_A, point))
        except UndefinedEstimateError:
            out[IPW] = (math.nan, math.nan)
        out[MODEL_BASED] = (float(self.mu_g.mean()), math.nan)
        return out


@dataclass(frozen=True)
class ExactMoments:
    estimator: str
    expectation: float
    variance: float
    expected_var_estimate: float
    undefined_weight: float = 0.0


@dataclass(frozen=True)
class EnumerationResult:
    true_value: float
    moments: dict[str, ExactMoments] = field(default_factory=dict)

    def bias(self, estimator: str) -> float:
        return self.moments[estimator].expectation - self.true_value


def enumerate_design(design: Design, limit: int = ENUMERATION_LIMIT) -> EnumerationResult:
    """Exact moments over every case-level assignment vector, weighted by prod pi.

    Vectors on which IPW is undefined are dropped from its moments (which are
    then conditional) and their total weight is reported.
    """
    K, C = design.n_arms, design.n_cases
    if K**C > limit:
        raise ValueError(f"{K}^{C} assignment vectors exceed the enumeration limit {limit}")
    stats = {name: [0.0, 0.0, 0.0, 0.0] for name in ESTIMATORS}  # weight, sum w*V, sum w*V^2, sum w*var
    undefined = 0.0
    for vec in itertools.product(range(K), repeat=C):
        case_A = np.array(vec, dtype=np.int64)
        w = float(np.prod(design.pi[case_A]))
        if w == 0.0:
            continue
        for name, (point, var) in design.evaluate(case_A).items():
            if math.isnan(point):
                undefined += w
                continue
            s = stats[name]
            s[0] += w
            s[1] += w * point
            s[2] += w * point * point
            s[3] += w * (0.0 if math.isnan(var) else var)
    moments = {}
    for name, (tw, s1, s2, s3) in stats.items():
        if tw == 0:
            moments[name] = ExactMoments(name, math.nan, math.nan, math.nan, undefined if name == IPW else 0.0)
            continue
        mean = s1 / tw
        moments[name] = ExactMoments(
            name,
            mean,
            max(s2 / tw - mean * mean, 0.0),
            math.nan if name == MODEL_BASED else s3 / tw,
            undefined if name == IPW else 0.0,
        )
    return EnumerationResult(design.target, moments)


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    R: int
    n_valid: int
    mean_point: float
    bias: float
    emp_var: float
    mean_est_var: float
    coverage: float
    mc_se: float


@dataclass(frozen=True)
class MonteCarloResult:
    R: int
    true_value: float
    summaries: dict[str, EstimatorSummary]
    points: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def __getitem__(self, estimator: str) -> EstimatorSummary:
        return self.summaries[estimator]


def replication_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng([seed, r])


def monte_carlo(design: Design, R: int, seed: int, n_jobs: int = 1) -> MonteCarloResult:
    """Redraw the historical assignment R times.

    Replication ``r`` draws from ``replication_rng(seed, r)`` and results are
    stored by index, so output does not depend on ``n_jobs``.
    """
    if R < 2:
        raise ValueError("monte_carlo needs R >= 2")
    points = {name: np.empty(R) for name in ESTIMATORS}
    est_vars = {name: np.empty(R) for name in ESTIMATORS}

    def run(r: int) -> None:
        case_A = replication_rng(seed, r).choice(design.n_arms, size=design.n_cases, p=design.pi)
        for name, (point, var) in design.evaluate(case_A).items():
            points[name][r] = point
            est_vars[name][r] = var

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(run, range(R)))
    else:
        for r in range(R):
            run(r)

    V = design.target
    summaries = {}
    for name in ESTIMATORS:
        pts, vs = points[name], est_vars[name]
        ok = ~np.isnan(pts)
        pts_ok, vs_ok = pts[ok], vs[ok]
        n_ok = int(ok.sum())
        mean = float(pts_ok.mean()) if n_ok else math.nan
        emp_var = float(pts_ok.var(ddof=1)) if n_ok > 1 else math.nan
        if name == MODEL_BASED:
            mean_est_var = coverage = math.nan
        else:
            mean_est_var = float(vs_ok.mean()) if n_ok else math.nan
            half = Z95 * np.sqrt(vs_ok)
            coverage = float(np.mean((pts_ok - half <= V) & (V <= pts_ok + half))) if n_ok else math.nan
        summaries[name] = EstimatorSummary(
            name, R, n_ok, mean, mean - V, emp_var, mean_est_var, coverage,
            math.sqrt(emp_var / n_ok) if n_ok > 1 else math.nan,
        )
    return MonteCarloResult(R, V, summaries, points)
