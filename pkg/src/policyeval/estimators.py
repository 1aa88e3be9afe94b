"""Policy-value estimators with design-based variances.

The array-level functions (``*_value``/``*_variance``) are shared by the
dataset-level operations and by the simulation harness, which calls them
once per redrawn historical assignment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import EvaluationDataset, PolicyAssignment, PredictionMatrix, observed_baseline
from .propensity import ESTIMATED, PositivityError, PropensityModel, positivity_check

Z95 = 1.96

IPW = "IPW"
AIPW = "AIPW"
AIPWL = "AIPWl"
MODEL_BASED = "Model-Based"
ESTIMATORS = (AIPW, AIPWL, IPW, MODEL_BASED)

FLAG_OUT_OF_RANGE = "point outside [0,1]"
FLAG_PLUGIN = "plug-in variance"
FLAG_CASE_CORRELATION = "within-case correlation ignored"


class UndefinedEstimateError(ArithmeticError):
    pass


# --- array-level kernels ----------------------------------------------------


def ipw_value(Y, matched, pi_A) -> float:
    """Self-normalized (Hajek) IPW over matched individuals."""
    w = np.where(matched, 1.0 / np.where(matched, pi_A, 1.0), 0.0)
    total = w.sum()
    if total == 0:
        raise UndefinedEstimateError("IPW undefined: no overlap")
    return float(w @ Y / total)


def ipw_variance(Y, matched, pi_A, point: float) -> float:
    pi = np.where(matched, pi_A, 1.0)
    terms = np.where(matched, (1.0 - pi) * ((Y - point) / pi) ** 2, 0.0)
    return float(terms.sum() / len(Y) ** 2)


def aipw_value(mu_g, Y, mu_A, matched, pi_A) -> float:
    pi = np.where(matched, pi_A, 1.0)
    return float(np.mean(mu_g + np.where(matched, (Y - mu_A) / pi, 0.0)))


def aipw_variance(Y, mu_A, matched, pi_A) -> float:
    pi = np.where(matched, pi_A, 1.0)
    terms = np.where(matched, (1.0 - pi) * ((Y - mu_A) / pi) ** 2, 0.0)
    return float(terms.sum() / len(Y) ** 2)


def local_propensities(A, g, K: int, groups=None) -> np.ndarray:
    """Matched share among units the policy sends to each location.

    ``groups`` maps individuals to cases for case-level counting; entries are
    NaN for locations the policy does not use.
    """
    A = np.asarray(A)
    g = np.asarray(g)
    if groups is not None:
        groups = np.asarray(groups)
        _, first = np.unique(groups, return_index=True)
        A, g = A[first], g[first]
    sent = np.bincount(g, minlength=K).astype(float)
    hit = np.bincount(g[A == g], minlength=K).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(sent > 0, hit / sent, np.nan)


# --- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    point: float
    gains: float
    var_gains: float | None
    ci95: tuple[float, float] | None
    n_matched: int
    flags: tuple[str, ...] = ()


def gains_and_ci(point: float, baseline: float, var: float) -> tuple[float, tuple[float, float]]:
    """Gain over a fixed baseline and its normal 95% interval."""
    if var < 0:
        raise ValueError(f"negative variance {var}")
    gains = point - baseline
    half = Z95 * math.sqrt(var)
    return gains, (gains - half, gains + half)


def _report(name, point, baseline, var, n_matched, flags) -> EstimateReport:
    flags = list(flags)
    if not 0.0 <= point <= 1.0:
        flags.append(FLAG_OUT_OF_RANGE)
    if var is None:
        return EstimateReport(name, point, point - baseline, None, None, n_matched, tuple(flags))
    gains, ci = gains_and_ci(point, baseline, var)
    return EstimateReport(name, point, gains, var, ci, n_matched, tuple(flags))


def _common_flags(dataset: EvaluationDataset, propensities: PropensityModel | None) -> list[str]:
    flags = []
    if propensities is not None and propensities.kind == ESTIMATED:
        flags.append(FLAG_PLUGIN)
    if (dataset.case_sizes > 1).any():
        flags.append(FLAG_CASE_CORRELATION)
    return flags


def _enforce(dataset, propensities, policy, floor, enforce_positivity):
    if enforce_positivity:
        result = positivity_check(propensities, policy, dataset, floor)
        if not result.passed:
            raise PositivityError(result)


def _mu(predictions: PredictionMatrix, dataset: EvaluationDataset, idx: np.ndarray) -> np.ndarray:
    predictions.check_aligned(dataset)
    return predictions.values[np.arange(dataset.N), idx]


def _baseline(dataset, baseline):
    return observed_baseline(dataset) if baseline is None else baseline


def ipw_estimate(
    dataset: EvaluationDataset,
    propensities: PropensityModel,
    policy: PolicyAssignment,
    *,
    baseline: float | None = None,
    floor: float = 0.0,
    enforce_positivity: bool = True,
) -> EstimateReport:
    """Ratio-form IPW; uses outcomes and propensities only."""
    _enforce(dataset, propensities, policy, floor, enforce_positivity)
    g = policy.indices(dataset)
    matched = dataset.A == g
    pi_A = propensities.lookup(dataset.A)
    point = ipw_value(dataset.Y, matched, pi_A)
    var = ipw_variance(dataset.Y, matched, pi_A, point)
    flags = _common_flags(dataset, propensities)
    return _report(IPW, point, _baseline(dataset, baseline), var, int(matched.sum()), flags)


def aipw_estimate(
    dataset: EvaluationDataset,
    propensities: PropensityModel,
    predictions: PredictionMatrix,
    policy: PolicyAssignment,
    *,
    baseline: float | None = None,
    floor: float = 0.0,
    enforce_positivity: bool = True,
) -> EstimateReport:
    _enforce(dataset, propensities, policy, floor, enforce_positivity)
    g = policy.indices(dataset)
    matched = dataset.A == g
    pi_A = propensities.lookup(dataset.A)
    mu_A = _mu(predictions, dataset, dataset.A)
    point = aipw_value(_mu(predictions, dataset, g), dataset.Y, mu_A, matched, pi_A)
    var = aipw_variance(dataset.Y, mu_A, matched, pi_A)
    flags = _common_flags(dataset, propensities)
    return _report(AIPW, point, _baseline(dataset, baseline), var, int(matched.sum()), flags)


def local_propensity_table(dataset: EvaluationDataset, policy: PolicyAssignment, unit: str = "case") -> dict:
    """pi_L(a) for every location the policy uses."""
    g = policy.indices(dataset)
    table = local_propensities(dataset.A, g, dataset.K, dataset.case_of if unit == "case" else None)
    return {lid: float(v) for lid, v in zip(dataset.location_ids, table) if not np.isnan(v)}


def aipwl_estimate(
    dataset: EvaluationDataset,
    predictions: PredictionMatrix,
    policy: PolicyAssignment,
    *,
    baseline: float | None = None,
    unit: str = "case",
) -> EstimateReport:
    """AIPW with pi_L(g_i) in place of the historical propensity."""
    g = policy.indices(dataset)
    matched = dataset.A == g
    pi_L = local_propensities(dataset.A, g, dataset.K, dataset.case_of if unit == "case" else None)
    pi_A = pi_L[dataset.A]
    # a match at a forces pi_L(a) >= 1 / #units sent to a
    assert not (matched & ~(pi_A > 0)).any()
    mu_A = _mu(predictions, dataset, dataset.A)
    point = aipw_value(_mu(predictions, dataset, g), dataset.Y, mu_A, matched, pi_A)
    var = aipw_variance(dataset.Y, mu_A, matched, pi_A)
    flags = _common_flags(dataset, None)
    return _report(AIPWL, point, _baseline(dataset, baseline), var, int(matched.sum()), flags)


def model_based_estimate(
    predictions: PredictionMatrix,
    policy: PolicyAssignment,
    dataset: EvaluationDataset,
    *,
    baseline: float | None = None,
) -> EstimateReport:
    g = policy.indices(dataset)
    point = float(np.mean(_mu(predictions, dataset, g)))
    return _report(MODEL_BASED, point, _baseline(dataset, baseline), None, int((dataset.A == g).sum()), ())


def var_aipw(
    dataset: EvaluationDataset,
    propensities: PropensityModel | None,
    predictions: PredictionMatrix,
    policy: PolicyAssignment,
    mode: str = "marginal",
    unit: str = "case",
) -> float:
    """Design-based variance estimate for AIPW (``marginal``) or AIPWl (``local``)."""
    g = policy.indices(dataset)
    matched = dataset.A == g
    if mode == "marginal":
        pi_A = propensities.lookup(dataset.A)
    elif mode == "local":
        pi_A = local_propensities(dataset.A, g, dataset.K, dataset.case_of if unit == "case" else None)[dataset.A]
    else:
        raise ValueError(f"mode must be 'marginal' or 'local', got {mode!r}")
    return aipw_variance(dataset.Y, _mu(predictions, dataset, dataset.A), matched, pi_A)


def var_ipw(dataset: EvaluationDataset, propensities: PropensityModel, policy: PolicyAssignment, point: float) -> float:
    g = policy.indices(dataset)
    return ipw_variance(dataset.Y, dataset.A == g, propensities.lookup(dataset.A), point)


def evaluate_all(
    dataset: EvaluationDataset,
    propensities: PropensityModel,
    predictions: PredictionMatrix,
    policy: PolicyAssignment,
    *,
    baseline: float | None = None,
    floor: float = 0.0,
    enforce_positivity: bool = True,
    local_unit: str = "case",
) -> list[EstimateReport]:
    """All four estimators, in table column order (AIPW, AIPWl, IPW, Model-Based)."""
    _enforce(dataset, propensities, policy, floor, enforce_positivity)
    baseline = _baseline(dataset, baseline)
    kw = dict(baseline=baseline, enforce_positivity=False)
    return [
        aipw_estimate(dataset, propensities, predictions, policy, **kw),
        aipwl_estimate(dataset, predictions, policy, baseline=baseline, unit=local_unit),
        ipw_estimate(dataset, propensities, policy, **kw),
        model_based_estimate(predictions, policy, dataset, baseline=baseline),
    ]
