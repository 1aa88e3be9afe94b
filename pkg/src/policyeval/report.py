"""Report writers: machine-readable records and the four-column summary table.

The table is rendered *from* parsed records so every printed number traces
back to one record field.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

from .estimators import ESTIMATORS, EstimateReport

RECORD_FIELDS = ("scenario", "estimator", "point", "gains", "var_gains", "ci_lo", "ci_hi", "n_matched")
MC_FIELDS = ("estimator", "R", "bias", "emp_var", "mean_est_var", "coverage", "mc_se")
ENUM_FIELDS = ("estimator", "expectation", "true_value", "bias", "exact_var", "expected_est_var", "undefined_weight")
SUMMARY_FIELDS = ("scenario", "estimator", "point", "baseline", "gains_pp", "gains_pct")


def _num(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def _write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if not isinstance(v, str) else v for v in row])


def report_rows(scenario: str, reports: Sequence[EstimateReport]) -> list[list]:
    rows = []
    for r in reports:
        lo, hi = r.ci95 if r.ci95 is not None else (None, None)
        rows.append([scenario, r.estimator, r.point, r.gains, r.var_gains, lo, hi, r.n_matched])
    return rows


def write_records(path: str | Path, scenario: str, reports: Sequence[EstimateReport]) -> None:
    _write_csv(path, RECORD_FIELDS, report_rows(scenario, reports))


def read_records(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            parsed = dict(row)
            for key in ("point", "gains", "var_gains", "ci_lo", "ci_hi"):
                parsed[key] = float(row[key]) if row[key] != "" else None
            parsed["n_matched"] = int(row["n_matched"])
            out.append(parsed)
    return out


def format_table(records: Sequence[dict], baseline: float | None = None) -> str:
    """Four-column table: 3 decimals for points and gains, 4 for variances."""
    by_est = {r["estimator"]: r for r in records}
    cols = [e for e in ESTIMATORS if e in by_est]

    def cell(r, key):
        v = r[key]
        if v is None:
            return "NA"
        if key == "var_gains":
            return f"({v:.4f})"
        return f"{v:.3f}"

    def ci(r):
        if r["ci_lo"] is None:
            return "NA"
        return f"[{r['ci_lo']:.3f}, {r['ci_hi']:.3f}]"

    lines = [
        ["", *cols],
        ["Point Estimate", *(cell(by_est[c], "point") for c in cols)],
        ["Gains", *(cell(by_est[c], "gains") for c in cols)],
        ["Var(Gains)", *(cell(by_est[c], "var_gains") for c in cols)],
        ["CI of Gains", *(ci(by_est[c]) for c in cols)],
    ]
    widths = [max(len(row[j]) for row in lines) for j in range(len(lines[0]))]
    buf = io.StringIO()
    if baseline is not None:
        buf.write(f"Gains relative to observed baseline {baseline:.3f}; CI are 95%.\n")
    for row in lines:
        buf.write("  ".join(text.ljust(w) for text, w in zip(row, widths)).rstrip() + "\n")
    return buf.getvalue()


def write_table(
    path: str | Path,
    records_path: str | Path,
    baseline: float,
    config: dict,
    flags: dict[str, Sequence[str]] | None = None,
) -> None:
    text = format_table(read_records(records_path), baseline)
    for est, fl in (flags or {}).items():
        if fl:
            text += f"note: {est}: {'; '.join(fl)}\n"
    text += "config: " + json.dumps(config, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def write_gains_summary(path: str | Path, entries: Sequence[tuple[str, float, Sequence[EstimateReport]]]) -> None:
    """Percentage-point and percent gains per scenario and estimator."""
    rows = []
    for scenario, baseline, reports in entries:
        for r in reports:
            pct = 100.0 * r.gains / baseline if baseline else math.nan
            rows.append([scenario, r.estimator, r.point, baseline, 100.0 * r.gains, pct])
    _write_csv(path, SUMMARY_FIELDS, rows)


def write_mc_records(path: str | Path, result) -> None:
    rows = [
        [s.estimator, s.R, s.bias, s.emp_var, s.mean_est_var, s.coverage, s.mc_se]
        for s in result.summaries.values()
    ]
    _write_csv(path, MC_FIELDS, rows)


def write_enumeration_records(path: str | Path, result) -> None:
    rows = [
        [m.estimator, m.expectation, result.true_value, m.expectation - result.true_value,
         m.variance, m.expected_var_estimate, m.undefined_weight]
        for m in result.moments.values()
    ]
    _write_csv(path, ENUM_FIELDS, rows)
