import json
import logging
import math
import os

import pandas as pd

from bbvi.models import RunResult, SweepRow, VerificationReport
from bbvi.services.sweep_runner import sweep_frame

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["trial", "optimizer", "conditioner", "estimator", "stepsize", "init_scale", "iteration", "kl", "param_dist_sq", "elbo", "clamps"]
SWEEP_COLUMNS = ["trial", "optimizer", "conditioner", "stepsize", "init_scale", "iters_to_eps", "censored", "final_kl"]
FLOAT_FORMAT = "%.17g"


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_csv(frame: pd.DataFrame, path: str):
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"ReportWriter: wrote {len(frame)} rows to {path}")


def trajectory_frame(results: list[tuple[int, RunResult]], optimizer: str, conditioner: str, estimator: str, stepsize: float, init_scale: float) -> pd.DataFrame:
    rows = []
    for trial, result in results:
        for record in result.records:
            rows.append(
                {
                    "trial": trial,
                    "optimizer": optimizer,
                    "conditioner": conditioner,
                    "estimator": estimator,
                    "stepsize": float(stepsize),
                    "init_scale": float(init_scale),
                    "iteration": record.iteration,
                    "kl": record.kl,
                    "param_dist_sq": record.param_dist_sq,
                    "elbo": record.elbo,
                    "clamps": record.domain_clamps,
                }
            )
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def write_trajectories(path: str, results, optimizer: str, conditioner: str, estimator: str, stepsize: float, init_scale: float):
    _write_csv(trajectory_frame(results, optimizer, conditioner, estimator, stepsize, init_scale), path)


def write_sweep(path: str, rows: list[SweepRow]):
    _write_csv(sweep_frame(rows)[SWEEP_COLUMNS], path)


def _json_number(value: float):
    # JSON has no NaN/inf literals; they are written as strings.
    return value if math.isfinite(value) else str(value)


def report_records(reports: list[VerificationReport]) -> list[dict]:
    return [
        {
            "name": report.check_name,
            "status": report.status,
            "statistic": _json_number(report.statistic),
            "tolerance": _json_number(report.tolerance),
            "seed": report.seed,
            "detail": report.detail,
        }
        for report in reports
    ]


def write_report(path: str, reports: list[VerificationReport]):
    """One JSON object per line, in suite order."""
    _ensure_parent(path)
    with open(path, "w", newline="\n") as f:
        for record in report_records(reports):
            f.write(json.dumps(record, sort_keys=False) + "\n")
    logger.info(f"ReportWriter: wrote {len(reports)} verification records to {path}")


def summary_table(reports: list[VerificationReport]) -> str:
    name_width = max([len("check")] + [len(report.check_name) for report in reports])
    lines = [f"{'check':<{name_width}}  {'status':<6}  {'statistic':>12}  {'tolerance':>12}"]
    for report in reports:
        lines.append(f"{report.check_name:<{name_width}}  {report.status:<6}  {report.statistic:>12.6g}  {report.tolerance:>12.6g}")
    passed = sum(1 for report in reports if report.status == "pass")
    skipped = sum(1 for report in reports if report.status == "skip")
    lines.append(f"{passed} passed, {skipped} skipped, {len(reports) - passed - skipped} failed")
    return "\n".join(lines)


def sweep_summary_table(summary: pd.DataFrame) -> str:
    return summary.to_string(index=False, float_format=lambda x: f"{x:.6g}")
