"""CSV emission and run manifests.

Output is a pure function of the report: fixed column order, floats written
with ``%.17g`` (round-trips exactly), ``\\n`` line endings, no timestamps.
"""
from __future__ import annotations

import csv
import json
import math
import os
import platform
from collections.abc import Sequence

import numpy as np
import scipy

from ..errors import IoFailure
from .counterexample import CounterexampleReport
from .estimates import EstimateReport
from .weaktype import WeakTypeProfile

__all__ = ["emit_csv", "csv_rows", "write_manifest", "format_float"]

ESTIMATE_COLUMNS = ("estimate_id", "n_samples", "fitted_lower", "fitted_upper", "violations")
WEAKTYPE_COLUMNS = ("row", "eta", "x0_norm", "quasinorm", "quasinorm_grid", "n_nodes", "unconverged")
COUNTEREXAMPLE_COLUMNS = ("row", "eta", "x0_norm", "floor", "box_measure_scaled", "dominant", "others",
                          "dominance_ratio")


def format_float(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_cell(x) for x in v)
    return str(v)


def csv_rows(report) -> tuple[tuple, list[tuple]]:
    """Header and rows for a report (or a sequence of estimate reports)."""
    if isinstance(report, EstimateReport):
        report = [report]
    if isinstance(report, Sequence) and report and all(isinstance(r, EstimateReport) for r in report):
        rows = [(r.estimate_id, r.n_samples, r.fitted_lower, r.fitted_upper, r.violations) for r in report]
        return ESTIMATE_COLUMNS, rows
    if isinstance(report, WeakTypeProfile):
        rows = []
        for k, eta in enumerate(report.eta_grid):
            unconv = report.unconverged[k] if k < len(report.unconverged) else 0
            rows.append(("eta", eta, report.x0_norm[k], report.quasinorm[k], report.quasinorm_grid[k],
                         report.n_nodes[k], unconv))
        rows.append(("fit_slope", "", "", report.fit_slope, "", "", ""))
        return WEAKTYPE_COLUMNS, rows
    if isinstance(report, CounterexampleReport):
        rows = [("eta", r.eta, r.x0_norm, r.floor, r.box_measure_scaled, r.dominant, r.others, r.dominance_ratio)
                for r in report.rows]
        rows.append(("t0", report.t0, "", "", "", "", "", ""))
        rows.append(("dominance_eta", report.dominance_eta, "", "", "", "", "", report.dominance_ratio_large))
        rows.append(("passed", "", "", "", "", "", "", report.passed))
        return COUNTEREXAMPLE_COLUMNS, rows
    raise TypeError(f"no CSV schema for {type(report).__name__}")


def emit_csv(report, path) -> None:
    """Write ``report`` to ``path`` as CSV.  Raises :class:`IoFailure` on any OS error."""
    header, rows = csv_rows(report)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    return obj


def write_manifest(path, command: str, config: dict, outputs: Sequence[str]) -> None:
    """JSON record of the command, its configuration, outputs and library versions."""
    from .. import __version__

    doc = {
        "command": command,
        "config": _jsonable(config),
        "outputs": sorted(os.path.basename(o) for o in outputs),
        "versions": {
            "ouriesz": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
