"""Run logs on disk and the markdown summary of an experiment."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .planner import evaluate_cost
from .sim import LOG_SCALARS, LOG_VECTORS, TrajectoryLog, energy_decay_slope

LOG_FORMAT = "rccm-log/1"


def write_log_csv(log: TrajectoryLog, path):
    cols, data = log.columns()
    meta = {"format": LOG_FORMAT, "name": log.name, "diverged": log.diverged, "meta": log.meta}
    with open(path, "w") as fh:
        fh.write(f"# {json.dumps(meta)}\n")
        fh.write(",".join(cols) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def read_log_csv(path) -> TrajectoryLog:
    with open(path) as fh:
        first = fh.readline()
        meta = json.loads(first[2:]) if first.startswith("# ") else {}
        if meta.get("format") != LOG_FORMAT:
            raise ValueError(f"{path}: not a {LOG_FORMAT} file")
        cols = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    idx = {c: i for i, c in enumerate(cols)}
    kw = {"t": data[:, idx["t"]]}
    for key, n in LOG_VECTORS.items():
        kw[key] = data[:, [idx[f"{key}_{k}"] for k in range(n)]]
    for key in LOG_SCALARS:
        kw[key] = data[:, idx[key]]
    return TrajectoryLog(meta["name"], diverged=bool(meta["diverged"]), meta=meta.get("meta", {}), **kw)


def closed_loop_cost(log: TrajectoryLog, time_weight=5.0) -> float:
    """Cost of the applied inputs over the log horizon."""
    return evaluate_cost(log.t, log.u, log.t[-1] - log.t[0], time_weight)


def run_summary(log: TrajectoryLog) -> dict:
    err = log.estimation_error()
    late = log.t >= 0.1
    return {
        "name": log.name,
        "rows": len(log),
        "diverged": bool(log.diverged),
        "cost": closed_loop_cost(log) if len(log) > 1 else float("nan"),
        "decay_slope": energy_decay_slope(log),
        "eeb_violations": int(np.sum(err > log.delta_theory)),
        "max_est_error_after_0.1s": float(err[late].max()) if late.any() else float("nan"),
        "saturation_events": int(np.sum(log.saturated > 0)),
        "box_exits": int(np.sum(log.in_box < 1)),
        "unconverged_geodesics": int(np.sum(log.geo_converged < 1)),
        "max_position_deviation": float(log.position_deviation().max()) if len(log) else float("nan"),
    }


def emit_report(logs, outdir) -> Path:
    """Per-run CSV files plus summary.md; returns the summary path."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for log in logs:
        write_log_csv(log, out / f"{log.name}.csv")
        rows.append(run_summary(log))
    keys = ["name", "rows", "diverged", "cost", "decay_slope", "eeb_violations",
            "max_est_error_after_0.1s", "saturation_events", "box_exits", "unconverged_geodesics",
            "max_position_deviation"]
    lines = ["# Run summary", "", f"{len(rows)} runs.", ""]
    if rows:
        lines.append("| " + " | ".join(keys) + " |")
        lines.append("|" + "---|" * len(keys))
        for r in rows:
            cells = [f"{r[k]:.4g}" if isinstance(r[k], float) else str(r[k]) for k in keys]
            lines.append("| " + " | ".join(cells) + " |")
    path = out / "summary.md"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_logs(logdir):
    return [read_log_csv(p) for p in sorted(Path(logdir).glob("*.csv"))]
