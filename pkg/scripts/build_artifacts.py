"""Rebuild the shipped plans, tier models and estimator calibration.

    python scripts/build_artifacts.py [--metric PATH] [--out src/rccm/data]

The metric is produced separately by scripts/synthesize_metric.py.
"""
import argparse
import time
from pathlib import Path

from rccm.experiment import build_artifacts, load_benchmark

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--metric", default=str(ROOT / "src/rccm/data/quadrotor_metric.json"))
    ap.add_argument("--out", default=str(ROOT / "src/rccm/data"))
    ap.add_argument("--tasks", default=str(ROOT / "src/rccm/data/tasks.toml"))
    args = ap.parse_args()
    bench = load_benchmark(args.tasks)
    t0 = time.time()
    build_artifacts(bench, args.out, args.metric,
                    progress=lambda msg: print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True))


if __name__ == "__main__":
    main()
