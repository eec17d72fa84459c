"""Write the shipped scenario files and the matrix configuration.

    python scripts/write_scenarios.py [--out src/rccm/data/scenarios]

Run after scripts/build_artifacts.py so that the calibrated estimation error
bound is baked into every scenario.
"""
import argparse
from pathlib import Path

from rccm.experiment import MATRIX_CONTROLLERS, TIERS, load_benchmark, scenario_for

ROOT = Path(__file__).resolve().parents[1]

MATRIX = """# Full benchmark matrix: every task x learning tier x controller, acceptance mode.
schema = "rccm-matrix/1"
tiers = [{tiers}]
controllers = [{controllers}]
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "src/rccm/data/scenarios"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = load_benchmark()
    for task in bench.tasks:
        for tier in TIERS:
            for ctrl in MATRIX_CONTROLLERS:
                cfg = scenario_for(bench, task.name, tier, ctrl)
                (out / f"{cfg.name}.toml").write_text(cfg.to_toml())
    quote = lambda items: ", ".join(f'"{v}"' for v in items)  # noqa: E731
    (out / "matrix.toml").write_text(MATRIX.format(tiers=quote(TIERS), controllers=quote(MATRIX_CONTROLLERS)))
    print(f"wrote {len(bench.tasks) * len(TIERS) * len(MATRIX_CONTROLLERS)} scenarios and matrix.toml to {out}")


if __name__ == "__main__":
    main()
