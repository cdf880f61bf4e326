#!/usr/bin/env python3
"""Desk-scale learning experiment: supervised vs. semi-supervised.

Generates a 352-case phantom cohort (256/32/64 split), trains the fusion
network twice — once supervised-only, once with the synthetic-pair
semi-supervised framework — evaluates both on the held-out test split,
and writes results.json. The acceptance suite accepts this file via the
FBW3D_DESK_RESULTS environment variable, so the two multi-hour trainings
only have to happen once:

    python3 scripts/desk_scale_run.py --out /tmp/desk
    FBW3D_DESK_RESULTS=/tmp/desk/results.json pytest tests/test_acceptance.py -s
"""

import argparse
import json
import time
from pathlib import Path

from fbw3d import phantom
from fbw3d.cli import main as cli_main
from fbw3d.trainer import TrainConfig, fit


def run_protocol(work_dir: Path, log=None) -> dict:
    manifest = work_dir / "data" / "manifest.json"
    if not manifest.exists():
        manifest = phantom.generate_dataset(
            352, seed=101, pop=phantom.PopulationParams(),
            out_dir=work_dir / "data", split_counts=(256, 32, 64),
        )
    config = TrainConfig(
        epochs=60, batch_size=16, base_lr=3e-4, warmup_epochs=5,
        width_multiplier=0.25, input_dims=(64, 64, 64), seed=5,
    )
    t0 = time.time()
    results = {}
    for name, use_sslf in (("mffn", False), ("mffn_sslf", True)):
        fit(manifest, config, work_dir / name, use_sslf=use_sslf, log=log)
        code = cli_main([
            "eval", "--checkpoint", str(work_dir / name / "checkpoint_best.pt"),
            "--data", str(manifest), "--split", "test",
            "--out", str(work_dir / name / "report"),
        ])
        if code != 0:
            raise RuntimeError(f"eval failed for run {name!r}")
        rep = json.loads((work_dir / name / "report" / "report.json").read_text())
        results[name] = rep["Model (student)"]
    results["runtime_s"] = time.time() - t0
    return results


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="working directory")
    args = parser.parse_args()
    work_dir = Path(args.out)
    work_dir.mkdir(parents=True, exist_ok=True)

    def log(row):
        print(
            f"ep {row['epoch']:3d} total {row['train_losses']['total']:.5f} "
            f"val MAE {row['val_mae_g']:.1f} g MAPE {row['val_mape_pct']:.2f}%",
            flush=True,
        )

    results = run_protocol(work_dir, log=log)
    (work_dir / "results.json").write_text(json.dumps(results, indent=1) + "\n")
    print(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
