#!/usr/bin/env python3
"""Run the cumulative ablation grid on a fresh phantom cohort.

Generates a dataset if --data is not given, then trains every ablation
row (head-only through the full model) for a small number of epochs and
prints the toggle/metric table. This is a smoke-scale experiment driver;
for publication-scale numbers raise --epochs and the dataset size.
"""

import argparse
import json
import tempfile
from pathlib import Path

from fbw3d.cli import main as cli_main


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", help="existing manifest.json (generated if omitted)")
    parser.add_argument("--out", required=True)
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--n", type=int, default=40, help="cases to generate")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--width", type=float, default=0.25)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        manifest = args.data
    else:
        rc = cli_main([
            "phantom", "--n", str(args.n), "--seed", str(args.seed),
            "--out", str(out / "data"),
        ])
        if rc != 0:
            raise SystemExit(rc)
        manifest = str(out / "data" / "manifest.json")

    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(
            dict(
                epochs=args.epochs, batch_size=8, base_lr=3e-4, warmup_epochs=1,
                width_multiplier=args.width, input_dims=[64, 64, 64],
                seed=args.seed,
            ),
            fh,
        )
        config_path = fh.name

    rc = cli_main([
        "ablate", "--data", manifest, "--out", str(out / "grid"),
        "--config", config_path, "--epochs", str(args.epochs),
    ])
    raise SystemExit(rc)


if __name__ == "__main__":
    main()
