"""Command-line surface: phantom generation, training, evaluation,
single-case prediction, and the ablation grid.

Exit codes: 0 success, 2 usage/validation error, 1 runtime failure.
Seed precedence: --seed flag > FBW3D_SEED env var > config file value.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, phantom, trainer as trainer_mod
from .datamodel import read_manifest, read_volume, assemble_input, resize_volume
from .network import ArchToggles
from .trainer import CaseStore, TrainConfig


class UsageError(Exception):
    pass


ABLATION_FLAGS = (
    "weight_sharing",
    "feature_fusion",
    "channel_attention",
    "spatial_attention",
    "rank_loss",
    "sslf",
    "head_input",
    "abdomen_input",
)

# Named rows of the ablation grid, in cumulative-component order.
ABLATION_ROWS = {
    "head-only": {"weight_sharing": False, "feature_fusion": False,
                  "channel_attention": False, "spatial_attention": False,
                  "rank_loss": False, "sslf": False, "abdomen_input": False},
    "abd-only": {"weight_sharing": False, "feature_fusion": False,
                 "channel_attention": False, "spatial_attention": False,
                 "rank_loss": False, "sslf": False, "head_input": False},
    "dual": {"weight_sharing": False, "feature_fusion": False,
             "channel_attention": False, "spatial_attention": False,
             "rank_loss": False, "sslf": False},
    "ws": {"feature_fusion": False, "channel_attention": False,
           "spatial_attention": False, "rank_loss": False, "sslf": False},
    "ff": {"channel_attention": False, "spatial_attention": False,
           "rank_loss": False, "sslf": False},
    "ca": {"spatial_attention": False, "rank_loss": False, "sslf": False},
    "sa": {"rank_loss": False, "sslf": False},
    "mffn": {"sslf": False},
    "full": {},
}


def parse_ablation(names: list[str]) -> dict[str, dict]:
    rows = {}
    for name in names:
        key = name.strip()
        base = "full"
        overrides = {}
        if key.startswith("no-"):
            flag = key[3:].replace("-", "_")
            if flag not in ABLATION_FLAGS:
                raise UsageError(f"unknown ablation toggle {key!r}")
            overrides = {flag: False}
        elif key in ABLATION_ROWS:
            overrides = dict(ABLATION_ROWS[key])
        else:
            raise UsageError(
                f"unknown ablation row {key!r}; known rows: "
                f"{sorted(ABLATION_ROWS)} or no-<toggle>"
            )
        row = {flag: True for flag in ABLATION_FLAGS}
        row.update(overrides)
        if not (row["head_input"] or row["abdomen_input"]):
            raise UsageError(f"ablation {key!r} disables both inputs")
        rows[key] = row
    return rows


def _resolve_seed(flag_seed, config_seed: int) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get("FBW3D_SEED")
    if env is not None:
        return int(env)
    return config_seed


def _toggles_and_modes(row: dict) -> tuple[ArchToggles, bool, bool]:
    toggles = ArchToggles(
        weight_sharing=row["weight_sharing"],
        feature_fusion=row["feature_fusion"],
        channel_attention=row["channel_attention"],
        spatial_attention=row["spatial_attention"],
        head_input=row["head_input"],
        abdomen_input=row["abdomen_input"],
    )
    return toggles, row["sslf"], row["rank_loss"]


def cmd_phantom(args) -> int:
    if args.n < 10:
        raise UsageError(f"--n must be >= 10, got {args.n}")
    pop = phantom.PopulationParams()
    if args.pop_config:
        data = json.loads(Path(args.pop_config).read_text())
        known = {f.name for f in dataclasses.fields(phantom.PopulationParams)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown population key(s): {sorted(unknown)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        pop = phantom.PopulationParams(**data)
    seed = _resolve_seed(args.seed, 0)
    split_counts = None
    if args.split_counts:
        split_counts = tuple(int(x) for x in args.split_counts.split(","))
        if len(split_counts) != 3:
            raise UsageError("--split-counts needs three comma-separated integers")
    manifest = phantom.generate_dataset(
        args.n, seed, pop, args.out,
        dims=tuple(args.dims), spacing=tuple(args.spacing),
        split_counts=split_counts,
    )
    print(manifest)
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    seed = _resolve_seed(args.seed, config.seed)
    config = dataclasses.replace(config, seed=seed)
    rows = parse_ablation(args.ablation) if args.ablation else {"full": parse_ablation(["full"])["full"]}
    if len(rows) != 1:
        raise UsageError("--ablation takes exactly one row for train; use ablate for grids")
    ((name, row),) = rows.items()
    toggles, use_sslf, use_rank = _toggles_and_modes(row)
    result = trainer_mod.fit(
        args.data, config, args.out,
        toggles=toggles, use_sslf=use_sslf, use_rank_loss=use_rank,
        resume_from=args.resume,
        log=lambda r: print(
            f"epoch {r['epoch']:4d}  total {r['train_losses']['total']:.5f}  "
            f"val MAE {r['val_mae_g']:.1f} g  MAPE {r['val_mape_pct']:.2f}%",
            flush=True,
        ),
    )
    print(result.best_checkpoint)
    return 0


def _evaluate_checkpoint(checkpoint: Path, manifest: Path, split: str, which: str):
    payload = trainer_mod.load_checkpoint(checkpoint)
    model, normalizer, config = trainer_mod.model_from_checkpoint(payload, which)
    store = CaseStore(manifest)
    records = store.split(split)
    if not records:
        raise UsageError(f"split {split!r} is empty in {manifest}")
    preds, trues = [], []
    with torch.no_grad():
        for record in records:
            case = store.case(record)
            x_h, x_a = trainer_mod.case_to_tensors(case, config.input_dims)
            p = model(x_h, x_a)
            preds.append(normalizer.denormalize(float(p)))
            trues.append(record.weight_g)
    return np.array(preds), np.array(trues), records


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    preds, trues, records = _evaluate_checkpoint(
        checkpoint, Path(args.data), args.split, args.model
    )
    rows = []
    coeffs = evaluation.load_coefficients()
    with_bio = [r for r in records if r.biometrics_mm]
    if with_bio:
        bio_true = np.array([r.weight_g for r in with_bio])
        hadlock = np.array([
            evaluation.hadlock_efw(
                r.biometrics_mm["hc"], r.biometrics_mm["ac"],
                r.biometrics_mm["fl"], r.biometrics_mm["bpd"], coeffs,
            )
            for r in with_bio
        ])
        ig21 = np.array([
            evaluation.intergrowth_efw(
                r.biometrics_mm["hc"], r.biometrics_mm["ac"], coeffs
            )
            for r in with_bio
        ])
        rows.append(("Hadlock", evaluation.compute_metrics(hadlock, bio_true)))
        rows.append(("INTERGROWTH-21st", evaluation.compute_metrics(ig21, bio_true)))
    model_report = evaluation.compute_metrics(preds, trues)
    rows.append((f"Model ({args.model})", model_report))
    table = evaluation.format_table(rows)
    print(table)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(table + "\n")
        (out_dir / "report.json").write_text(
            json.dumps(
                {name: dataclasses.asdict(rep) for name, rep in rows}, indent=1
            )
            + "\n"
        )
    return 0


def cmd_predict(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    if args.interval_days not in (0, 1, 2, 3):
        raise UsageError(f"--interval-days must be in 0..3, got {args.interval_days}")
    payload = trainer_mod.load_checkpoint(checkpoint)
    model, normalizer, config = trainer_mod.model_from_checkpoint(payload, args.model)
    head = resize_volume(read_volume(args.head), config.input_dims)
    abd = resize_volume(read_volume(args.abdomen), config.input_dims)
    x_h = torch.from_numpy(assemble_input(head, args.interval_days))
    x_a = torch.from_numpy(assemble_input(abd, args.interval_days))
    with torch.no_grad():
        p = model(x_h, x_a)
    print(f"{normalizer.denormalize(float(p)):.1f}")
    return 0


def cmd_ablate(args) -> int:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    seed = _resolve_seed(args.seed, config.seed)
    config = dataclasses.replace(config, seed=seed, epochs=args.epochs)
    names = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    rows = parse_ablation(names)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    flag_header = ("3DR18", "WS", "FF", "CA", "SA", "RL", "SSLF", "Head", "Abd")
    for name, row in rows.items():
        toggles, use_sslf, use_rank = _toggles_and_modes(row)
        run_dir = out_dir / name.replace("/", "_")
        fit_result = trainer_mod.fit(
            args.data, config, run_dir,
            toggles=toggles, use_sslf=use_sslf, use_rank_loss=use_rank,
        )
        preds, trues, _ = _evaluate_checkpoint(
            fit_result.best_checkpoint, Path(args.data), "test", "student"
        )
        report = evaluation.compute_metrics(preds, trues)
        marks = (
            "x",
            "x" if row["weight_sharing"] else "",
            "x" if row["feature_fusion"] else "",
            "x" if row["channel_attention"] else "",
            "x" if row["spatial_attention"] else "",
            "x" if row["rank_loss"] else "",
            "x" if row["sslf"] else "",
            "x" if row["head_input"] else "",
            "x" if row["abdomen_input"] else "",
        )
        results.append((name, marks, report))
        print(f"{name}: MAE {report.mae_g:.1f} g, MAPE {report.mape_pct:.2f}%", flush=True)
    lines = ["  ".join(h.ljust(5) for h in flag_header) + "  MAE(g)          MAPE(%)"]
    for name, marks, report in results:
        lines.append(
            "  ".join(mk.ljust(5) for mk in marks)
            + f"  {report.mae_g:.1f} ± {report.mae_std_g:.1f}"
            + f"  {report.mape_pct:.1f} ± {report.mape_std_pct:.1f}"
            + f"  [{name}]"
        )
    table = "\n".join(lines)
    print(table)
    (out_dir / "ablation_report.txt").write_text(table + "\n")
    (out_dir / "ablation_report.json").write_text(
        json.dumps(
            {
                name: {"toggles": dict(zip(flag_header, marks)),
                       "metrics": dataclasses.asdict(report)}
                for name, marks, report in results
            },
            indent=1,
        )
        + "\n"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbw3d",
        description="Fetal birth weight estimation from paired 3D volumes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--pop-config", default=None)
    p.add_argument("--dims", type=int, nargs=3, default=list(phantom.DEFAULT_DIMS))
    p.add_argument("--spacing", type=float, nargs=3, default=list(phantom.DEFAULT_SPACING))
    p.add_argument("--split-counts", default=None,
                   help="train,val,test counts overriding the 7:1:2 split")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="JSON file of TrainConfig keys")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablation", nargs="*", default=None,
                   help="named row or no-<toggle> modifiers")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--model", choices=("student", "teacher"), default="student")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict weight for one head/abdomen pair")
    p.add_argument("--head", required=True)
    p.add_argument("--abdomen", required=True)
    p.add_argument("--interval-days", type=int, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", choices=("student", "teacher"), default="student")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run the ablation grid at desk scale")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--rows", default=None, help="comma-separated row names")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
