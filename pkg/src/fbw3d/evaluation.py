"""Gram-space metrics and the clinical estimated-fetal-weight baselines.

The Hadlock and INTERGROWTH-21st formulas are transcribed into a bundled,
human-auditable coefficient file (``data/formula_coefficients.json``) with
provenance notes; several published Hadlock variants exist, so the variant
is selectable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np


@dataclass(frozen=True)
class MetricReport:
    """MAE/RMSE/MAPE with per-case dispersion.

    The "+-" values are sample standard deviations of the per-case
    quantities; for RMSE the dispersion of the per-case absolute errors is
    reported (the root of a mean has no per-case analogue).
    """

    mae_g: float
    mae_std_g: float
    rmse_g: float
    abs_err_std_g: float
    mape_pct: float
    mape_std_pct: float
    n_cases: int


def compute_metrics(pred_g, true_g) -> MetricReport:
    pred = np.asarray(pred_g, dtype=np.float64)
    true = np.asarray(true_g, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError(
            f"predictions and labels must be equal-length nonempty vectors, "
            f"got {pred.shape} and {true.shape}"
        )
    if np.any(true <= 0):
        raise ValueError("true weights must be positive for percentage errors")
    abs_err = np.abs(pred - true)
    ape = abs_err / true * 100.0
    std = lambda v: float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return MetricReport(
        mae_g=float(abs_err.mean()),
        mae_std_g=std(abs_err),
        rmse_g=float(np.sqrt((abs_err**2).mean())),
        abs_err_std_g=std(abs_err),
        mape_pct=float(ape.mean()),
        mape_std_pct=std(ape),
        n_cases=int(pred.size),
    )


def load_coefficients() -> dict:
    path = resources.files("fbw3d").joinpath("data/formula_coefficients.json")
    return json.loads(path.read_text())


def hadlock_efw(
    hc_mm: float,
    ac_mm: float,
    fl_mm: float,
    bpd_mm: float,
    coeffs: dict | None = None,
    variant: str | None = None,
) -> float:
    """Hadlock log-linear estimated fetal weight in grams.

    Inputs in millimeters; the published coefficients expect centimeters.
    """
    if min(hc_mm, ac_mm, fl_mm, bpd_mm) <= 0:
        raise ValueError("all biometrics must be positive")
    coeffs = coeffs if coeffs is not None else load_coefficients()
    table = coeffs["hadlock"]
    variant = variant or table["default_variant"]
    if variant not in table["variants"]:
        raise KeyError(
            f"unknown Hadlock variant {variant!r}; have {sorted(table['variants'])}"
        )
    c = table["variants"][variant]
    hc, ac, fl, bpd = hc_mm / 10.0, ac_mm / 10.0, fl_mm / 10.0, bpd_mm / 10.0
    terms = {
        "intercept": 1.0,
        "hc": hc,
        "ac": ac,
        "fl": fl,
        "bpd": bpd,
        "ac_fl": ac * fl,
        "bpd_ac": bpd * ac,
    }
    log10_efw = sum(coef * terms[name] for name, coef in c.items())
    return 10.0**log10_efw


def intergrowth_efw(hc_mm: float, ac_mm: float, coeffs: dict | None = None) -> float:
    """INTERGROWTH-21st estimated fetal weight in grams (HC/AC only)."""
    if min(hc_mm, ac_mm) <= 0:
        raise ValueError("all biometrics must be positive")
    coeffs = coeffs if coeffs is not None else load_coefficients()
    c = coeffs["intergrowth21"]
    hc = hc_mm / 10.0 / 100.0
    ac = ac_mm / 10.0 / 100.0
    ln_efw = (
        c["intercept"]
        + c["ac3"] * ac**3
        + c["ac3_log_ac"] * ac**3 * math.log(ac)
        + c["hc"] * hc
    )
    return math.exp(ln_efw)


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Aligned text table with Method / MAE / RMSE / MAPE columns."""
    header = ("Method", "MAE(g)", "RMSE(g)", "MAPE(%)")
    body = [
        (
            name,
            f"{r.mae_g:.1f} ± {r.mae_std_g:.1f}",
            f"{r.rmse_g:.1f} ± {r.abs_err_std_g:.1f}",
            f"{r.mape_pct:.1f} ± {r.mape_std_pct:.1f}",
        )
        for name, r in rows
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(4)]
    lines = []
    for row in [header] + body:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)
