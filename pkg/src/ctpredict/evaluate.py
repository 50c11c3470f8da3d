"""Evaluation metrics and experiment reports.

Per-case metrics compare thresholded probability volumes against the final
lesion; cohort comparisons use a paired bootstrap over cases. Scenario
predictions re-run the same case under counterfactual treatment metadata to
bracket the tissue at risk.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass

import numpy as np

from .network import Model
from .phantom import TreatmentMetadata
from .training import (
    PAD_OUT,
    TrainingCase,
    _meta_features,
    predict_case,
    soft_dice,
)


def voxel_volume_ml(spacing) -> float:
    return float(np.prod(spacing)) / 1000.0


def volume_ml(binary, spacing) -> float:
    """Volume of a (possibly soft) voxel field in milliliters."""
    return float(np.sum(binary)) * voxel_volume_ml(spacing)


def predicted_volume_ml(prob, spacing, mask=None) -> float:
    """Sum of predicted probabilities times the voxel volume.

    The volume readout is deliberately not thresholded; a mask restricts
    the sum to intracranial voxels.
    """
    p = np.asarray(prob, dtype=np.float64)
    if mask is not None:
        p = p * np.asarray(mask, dtype=np.float64)
    return float(p.sum()) * voxel_volume_ml(spacing)


def dice_score(a, b) -> float:
    """Overlap of two binary fields; 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def pr_auc(prob, target, mask) -> float:
    """Average precision over the pooled masked voxels.

    Step-wise area under the precision-recall curve, scanning thresholds
    from the highest predicted probability down.
    """
    m = np.asarray(mask, dtype=bool)
    p = np.asarray(prob)[m]
    y = np.asarray(target)[m] > 0.5
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-p, kind="stable")
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    precision = tp / np.arange(1, len(y_sorted) + 1)
    recall = tp / n_pos
    # sum precision at every new true positive (average precision)
    hits = y_sorted.astype(bool)
    return float(precision[hits].sum() / n_pos)


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float
    soft_dice: float
    pr_auc: float
    predicted_ml: float  # probabilistic volume, sum of p
    thresholded_ml: float
    true_ml: float

    @property
    def volume_error_ml(self) -> float:
        return self.predicted_ml - self.true_ml

    @property
    def abs_volume_error_ml(self) -> float:
        return abs(self.volume_error_ml)


def _unpadded(case: TrainingCase):
    qx, qy, qz = PAD_OUT
    X, Y, Z = case.shape
    y = case.gt[qx : qx + X, qy : qy + Y, qz : qz + Z]
    m = case.mask[qx : qx + X, qy : qy + Y, qz : qz + Z]
    return y, m


def evaluate_case(
    model: Model, case: TrainingCase, spacing, threshold: float = 0.5
) -> CaseMetrics:
    prob = predict_case(model, case)
    y, m = _unpadded(case)
    pred = (prob >= threshold) & (m > 0.5)
    truth = (y > 0.5) & (m > 0.5)
    return CaseMetrics(
        case_id=case.case_id,
        dice=dice_score(pred, truth),
        soft_dice=soft_dice(prob, y, m),
        pr_auc=pr_auc(prob, y, m),
        predicted_ml=predicted_volume_ml(prob, spacing, m > 0.5),
        thresholded_ml=volume_ml(pred, spacing),
        true_ml=volume_ml(truth, spacing),
    )


def evaluate_cohort(model, cases, spacing, threshold: float = 0.5):
    return [evaluate_case(model, c, spacing, threshold) for c in cases]


def summarize(metrics) -> dict:
    dices = [m.dice for m in metrics]
    errs = [abs(m.volume_error_ml) for m in metrics]
    true_ml = [m.true_ml for m in metrics]
    aucs = [m.pr_auc for m in metrics if np.isfinite(m.pr_auc)]
    return {
        "n_cases": len(metrics),
        "mean_dice": float(np.mean(dices)),
        "mean_soft_dice": float(np.mean([m.soft_dice for m in metrics])),
        "mean_pr_auc": float(np.mean(aucs)) if aucs else float("nan"),
        "volume_mae_ml": float(np.mean(errs)),
        "mean_true_ml": float(np.mean(true_ml)),
    }


# ---- statistics ------------------------------------------------------------

def paired_bootstrap_p(a, b, n_resamples: int = 10_000, seed: int = 0) -> float:
    """Two-sided bootstrap p-value for a difference in paired means.

    Case-level resampling with replacement; add-one smoothing keeps the
    estimate away from an impossible zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length vectors of per-case scores")
    diff = a - b
    observed = diff.mean()
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diff), size=(n_resamples, len(diff)))
    means = diff[idx].mean(axis=1)
    # center the bootstrap distribution to sample the null
    null = means - observed
    extreme = int(np.sum(np.abs(null) >= abs(observed)))
    return float((extreme + 1) / (n_resamples + 1))


def significance_stars(p: float) -> str:
    if p < 0.005:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def pearson_r(x, y) -> float:
    """Pearson correlation; identical vectors are 1.0 by convention.

    Any other zero-variance input leaves the coefficient undefined and is
    rejected instead of silently returning NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length vectors")
    if np.array_equal(x, y):
        return 1.0
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a constant vector")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def bland_altman_pairs(metrics) -> list:
    """(mean, difference) pairs of predicted vs true volume, one per case."""
    return [
        (0.5 * (m.predicted_ml + m.true_ml), m.predicted_ml - m.true_ml)
        for m in metrics
    ]


# ---- counterfactual scenarios ----------------------------------------------

def predict_with_metadata(
    model: Model, case: TrainingCase, meta: TreatmentMetadata
) -> np.ndarray:
    """Re-run a case under substituted treatment covariates."""
    feats = _meta_features(meta, model.spec)
    return predict_case(model, dataclasses.replace(case, meta=feats))


def scenario_bounds(
    model: Model,
    case: TrainingCase,
    meta: TreatmentMetadata,
    threshold: float = 0.5,
    recan_best_min: float = 60.0,
):
    """Bracket the case outcome between ideal and failed reperfusion.

    The lower bound assumes fast, complete recanalization; the upper bound
    assumes none at all. Returns (core, lesion, actual) binary volumes.
    """
    best = dataclasses.replace(
        meta, ctp_to_recan_min=recan_best_min, mtici="3", occluded_at_24h=False
    )
    worst = dataclasses.replace(meta, mtici="0", occluded_at_24h=True)
    _, m = _unpadded(case)
    inside = m > 0.5
    core = (predict_with_metadata(model, case, best) >= threshold) & inside
    lesion = (predict_with_metadata(model, case, worst) >= threshold) & inside
    actual = (predict_with_metadata(model, case, meta) >= threshold) & inside
    return core, lesion, actual


def containment_fraction(core, lesion) -> float:
    """Fraction of predicted-core voxels inside the predicted lesion."""
    n_core = int(np.sum(core))
    if n_core == 0:
        return 1.0
    return float(np.sum(core & lesion) / n_core)


@dataclass(frozen=True)
class AifSensitivity:
    rows: list  # (case_id, volume_ml, volume_alt_ml)
    mean_abs_diff_ml: float
    correlation: float


def aif_sensitivity(model, cases, alt_aif_curves, spacing) -> AifSensitivity:
    """Stability of the predicted volume under a second arterial annotation.

    ``alt_aif_curves`` holds one replacement input curve per case, already
    on the frame grid and in normalized units (same convention as
    ``TrainingCase.aif``).
    """
    if len(cases) != len(alt_aif_curves):
        raise ValueError("need one alternative AIF per case")
    rows = []
    for case, curve in zip(cases, alt_aif_curves):
        _, m = _unpadded(case)
        inside = m > 0.5
        swapped = dataclasses.replace(
            case, aif=np.asarray(curve, dtype=np.float32)
        )
        a = predicted_volume_ml(predict_case(model, case), spacing, inside)
        b = predicted_volume_ml(predict_case(model, swapped), spacing, inside)
        rows.append((case.case_id, a, b))
    v_ref = np.array([r[1] for r in rows])
    v_alt = np.array([r[2] for r in rows])
    return AifSensitivity(
        rows=rows,
        mean_abs_diff_ml=float(np.mean(np.abs(v_ref - v_alt))),
        correlation=pearson_r(v_ref, v_alt),
    )


# ---- ablation report ---------------------------------------------------------

ABLATION_ORDER = [
    "proposed",
    "proposed_smoothed",
    "proposed_deconvolved",
    "one_voxel",
    "no_hires",
    "no_lores",
    "no_augmentation",
    "binary_mtici",
    "no_onset_time",
    "no_recan_time",
]


@dataclass(frozen=True)
class AblationRow:
    name: str
    mean_soft_dice: float
    mean_dice: float
    mean_pr_auc: float
    volume_mae_ml: float
    mae_increase_pct: float
    p_vs_baseline: float | None

    @property
    def stars(self) -> str:
        return "" if self.p_vs_baseline is None else significance_stars(self.p_vs_baseline)


def ablation_table(
    per_case_metrics: dict,
    baseline: str = "proposed",
    n_resamples: int = 10_000,
    seed: int = 0,
) -> list:
    """Compare every experiment row against the baseline configuration.

    ``per_case_metrics`` maps a row name to its per-case ``CaseMetrics``
    (held-out cases aligned across rows); p-values come from the paired
    bootstrap on the Dice scores.
    """
    if baseline not in per_case_metrics:
        raise ValueError(f"baseline row {baseline!r} missing")
    base_dice = np.array([m.dice for m in per_case_metrics[baseline]])
    base_mae = float(np.mean([m.abs_volume_error_ml for m in per_case_metrics[baseline]]))
    rows = []
    for name, ms in per_case_metrics.items():
        dice = np.array([m.dice for m in ms])
        if dice.shape != base_dice.shape:
            raise ValueError(f"row {name!r} is not aligned with the baseline")
        p = None
        if name != baseline:
            p = paired_bootstrap_p(dice, base_dice, n_resamples, seed)
        mae = float(np.mean([m.abs_volume_error_ml for m in ms]))
        increase = 0.0 if name == baseline else (
            100.0 * (mae - base_mae) / base_mae if base_mae > 0 else float("nan")
        )
        aucs = [m.pr_auc for m in ms if np.isfinite(m.pr_auc)]
        rows.append(
            AblationRow(
                name=name,
                mean_soft_dice=float(np.mean([m.soft_dice for m in ms])),
                mean_dice=float(dice.mean()),
                mean_pr_auc=float(np.mean(aucs)) if aucs else float("nan"),
                volume_mae_ml=mae,
                mae_increase_pct=increase,
                p_vs_baseline=p,
            )
        )
    order = {n: i for i, n in enumerate(ABLATION_ORDER)}
    rows.sort(key=lambda r: order.get(r.name, len(order)))
    return rows


def ablation_markdown(rows) -> str:
    lines = [
        "| configuration | mean soft Dice | mean Dice | volume MAE (ml) "
        "| MAE vs baseline | PR-AUC | p vs baseline |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        p = "-" if r.p_vs_baseline is None else f"{r.p_vs_baseline:.4f}{r.stars}"
        lines.append(
            f"| {r.name} | {r.mean_soft_dice:.3f} | {r.mean_dice:.3f} "
            f"| {r.volume_mae_ml:.2f} | {r.mae_increase_pct:+.0f}% "
            f"| {r.mean_pr_auc:.3f} | {p} |"
        )
    return "\n".join(lines) + "\n"


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(
        [
            "configuration",
            "mean_soft_dice",
            "mean_dice",
            "mean_pr_auc",
            "volume_mae_ml",
            "mae_increase_pct",
            "p_vs_baseline",
            "stars",
        ]
    )
    for r in rows:
        w.writerow(
            [
                r.name,
                f"{r.mean_soft_dice:.6f}",
                f"{r.mean_dice:.6f}",
                f"{r.mean_pr_auc:.6f}",
                f"{r.volume_mae_ml:.6f}",
                f"{r.mae_increase_pct:.2f}",
                "" if r.p_vs_baseline is None else f"{r.p_vs_baseline:.6f}",
                r.stars,
            ]
        )
    return buf.getvalue()


def write_ablation_report(rows, out_dir) -> None:
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.md").write_text(ablation_markdown(rows))
    (out_dir / "ablation.csv").write_text(ablation_csv(rows))
    (out_dir / "ablation.json").write_text(
        json.dumps([dataclasses.asdict(r) for r in rows], indent=1)
    )
