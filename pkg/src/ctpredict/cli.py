"""Command-line entry points for the whole pipeline.

Every subcommand validates its JSON config against a schema before doing
any work, and drops a provenance record next to its outputs so a result
directory is self-describing.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .evaluate import (
    ABLATION_ORDER,
    ablation_markdown,
    ablation_table,
    bland_altman_pairs,
    containment_fraction,
    evaluate_cohort,
    scenario_bounds,
    summarize,
    volume_ml,
    write_ablation_report,
)
from .network import VARIANTS, build_model, load_weights, save_weights
from .phantom import PhantomConfig, TreatmentMetadata, generate_cohort
from .preprocess import PreprocConfig, load_preprocessed, preprocess_case
from .perfusion import Aif, DeconvConfig, deconvolve, extract_concentration
from .training import TrainConfig, make_training_case, train
from .nifti import write_nifti

_NUM = {"type": "number"}
_NUM_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_GRADE_MAP = {
    "type": "object",
    "additionalProperties": _NUM,
}

PHANTOM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "shape": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
        "spacing": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
        "n_frames": {"type": "integer", "minimum": 2},
        "frame_dt_s": _NUM,
        "fine_dt_s": _NUM,
        "duration_s": _NUM,
        "air_hu": _NUM, "bone_hu": _NUM, "white_hu": _NUM, "gray_hu": _NUM,
        "blood_hu": _NUM,
        "brain_axes_frac": {"type": "array", "items": _NUM},
        "skull_frac": _NUM, "cortex_frac": _NUM,
        "aif_peak_hu": _NUM_PAIR, "aif_t0_s": _NUM_PAIR, "aif_tp_s": _NUM_PAIR,
        "aif_alpha": _NUM,
        "k_flow_per_s": _NUM, "healthy_mtt_s": _NUM, "mtt_cbf_floor": _NUM,
        "delay_base_s": _NUM, "delay_gain_s": _NUM,
        "healthy_cbv_ml_per_100g": _NUM,
        "lesion_axes_xy_mm": _NUM_PAIR, "lesion_axes_z_mm": _NUM_PAIR,
        "lesion_cbf_floor": _NUM_PAIR, "lesion_center_frac": _NUM,
        "onset_min_range": _NUM_PAIR, "recan_min_range": _NUM_PAIR,
        "mtici_probs": _GRADE_MAP, "occlusion_prob": _GRADE_MAP,
        "noise_sigma_hu": _NUM, "tilt_deg": _NUM,
        "shuttle_offset_s": _NUM,
        "motion_amp_mm": _NUM, "motion_amp_deg": _NUM,
        "fate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r_core": _NUM, "r_pen": _NUM, "tau_death_min": _NUM,
                "reperfusion_fraction": _GRADE_MAP,
            },
        },
    },
}

PREPROC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "spacing": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
        "dt_s": _NUM,
        "n_frames": {"type": "integer", "minimum": 2},
        "clip_hu": _NUM_PAIR,
        "mask_hu": _NUM_PAIR,
        "motion_correct": {"type": "boolean"},
        "motion_max_iter": {"type": "integer", "minimum": 0},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "variant": {"enum": sorted(VARIANTS)},
        "n_steps": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "w_pos": {"type": "number", "minimum": 1},
        "val_every": {"type": "integer", "minimum": 1},
        "plateau_patience": {"type": "integer", "minimum": 1},
        "min_lr": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "augment": {"type": "boolean"},
    },
}


def _load_config(path, schema) -> dict:
    doc = json.loads(Path(path).read_text())
    jsonschema.validate(doc, schema)
    return doc


def _git_hash() -> str | None:
    import subprocess

    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except OSError:
        return None
    return out.stdout.strip() if out.returncode == 0 else None


def _write_provenance(out_dir, command, config) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "tool": "ctpredict",
        "version": __version__,
        "git_hash": _git_hash(),
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "provenance.json").write_text(json.dumps(doc, indent=1))


def _case_dirs(data_dir, marker: str) -> list:
    dirs = sorted(d for d in Path(data_dir).iterdir() if (d / marker).exists())
    if not dirs:
        raise FileNotFoundError(f"no case directories with {marker} under {data_dir}")
    return dirs


def _load_split(data_dir, val_fraction: float, seed: int):
    """Deterministic train/validation split over preprocessed case dirs."""
    dirs = _case_dirs(data_dir, "preproc.json")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dirs))
    n_val = max(1, int(round(val_fraction * len(dirs)))) if val_fraction > 0 else 0
    val_idx = set(int(i) for i in order[:n_val])
    train_dirs = [d for i, d in enumerate(dirs) if i not in val_idx]
    val_dirs = [d for i, d in enumerate(dirs) if i in val_idx]
    return train_dirs, val_dirs


def _fold_split(data_dir, n_folds: int, fold: int, seed: int):
    """Assign cases round-robin to ``n_folds`` after a seeded shuffle."""
    if not 0 <= fold < n_folds:
        raise ValueError(f"fold must lie in [0, {n_folds})")
    dirs = _case_dirs(data_dir, "preproc.json")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dirs))
    assignment = {dirs[int(j)].name: int(i % n_folds) for i, j in enumerate(order)}
    train_dirs = [d for d in dirs if assignment[d.name] != fold]
    val_dirs = [d for d in dirs if assignment[d.name] == fold]
    return train_dirs, val_dirs, assignment


# ---- subcommands -----------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg_doc = _load_config(args.config, PHANTOM_SCHEMA) if args.config else {}
    cfg = PhantomConfig.from_dict(cfg_doc)
    generate_cohort(cfg, args.n, args.seed, args.out)
    _write_provenance(args.out, "phantom", {"n": args.n, "seed": args.seed, **cfg_doc})
    print(f"wrote {args.n} cases to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg_doc = _load_config(args.config, PREPROC_SCHEMA) if args.config else {}
    kwargs = dict(cfg_doc)
    for key in ("spacing", "clip_hu", "mask_hu"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    cfg = PreprocConfig(**kwargs)
    dirs = _case_dirs(args.input, "meta.json")
    jobs = [(d, cfg, Path(args.out) / d.name) for d in dirs]
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(lambda j: preprocess_case(*j), jobs))
    else:
        for j in jobs:
            preprocess_case(*j)
    _write_provenance(args.out, "preprocess", cfg_doc)
    print(f"preprocessed {len(dirs)} cases into {args.out}")
    return 0


def cmd_maps(args) -> int:
    pre = load_preprocessed(args.case)
    doc = json.loads((Path(args.case) / "aif.json").read_text())
    aif = Aif(np.asarray(doc["times_s"]), np.asarray(doc["values_hu"]))
    cfg = DeconvConfig(lambda_rel=args.lambda_rel)
    conc = extract_concentration(pre.ctp, pre.mask)
    maps = deconvolve(conc, aif, cfg, pre.mask).maps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, vol in (("cbf", maps.cbf), ("cbv", maps.cbv), ("tmax", maps.tmax)):
        write_nifti(vol, out / f"{name}.nii")
    inside = pre.mask
    summary = {
        "case_id": pre.case_id,
        "lambda_rel": args.lambda_rel,
        "median_cbf": float(np.median(maps.cbf.data[inside])),
        "median_tmax_s": float(np.median(maps.tmax.data[inside])),
        "hypoperfused_ml": volume_ml(
            (maps.tmax.data > 6.0) & inside, pre.ctp.grid.spacing
        ),
    }
    (out / "maps.json").write_text(json.dumps(summary, indent=1))
    _write_provenance(out, "maps", {"lambda_rel": args.lambda_rel})
    print(json.dumps(summary, indent=1))
    return 0


def cmd_train(args) -> int:
    cfg_doc = _load_config(args.config, TRAIN_SCHEMA) if args.config else {}
    if args.variant:
        cfg_doc["variant"] = args.variant
    if args.steps:
        cfg_doc["n_steps"] = args.steps
    if args.seed is not None:
        cfg_doc["seed"] = args.seed
    aug_on = cfg_doc.pop("augment", True)
    cfg = TrainConfig(**cfg_doc) if aug_on else TrainConfig(**cfg_doc, augment=None)

    assignment = None
    if args.folds:
        train_dirs, val_dirs, assignment = _fold_split(
            args.data, args.folds, args.fold, cfg.seed
        )
    else:
        train_dirs, val_dirs = _load_split(args.data, args.val_fraction, cfg.seed)
    spec = VARIANTS[cfg.variant]
    cases_train = [make_training_case(load_preprocessed(d), spec) for d in train_dirs]
    cases_val = [make_training_case(load_preprocessed(d), spec) for d in val_dirs]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    result = train(
        cases_train,
        cases_val,
        cfg,
        log_path=out / "train_log.jsonl",
        checkpoint_path=out / "weights.ctpw",
    )
    save_weights(result.model, out / "weights.ctpw")
    if assignment is not None:
        (out / "folds.json").write_text(
            json.dumps({"n_folds": args.folds, "fold": args.fold, "assignment": assignment}, indent=1)
        )
    summary = {
        "variant": cfg.variant,
        "n_train": len(cases_train),
        "n_val": len(cases_val),
        "best_val_soft_dice": result.best_val,
        "best_step": result.best_step,
        "wall_s": round(time.monotonic() - t0, 1),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1))
    _write_provenance(out, "train", {**cfg_doc, "val_fraction": args.val_fraction})
    print(json.dumps(summary, indent=1))
    return 0


_METRIC_COLS = (
    "case_id",
    "dice",
    "soft_dice",
    "pr_auc",
    "predicted_ml",
    "thresholded_ml",
    "true_ml",
    "volume_error_ml",
    "abs_volume_error_ml",
)


def _metric_row(m) -> dict:
    row = dataclasses.asdict(m)
    row["volume_error_ml"] = m.volume_error_ml
    row["abs_volume_error_ml"] = m.abs_volume_error_ml
    return row


def cmd_eval(args) -> int:
    import csv

    model = load_weights(args.weights)
    dirs = _case_dirs(args.data, "preproc.json")
    pres = [load_preprocessed(d) for d in dirs]
    cases = [make_training_case(p, model.spec) for p in pres]
    spacing = pres[0].ctp.grid.spacing
    metrics = evaluate_cohort(model, cases, spacing, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = [_metric_row(m) for m in metrics]
    (out / "per_case.json").write_text(json.dumps(rows, indent=1))
    summary = summarize(metrics)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))

    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_METRIC_COLS)
        w.writeheader()
        w.writerows(rows)
    md = ["| case | Dice | soft Dice | PR-AUC | predicted (ml) | true (ml) |",
          "|---|---|---|---|---|---|"]
    for r in rows:
        md.append(
            f"| {r['case_id']} | {r['dice']:.3f} | {r['soft_dice']:.3f} "
            f"| {r['pr_auc']:.3f} | {r['predicted_ml']:.1f} | {r['true_ml']:.1f} |"
        )
    md.append("")
    md.append(f"mean Dice {summary['mean_dice']:.3f}, "
              f"volume MAE {summary['volume_mae_ml']:.2f} ml over {summary['n_cases']} cases")
    (out / "report.md").write_text("\n".join(md) + "\n")
    with (out / "bland_altman.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mean_ml", "difference_ml"])
        w.writerows(bland_altman_pairs(metrics))

    if args.scenarios:
        with (out / "scenarios.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "core_ml", "lesion_ml", "penumbra_ml", "actual_ml"])
            for pre, case in zip(pres, cases):
                meta = TreatmentMetadata.from_dict(
                    json.loads((pre.case_dir / "meta.json").read_text())
                )
                core, lesion, actual = scenario_bounds(
                    model, case, meta, threshold=args.threshold
                )
                core_ml = volume_ml(core, spacing)
                lesion_ml = volume_ml(lesion, spacing)
                w.writerow([
                    case.case_id,
                    f"{core_ml:.3f}",
                    f"{lesion_ml:.3f}",
                    f"{max(lesion_ml - core_ml, 0.0):.3f}",
                    f"{volume_ml(actual, spacing):.3f}",
                ])

    _write_provenance(out, "eval", {"threshold": args.threshold})
    print(json.dumps(summary, indent=1))
    return 0


def cmd_ablate(args) -> int:
    """Train and score every ablation row, then emit the comparison table."""
    cfg_doc = _load_config(args.config, TRAIN_SCHEMA) if args.config else {}
    cfg_doc.pop("variant", None)
    if args.steps:
        cfg_doc["n_steps"] = args.steps
    if args.seed is not None:
        cfg_doc["seed"] = args.seed
    seed = cfg_doc.get("seed", 0)
    train_dirs, val_dirs = _load_split(args.data, args.val_fraction, seed)
    if not val_dirs:
        raise ValueError("ablation needs a nonempty held-out split")
    pres_train = [load_preprocessed(d) for d in train_dirs]
    pres_val = [load_preprocessed(d) for d in val_dirs]
    spacing = pres_val[0].ctp.grid.spacing

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_metrics = {}
    for row in ABLATION_ORDER:
        doc = dict(cfg_doc)
        aug_on = doc.pop("augment", True) and row != "no_augmentation"
        doc["variant"] = "proposed" if row == "no_augmentation" else row
        cfg = TrainConfig(**doc) if aug_on else TrainConfig(**doc, augment=None)
        spec = VARIANTS[cfg.variant]
        cases_train = [make_training_case(p, spec) for p in pres_train]
        cases_val = [make_training_case(p, spec) for p in pres_val]
        result = train(cases_train, cases_val, cfg,
                       log_path=out / f"{row}.train_log.jsonl")
        save_weights(result.model, out / f"{row}.ctpw")
        per_metrics[row] = evaluate_cohort(result.model, cases_val, spacing,
                                           threshold=args.threshold)
        mean_dice = float(np.mean([m.dice for m in per_metrics[row]]))
        print(f"{row}: mean dice {mean_dice:.3f}")
    rows = ablation_table(per_metrics, n_resamples=args.resamples, seed=seed)
    write_ablation_report(rows, out)
    _write_provenance(out, "ablate", {**cfg_doc, "val_fraction": args.val_fraction})
    print(ablation_markdown(rows))
    return 0


def cmd_scenario(args) -> int:
    model = load_weights(args.weights)
    pre = load_preprocessed(args.case)
    tcase = make_training_case(pre, model.spec)
    meta = TreatmentMetadata.from_dict(
        json.loads((Path(args.case) / "meta.json").read_text())
    )
    core, lesion, actual = scenario_bounds(model, tcase, meta, threshold=args.threshold)
    spacing = pre.ctp.grid.spacing
    doc = {
        "case_id": pre.case_id,
        "core_ml": volume_ml(core, spacing),
        "lesion_ml": volume_ml(lesion, spacing),
        "actual_ml": volume_ml(actual, spacing),
        "core_in_lesion_fraction": containment_fraction(core, lesion),
        "metadata": meta.to_dict(),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(json.dumps(doc, indent=1))
    _write_provenance(out, "scenario", {"threshold": args.threshold})
    print(json.dumps(doc, indent=1))
    return 0


def cmd_serve(args) -> int:
    from .service import create_app

    if args.frontend is not None and not Path(args.frontend).is_dir():
        print(f"warning: frontend dir {args.frontend!r} not found, serving API only", file=sys.stderr)
    app = create_app(args.data, args.weights, args.frontend)
    if args.check:
        print(f"service ready: {len(app.state.service.cases)} cases")
        return 0
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ctpredict",
        description="final-infarct prediction from native CT perfusion",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom", help="generate a synthetic cohort")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON file with cohort settings")
    g.set_defaults(func=cmd_phantom)

    g = sub.add_parser("preprocess", help="clean raw cases for training")
    g.add_argument("--input", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file with preprocessing settings")
    g.add_argument("--jobs", type=int, default=1, help="case-level parallelism")
    g.set_defaults(func=cmd_preprocess)

    g = sub.add_parser("maps", help="classical deconvolution maps for one case")
    g.add_argument("--case", required=True, help="preprocessed case directory")
    g.add_argument("--out", required=True)
    g.add_argument("--lambda-rel", type=float, default=0.4, dest="lambda_rel")
    g.set_defaults(func=cmd_maps)

    g = sub.add_parser("train", help="fit a model variant")
    g.add_argument("--data", required=True, help="preprocessed cohort directory")
    g.add_argument("--out", required=True)
    g.add_argument("--variant", choices=sorted(VARIANTS))
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--folds", type=int, help="cross-validation fold count")
    g.add_argument("--fold", type=int, default=0, help="held-out fold index")
    g.add_argument("--config", help="JSON file with training settings")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="score a trained model on a cohort")
    g.add_argument("--data", required=True)
    g.add_argument("--weights", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--scenarios", action="store_true",
                   help="also write counterfactual volumes per case")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("ablate", help="train all variants and tabulate the comparison")
    g.add_argument("--data", required=True, help="preprocessed cohort directory")
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--resamples", type=int, default=10_000)
    g.add_argument("--config", help="JSON file with shared training settings")
    g.set_defaults(func=cmd_ablate)

    g = sub.add_parser("scenario", help="counterfactual treatment bounds for a case")
    g.add_argument("--case", required=True)
    g.add_argument("--weights", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--threshold", type=float, default=0.5)
    g.set_defaults(func=cmd_scenario)

    g = sub.add_parser("serve", help="run the exploration API")
    g.add_argument("--data", required=True)
    g.add_argument("--weights")
    g.add_argument("--frontend", help="directory with built UI assets")
    g.add_argument("--host", default="127.0.0.1")
    g.add_argument("--port", type=int, default=8000)
    g.add_argument("--check", action="store_true", help="build the app and exit")
    g.set_defaults(func=cmd_serve)

    return p


def main(argv=None) -> int:
    """Exit codes: 0 ok, 2 usage (argparse), 3 data problem, 4 numerical failure."""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, FileNotFoundError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (RuntimeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
