"""Acquisition cleanup: tilt removal, motion correction, grid harmonization.

``preprocess_case`` chains the steps in a fixed order (gantry tilt, rigid
motion, spatial resampling, temporal resampling, HU clipping) and writes the
result next to a ``preproc.json`` sidecar holding everything downstream
consumers need: estimated transforms, normalization statistics, the bolus
arrival frame and the intracranial mask. Running it on its own output is a
no-op, so pipelines may re-enter at any point.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nifti import read_nifti, write_nifti
from .perfusion import detect_bolus_arrival
from .phantom import StoredCase, read_case
from .volume import (
    AIR_HU,
    Ctp4d,
    Grid3,
    LabelVol,
    Vol3,
    apply_rigid,
    downsample_mean,
    remove_gantry_tilt,
    resample_trilinear,
)


@dataclass(frozen=True)
class PreprocConfig:
    spacing: tuple = (1.5, 1.5, 4.0)
    dt_s: float = 2.0
    n_frames: int = 30
    clip_hu: tuple = (-100.0, 1000.0)
    mask_hu: tuple = (0.0, 100.0)
    motion_correct: bool = True
    motion_max_iter: int = 40

    def __post_init__(self):
        if self.dt_s <= 0 or self.n_frames < 2:
            raise ValueError("need a positive frame step and >= 2 frames")
        if not self.clip_hu[0] < self.clip_hu[1]:
            raise ValueError("clip_hu must be an increasing pair")

    def to_dict(self) -> dict:
        return {
            "spacing": list(self.spacing),
            "dt_s": self.dt_s,
            "n_frames": self.n_frames,
            "clip_hu": list(self.clip_hu),
            "mask_hu": list(self.mask_hu),
            "motion_correct": self.motion_correct,
            "motion_max_iter": self.motion_max_iter,
        }

    @staticmethod
    def from_dict(d: dict) -> "PreprocConfig":
        d = dict(d)
        for key in ("spacing", "clip_hu", "mask_hu"):
            if key in d:
                d[key] = tuple(d[key])
        return PreprocConfig(**d)


@dataclass(frozen=True)
class NormStats:
    """Per-case intensity statistics over the intracranial mask."""

    mean_hu: float
    std_hu: float

    def __post_init__(self):
        if not self.std_hu > 0:
            raise ValueError("std_hu must be > 0")


def intracranial_mask(c: Ctp4d, mask_hu=(0.0, 100.0)) -> np.ndarray:
    """Brain-tissue mask: band-threshold the temporal mean, keep the largest
    connected component, close small gaps and fill holes."""
    mean = c.data.mean(axis=-1)
    band = (mean >= mask_hu[0]) & (mean <= mask_hu[1])
    labels, n = ndimage.label(band)
    if n == 0:
        raise ValueError("no voxels in the intracranial HU band")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    mask = labels == (1 + int(np.argmax(sizes)))
    mask = ndimage.binary_closing(mask, iterations=1)
    mask = ndimage.binary_fill_holes(mask)
    if not mask.any():
        raise ValueError("intracranial mask came out empty")
    return mask


def _ssd(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(np.mean(d * d))


def _register_rigid(moving: Vol3, ref: Vol3, max_iter: int, fill: float):
    """Gradient descent on SSD over (tx, ty, rot) with a backtracking line
    search; the cost never increases. Returns (params, converged)."""
    params = np.zeros(3)
    if max_iter <= 0:
        return params, False
    h = np.array([0.05, 0.05, 0.05])  # finite-difference steps (mm, mm, deg)
    step = 0.5
    cost = _ssd(moving.data, ref.data)
    converged = False
    for _ in range(max_iter):
        grad = np.zeros(3)
        for p in range(3):
            plus = params.copy()
            plus[p] += h[p]
            minus = params.copy()
            minus[p] -= h[p]
            c_plus = _ssd(apply_rigid(moving, *plus, fill=fill).data, ref.data)
            c_minus = _ssd(apply_rigid(moving, *minus, fill=fill).data, ref.data)
            grad[p] = (c_plus - c_minus) / (2.0 * h[p])
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-12:
            converged = True
            break
        direction = -grad / gnorm
        improved = False
        trial_step = step
        min_gain = max(1e-15, 1e-6 * cost)  # ignore noise-floor descent
        for _ in range(8):
            trial = params + trial_step * direction
            c_trial = _ssd(apply_rigid(moving, *trial, fill=fill).data, ref.data)
            if c_trial < cost - min_gain:
                params, cost, step = trial, c_trial, trial_step * 1.5
                improved = True
                break
            trial_step *= 0.5
        if not improved:
            converged = True
            break
    return params, converged


def motion_correct(
    c: Ctp4d, max_iter: int = 40, fill: float = AIR_HU
) -> tuple[Ctp4d, list[dict]]:
    """Align every frame to frame 0 with an in-plane rigid transform.

    Registration runs coarse-to-fine on 4x and 2x in-plane block-mean
    pyramids before the full resolution pass. Frames that fail to converge
    are left untouched and flagged in the returned transform records.
    """
    ref_full = c.frame(0)
    pyramids = []
    for fac in ((4, 4, 1), (2, 2, 1), (1, 1, 1)):
        try:
            pyramids.append((fac, downsample_mean(ref_full, fac)))
        except ValueError:
            continue
    out = np.array(c.data)
    records = [{"frame": 0, "tx_mm": 0.0, "ty_mm": 0.0, "rot_deg": 0.0,
                "converged": True, "applied": False}]
    for t in range(1, c.n_frames):
        frame = c.frame(t)
        params = np.zeros(3)
        converged = True
        for fac, ref_lv in pyramids:
            moving_lv = downsample_mean(frame, fac)
            # warm start: apply the current estimate, then refine the residual
            warm = apply_rigid(moving_lv, *params, fill=fill)
            delta, ok = _register_rigid(warm, ref_lv, max_iter, fill)
            params = params + delta
            converged = converged and ok
        if np.abs(params).max() < 0.02:  # below interpolation noise: identity
            params = np.zeros(3)
        applied = bool(np.any(params != 0.0))
        if applied:
            before = _ssd(frame.data, ref_full.data)
            fixed = apply_rigid(frame, *params, fill=fill)
            after = _ssd(fixed.data, ref_full.data)
            if after <= before:
                out[..., t] = fixed.data
            else:  # never let the "correction" make alignment worse
                params = np.zeros(3)
                applied = False
                converged = False
        records.append({
            "frame": t,
            "tx_mm": float(params[0]),
            "ty_mm": float(params[1]),
            "rot_deg": float(params[2]),
            "converged": bool(converged),
            "applied": applied,
        })
    return Ctp4d(c.grid, c.times_s, out, c.slice_dt_s), records


def resample_time(c: Ctp4d, dt_s: float, n_frames: int) -> Ctp4d:
    """Resample onto the uniform grid ``times[0] + i*dt`` (T = n_frames).

    Per-slice acquisition offsets are folded in, so shuttle data lands on a
    single consistent clock. Interpolation is linear with linear edge
    extrapolation. Already-conforming input is returned unchanged.
    """
    targets = c.times_s[0] + dt_s * np.arange(n_frames)
    if (
        c.slice_dt_s is None
        and c.n_frames == n_frames
        and np.allclose(c.times_s, targets, rtol=0.0, atol=1e-9)
    ):
        return c
    out = np.empty(c.grid.shape + (n_frames,), dtype=np.float64)
    for k in range(c.grid.shape[2]):
        off = 0.0 if c.slice_dt_s is None else float(c.slice_dt_s[k])
        src_t = c.times_s + off
        series = c.data[:, :, k, :]
        idx = np.clip(np.searchsorted(src_t, targets) - 1, 0, src_t.size - 2)
        t0 = src_t[idx]
        w = (targets - t0) / (src_t[idx + 1] - t0)  # <0 or >1 extrapolates
        out[:, :, k, :] = series[..., idx] * (1.0 - w) + series[..., idx + 1] * w
    return Ctp4d(c.grid, targets, out, None)


def normalize_intensity(
    c: Ctp4d, mask: np.ndarray, clip_hu=(-100.0, 1000.0)
) -> tuple[Ctp4d, NormStats]:
    """Clip to the HU window, then standardize by masked mean/std (all
    frames pooled). Stats describe the clipped data."""
    clipped = np.clip(c.data, clip_hu[0], clip_hu[1])
    vals = clipped[mask]
    stats = NormStats(mean_hu=float(vals.mean()), std_hu=float(vals.std()))
    normalized = (clipped - stats.mean_hu) / stats.std_hu
    return Ctp4d(c.grid, c.times_s, normalized, c.slice_dt_s), stats


def _target_grid(grid: Grid3, spacing) -> Grid3:
    shape = tuple(
        max(1, int(round(grid.shape[a] * grid.spacing[a] / spacing[a])))
        for a in range(3)
    )
    return Grid3(shape, tuple(spacing), 0.0)


def _resample_label(label: LabelVol, target: Grid3) -> LabelVol:
    if target == label.grid:
        return label
    coords = np.meshgrid(
        *[
            np.arange(target.shape[a]) * target.spacing[a] / label.grid.spacing[a]
            for a in range(3)
        ],
        indexing="ij",
    )
    out = ndimage.map_coordinates(
        label.data, np.array(coords), order=0, mode="constant", cval=0.0
    )
    return LabelVol(target, out)


@dataclass(frozen=True, eq=False)
class PreprocessedCase:
    case_id: str
    ctp: Ctp4d
    mask: np.ndarray
    infarct_gt: LabelVol
    stats: NormStats
    arrival_frame: int
    case_dir: Path
    sidecar: dict = field(repr=False, default_factory=dict)


def preprocess_case(case_dir, cfg: PreprocConfig, out_dir) -> PreprocessedCase:
    """Run the full cleanup chain on one stored case directory."""
    src = read_case(case_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ctp = src.ctp
    tilt_removed = ctp.grid.tilt_deg
    ctp = remove_gantry_tilt(ctp)

    motion_records = None
    if cfg.motion_correct:
        ctp, motion_records = motion_correct(ctp, cfg.motion_max_iter)

    # shuttle offsets are tied to acquisition slices, so they must be folded
    # in before any z-resampling redefines what a slice is
    if ctp.slice_dt_s is not None:
        ctp = resample_time(ctp, cfg.dt_s, cfg.n_frames)
    target = _target_grid(ctp.grid, cfg.spacing)
    if target != ctp.grid:
        ctp = ctp.map_frames(lambda f: resample_trilinear(f, target))
    ctp = resample_time(ctp, cfg.dt_s, cfg.n_frames)
    data = np.clip(ctp.data, cfg.clip_hu[0], cfg.clip_hu[1])
    ctp = Ctp4d(ctp.grid, ctp.times_s, data)

    mask = intracranial_mask(ctp, cfg.mask_hu)
    vals = ctp.data[mask]
    stats = NormStats(mean_hu=float(vals.mean()), std_hu=float(vals.std()))
    arrival = detect_bolus_arrival(ctp, mask)
    gt = _resample_label(src.infarct_gt, target)

    write_nifti(ctp, out_dir / "ctp.nii")
    write_nifti(Vol3(gt.grid, gt.data), out_dir / "gt.nii")
    write_nifti(Vol3(target, mask.astype(np.float64)), out_dir / "mask.nii")
    if Path(case_dir).resolve() != out_dir.resolve():
        shutil.copyfile(Path(case_dir) / "aif.json", out_dir / "aif.json")
    meta = src.metadata.to_dict()
    meta["case_id"] = src.case_id
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1))
    sidecar = {
        "config": cfg.to_dict(),
        "tilt_removed_deg": tilt_removed,
        "motion": motion_records,
        "stats": {"mean_hu": stats.mean_hu, "std_hu": stats.std_hu},
        "arrival_frame": arrival,
        "n_frames": ctp.n_frames,
        "dt_s": cfg.dt_s,
        "mask_file": "mask.nii",
        "source_dir": str(case_dir),
    }
    (out_dir / "preproc.json").write_text(json.dumps(sidecar, indent=1))
    return PreprocessedCase(
        src.case_id, ctp, mask, gt, stats, arrival, out_dir, sidecar
    )


def load_preprocessed(case_dir) -> PreprocessedCase:
    case_dir = Path(case_dir)
    sidecar = json.loads((case_dir / "preproc.json").read_text())
    ctp = read_nifti(case_dir / "ctp.nii")
    mask = read_nifti(case_dir / "mask.nii").data > 0.5
    gt_vol = read_nifti(case_dir / "gt.nii")
    gt = LabelVol(gt_vol.grid, np.clip(np.round(gt_vol.data), 0.0, 1.0))
    meta = json.loads((case_dir / "meta.json").read_text())
    stats = NormStats(**sidecar["stats"])
    return PreprocessedCase(
        meta.get("case_id", case_dir.name),
        ctp,
        mask,
        gt,
        stats,
        int(sidecar["arrival_frame"]),
        case_dir,
        sidecar,
    )
