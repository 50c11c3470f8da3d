"""Synthetic CT-perfusion cases with known hemodynamics and tissue fate.

A case is built in three layers:

1. anatomy: an ellipsoidal brain (white matter with a cortical rim) inside a
   bone shell, air outside;
2. hemodynamics: a smooth ischemic lesion expressed as a CBF-ratio field,
   with delay/MTT/CBV tied to it, driving the indicator-dilution forward
   model ``atten(t) = baseline + k * cbf * (aif (*) residue)(t)`` evaluated
   on a fine internal time grid;
3. outcome: a deterministic fate rule mapping hypoperfusion depth and
   effective reperfusion time to the final infarct mask.

Everything is a pure function of (config, seed), so cohorts regenerate
bit-identically from their manifest.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .nifti import read_nifti, write_nifti
from .perfusion import Aif
from .volume import Ctp4d, Grid3, LabelVol, Vol3, apply_rigid, remove_gantry_tilt

MTICI_GRADES = ("0", "1", "2a", "2b", "3")
MTICI_SCALE = {"0": 0.0, "1": 0.25, "2a": 0.5, "2b": 0.75, "3": 1.0}


@dataclass(frozen=True, eq=False)
class TissueField:
    """Per-voxel hemodynamic ground truth on one grid.

    cbf_ratio is relative to healthy tissue (1 = normal); cbv in ml/100g;
    delay and mtt parameterize the exponential transport residue.
    """

    grid: Grid3
    cbf_ratio: np.ndarray
    cbv_ml_per_100g: np.ndarray
    delay_s: np.ndarray
    mtt_s: np.ndarray
    brain_mask: np.ndarray

    def __post_init__(self):
        shape = self.grid.shape
        for name in ("cbf_ratio", "cbv_ml_per_100g", "delay_s", "mtt_s"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != grid {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        mask = np.asarray(self.brain_mask, dtype=bool)
        if mask.shape != shape:
            raise ValueError("brain_mask shape mismatch")
        mask.setflags(write=False)
        object.__setattr__(self, "brain_mask", mask)
        if self.cbf_ratio.min() < 0 or self.cbf_ratio.max() > 1:
            raise ValueError("cbf_ratio must lie in [0, 1]")
        if self.delay_s.min() < 0:
            raise ValueError("delay_s must be >= 0")
        if (self.mtt_s <= 0).any():
            raise ValueError("mtt_s must be > 0")


@dataclass(frozen=True)
class TreatmentMetadata:
    """Clinical covariates attached to one case."""

    onset_to_ctp_min: float
    ctp_to_recan_min: float
    mtici: str
    occluded_at_24h: bool

    def __post_init__(self):
        if self.mtici not in MTICI_GRADES:
            raise ValueError(f"mtici must be one of {MTICI_GRADES}")
        if self.onset_to_ctp_min < 0 or self.ctp_to_recan_min < 0:
            raise ValueError("intervals must be >= 0")

    def as_features(self, binary_mtici: bool = False) -> np.ndarray:
        """4-vector [onset_h, recan_h, reperfusion score, occluded flag]."""
        if binary_mtici:
            score = 1.0 if self.mtici in ("2b", "3") else 0.0
        else:
            score = MTICI_SCALE[self.mtici]
        return np.array(
            [
                self.onset_to_ctp_min / 60.0,
                self.ctp_to_recan_min / 60.0,
                score,
                1.0 if self.occluded_at_24h else 0.0,
            ],
            dtype=np.float64,
        )

    def to_dict(self) -> dict:
        return {
            "onset_to_ctp_min": self.onset_to_ctp_min,
            "ctp_to_recan_min": self.ctp_to_recan_min,
            "mtici": self.mtici,
            "occluded_at_24h": self.occluded_at_24h,
        }

    @staticmethod
    def from_dict(d: dict) -> "TreatmentMetadata":
        return TreatmentMetadata(
            onset_to_ctp_min=float(d["onset_to_ctp_min"]),
            ctp_to_recan_min=float(d["ctp_to_recan_min"]),
            mtici=str(d["mtici"]),
            occluded_at_24h=bool(d["occluded_at_24h"]),
        )


@dataclass(frozen=True)
class FateConfig:
    """Tissue-death rule: hypoperfusion depth vs. effective ischemia time.

    A voxel infarcts if cbf_ratio < r_core, or if it sits in the penumbra
    band [r_core, r_pen) for longer than a survival time that ramps linearly
    from 0 (at r_core) to tau_death_min (at r_pen). Effective time is
    onset+recanalization divided by the reperfusion fraction of the achieved
    mTICI grade; failed reperfusion means unlimited exposure.
    """

    r_core: float = 0.30
    r_pen: float = 0.55
    tau_death_min: float = 600.0
    reperfusion_fraction: dict = field(
        default_factory=lambda: {"0": 0.0, "1": 0.1, "2a": 0.4, "2b": 0.75, "3": 1.0}
    )

    def __post_init__(self):
        if not (0.0 < self.r_core < self.r_pen < 1.0):
            raise ValueError("need 0 < r_core < r_pen < 1")
        if self.tau_death_min <= 0:
            raise ValueError("tau_death_min must be > 0")
        rho = [self.reperfusion_fraction[g] for g in MTICI_GRADES]
        if rho[0] != 0.0:
            raise ValueError("grade '0' must have reperfusion fraction 0")
        if any(b < a for a, b in zip(rho, rho[1:])):
            raise ValueError("reperfusion fraction must be nondecreasing in grade")
        if any(not 0.0 <= r <= 1.0 for r in rho):
            raise ValueError("reperfusion fractions must lie in [0, 1]")


@dataclass(frozen=True)
class PhantomConfig:
    # geometry / sampling
    shape: tuple = (64, 64, 8)
    spacing: tuple = (1.5, 1.5, 4.0)
    n_frames: int = 30
    frame_dt_s: float = 2.0
    fine_dt_s: float = 0.5
    duration_s: float = 120.0
    # anatomy (HU)
    air_hu: float = -1000.0
    bone_hu: float = 700.0
    white_hu: float = 32.0
    gray_hu: float = 40.0
    blood_hu: float = 45.0
    brain_axes_frac: tuple = (0.82, 0.86, 0.80)
    skull_frac: float = 1.12
    cortex_frac: float = 0.78
    # arterial input (per-case jitter ranges)
    aif_peak_hu: tuple = (220.0, 280.0)
    aif_t0_s: tuple = (6.0, 10.0)
    aif_tp_s: tuple = (5.0, 7.0)
    aif_alpha: float = 2.5
    # hemodynamics
    k_flow_per_s: float = 0.012
    healthy_mtt_s: float = 4.0
    mtt_cbf_floor: float = 0.25
    delay_base_s: float = 0.5
    delay_gain_s: float = 12.0
    healthy_cbv_ml_per_100g: float = 4.0
    # lesion geometry
    lesion_axes_xy_mm: tuple = (16.0, 30.0)
    lesion_axes_z_mm: tuple = (10.0, 16.0)
    lesion_cbf_floor: tuple = (0.05, 0.25)
    lesion_center_frac: float = 0.45
    # treatment metadata sampling
    onset_min_range: tuple = (60.0, 300.0)
    recan_min_range: tuple = (90.0, 270.0)
    mtici_probs: dict = field(
        default_factory=lambda: {"0": 0.10, "1": 0.08, "2a": 0.15, "2b": 0.27, "3": 0.40}
    )
    occlusion_prob: dict = field(
        default_factory=lambda: {"0": 0.85, "1": 0.60, "2a": 0.30, "2b": 0.08, "3": 0.02}
    )
    # acquisition degradations
    noise_sigma_hu: float = 1.0
    tilt_deg: float = 0.0
    shuttle_offset_s: float = 0.0
    motion_amp_mm: float = 0.0
    motion_amp_deg: float = 0.0
    fate: FateConfig = field(default_factory=FateConfig)

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if self.frame_dt_s <= 0 or self.fine_dt_s <= 0:
            raise ValueError("time steps must be > 0")
        last = (self.n_frames - 1) * self.frame_dt_s + abs(self.shuttle_offset_s)
        if last > self.duration_s:
            raise ValueError("frame grid extends past the fine-grid duration")
        probs = [self.mtici_probs[g] for g in MTICI_GRADES]
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("mtici_probs must sum to 1")

    @property
    def grid(self) -> Grid3:
        return Grid3(tuple(self.shape), tuple(self.spacing), 0.0)

    @property
    def frame_times_s(self) -> np.ndarray:
        return self.frame_dt_s * np.arange(self.n_frames, dtype=np.float64)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "PhantomConfig":
        d = dict(d)
        fate = d.pop("fate", None)
        kwargs = {}
        for f in dataclasses.fields(PhantomConfig):
            if f.name == "fate" or f.name not in d:
                continue
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        if fate is not None:
            kwargs["fate"] = FateConfig(**fate)
        return PhantomConfig(**kwargs)


@dataclass(frozen=True, eq=False)
class PhantomCase:
    case_id: str
    ctp: Ctp4d
    aif: Aif
    tissue: TissueField
    metadata: TreatmentMetadata
    infarct_gt: LabelVol
    seed: int


def gamma_variate_aif(
    peak_hu: float,
    t0_s: float,
    tp_s: float,
    alpha: float,
    duration_s: float,
    dt_s: float,
    voxel=None,
) -> Aif:
    """Gamma-variate first pass: peak at ``t0_s + tp_s``, zero before onset."""
    t = dt_s * np.arange(int(round(duration_s / dt_s)) + 1, dtype=np.float64)
    s = np.maximum(t - t0_s, 0.0) / tp_s
    vals = peak_hu * np.power(s, alpha) * np.exp(alpha * (1.0 - s))
    return Aif(t, vals, voxel)


def synthesize_curves(
    tissue: TissueField,
    aif: Aif,
    times_s: np.ndarray,
    baseline_hu: np.ndarray | None = None,
    k_flow_per_s: float = 0.012,
    slice_dt_s: np.ndarray | None = None,
) -> Ctp4d:
    """Forward indicator-dilution model sampled at the frame times.

    Per brain voxel the enhancement is ``k * cbf_ratio * (aif (*) R)`` with
    ``R(tau) = exp(-(tau - delay)/mtt)`` for ``tau >= delay`` (0 before). The
    convolution runs on the AIF's own uniform fine grid with trapezoid
    boundary correction, then frames (optionally per-slice shifted) are read
    off by linear interpolation. Voxels outside the brain mask stay at
    baseline.
    """
    tf = aif.times_s
    steps = np.diff(tf)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError("AIF must live on a uniform fine grid")
    dt_f = float(steps[0])
    times = np.asarray(times_s, dtype=np.float64)
    offsets = np.zeros(tissue.grid.shape[2]) if slice_dt_s is None else np.asarray(
        slice_dt_s, dtype=np.float64
    )
    t_lo = times[0] + offsets.min()
    t_hi = times[-1] + offsets.max()
    if t_lo < tf[0] - 1e-9 or t_hi > tf[-1] + 1e-9:
        raise ValueError("frame times extend beyond the AIF fine grid")

    mask = tissue.brain_mask
    if baseline_hu is None:
        baseline_hu = np.where(mask, 32.0, -1000.0)
    baseline_hu = np.asarray(baseline_hu, dtype=np.float64)
    if baseline_hu.shape != tissue.grid.shape:
        raise ValueError("baseline_hu shape mismatch")

    a = aif.values
    nf = tf.size
    delay = tissue.delay_s[mask]
    mtt = tissue.mtt_s[mask]
    cbf = tissue.cbf_ratio[mask]
    lag = tf[None, :] - delay[:, None]
    residue = np.where(lag >= 0.0, np.exp(-np.maximum(lag, 0.0) / mtt[:, None]), 0.0)
    total = fftconvolve(residue, a[None, :], axes=1)[:, :nf]
    # trapezoid end-point correction of the left-Riemann convolution sum
    conv = dt_f * total - 0.5 * dt_f * (a[0] * residue + residue[:, :1] * a[None, :])
    enh = k_flow_per_s * cbf[:, None] * conv

    n_t = times.size
    data = np.repeat(baseline_hu[..., None], n_t, axis=-1)
    kz = np.argwhere(mask)[:, 2]
    enh_sampled = np.empty((enh.shape[0], n_t), dtype=np.float64)
    for off in np.unique(offsets):
        rows = offsets[kz] == off
        if not rows.any():
            continue
        pos = np.clip((times + off - tf[0]) / dt_f, 0.0, nf - 1.0)
        i0 = np.minimum(pos.astype(np.int64), nf - 2)
        w = pos - i0
        enh_sampled[rows] = enh[rows][:, i0] * (1.0 - w) + enh[rows][:, i0 + 1] * w
    data[mask] += enh_sampled
    return Ctp4d(tissue.grid, times, data, None if slice_dt_s is None else offsets)


def fate_model(
    tissue: TissueField, m: TreatmentMetadata, cfg: FateConfig
) -> LabelVol:
    """Final infarct from hypoperfusion depth and effective ischemia time.

    Core (cbf_ratio < r_core) always infarcts. Penumbral tissue infarcts
    when the reperfusion-adjusted exposure t_eff / rho exceeds its survival
    time, which grows linearly from 0 at r_core to tau_death_min at r_pen.
    """
    rho = cfg.reperfusion_fraction[m.mtici]
    if rho > 0.0 and not m.occluded_at_24h:
        t_eff = m.onset_to_ctp_min + m.ctp_to_recan_min
        t_adj = t_eff / rho
    else:
        t_adj = math.inf
    r = tissue.cbf_ratio
    core = r < cfg.r_core
    pen = (r >= cfg.r_core) & (r < cfg.r_pen)
    survival = cfg.tau_death_min * (r - cfg.r_core) / (cfg.r_pen - cfg.r_core)
    dead = core | (pen & (t_adj > survival))
    dead &= tissue.brain_mask
    return LabelVol(tissue.grid, dead.astype(np.float64))


def _ellipsoid_distance(grid: Grid3, center_mm, semi_axes_mm) -> np.ndarray:
    """Normalized ellipsoid distance field (1 on the surface)."""
    coords = [
        (np.arange(grid.shape[ax]) * grid.spacing[ax] - center_mm[ax])
        / semi_axes_mm[ax]
        for ax in range(3)
    ]
    xx = coords[0][:, None, None]
    yy = coords[1][None, :, None]
    zz = coords[2][None, None, :]
    return np.sqrt(xx * xx + yy * yy + zz * zz)


def _build_anatomy(cfg: PhantomConfig):
    grid = cfg.grid
    ext = [grid.shape[a] * grid.spacing[a] for a in range(3)]
    center = [e / 2.0 for e in ext]
    brain_axes = [cfg.brain_axes_frac[a] * ext[a] / 2.0 for a in range(3)]
    d = _ellipsoid_distance(grid, center, brain_axes)
    brain = d < 1.0
    skull = (d >= 1.0) & (d < cfg.skull_frac)
    baseline = np.full(grid.shape, cfg.air_hu, dtype=np.float64)
    baseline[skull] = cfg.bone_hu
    baseline[brain] = np.where(
        d[brain] >= cfg.cortex_frac, cfg.gray_hu, cfg.white_hu
    )
    return grid, center, brain_axes, d, brain, baseline


def _sample_lesion(cfg: PhantomConfig, rng, center_mm, brain_axes_mm):
    grid = cfg.grid
    while True:
        u = rng.uniform(-1.0, 1.0, size=3)
        if np.sqrt((u**2).sum()) <= cfg.lesion_center_frac:
            break
    lesion_center = [center_mm[a] + u[a] * brain_axes_mm[a] for a in range(3)]
    axes = [
        rng.uniform(*cfg.lesion_axes_xy_mm),
        rng.uniform(*cfg.lesion_axes_xy_mm),
        rng.uniform(*cfg.lesion_axes_z_mm),
    ]
    floor = rng.uniform(*cfg.lesion_cbf_floor)
    d = _ellipsoid_distance(grid, lesion_center, axes)
    depth = np.maximum(0.0, 1.0 - d * d)  # 1 at center, 0 at surface
    cbf = 1.0 - (1.0 - floor) * depth
    return cbf


def _pick_artery_voxel(brain: np.ndarray, cbf: np.ndarray) -> tuple[int, int, int]:
    """Most-anterior healthy brain voxel on the mid slice (deterministic)."""
    kz = brain.shape[2] // 2
    cand = brain[:, :, kz] & (cbf[:, :, kz] > 0.98)
    idx = np.argwhere(cand)
    if idx.size == 0:
        raise ValueError("no healthy brain voxel available for the artery")
    order = np.lexsort((idx[:, 0], -idx[:, 1]))  # max y, then min x
    i, j = idx[order[0]]
    return int(i), int(j), int(kz)


def sample_metadata(cfg: PhantomConfig, rng) -> TreatmentMetadata:
    grades = list(MTICI_GRADES)
    probs = np.array([cfg.mtici_probs[g] for g in grades])
    mtici = grades[int(rng.choice(len(grades), p=probs))]
    occluded = bool(rng.uniform() < cfg.occlusion_prob[mtici])
    return TreatmentMetadata(
        onset_to_ctp_min=float(np.round(rng.uniform(*cfg.onset_min_range), 1)),
        ctp_to_recan_min=float(np.round(rng.uniform(*cfg.recan_min_range), 1)),
        mtici=mtici,
        occluded_at_24h=occluded,
    )


def generate_case(cfg: PhantomConfig, seed: int, case_id: str | None = None) -> PhantomCase:
    """Deterministically generate one case from (cfg, seed)."""
    rng = np.random.default_rng(seed)
    grid, center, brain_axes, _, brain, baseline = _build_anatomy(cfg)

    cbf = np.where(brain, _sample_lesion(cfg, rng, center, brain_axes), 0.0)
    severity = np.where(brain, 1.0 - cbf, 0.0)
    delay = cfg.delay_base_s + cfg.delay_gain_s * severity
    mtt = cfg.healthy_mtt_s / np.clip(cbf, cfg.mtt_cbf_floor, 1.0)
    cbv = cfg.healthy_cbv_ml_per_100g * cbf * (mtt / cfg.healthy_mtt_s)
    tissue = TissueField(grid, cbf, cbv, delay, mtt, brain)

    artery = _pick_artery_voxel(brain, cbf)
    aif = gamma_variate_aif(
        peak_hu=rng.uniform(*cfg.aif_peak_hu),
        t0_s=rng.uniform(*cfg.aif_t0_s),
        tp_s=rng.uniform(*cfg.aif_tp_s),
        alpha=cfg.aif_alpha,
        duration_s=cfg.duration_s,
        dt_s=cfg.fine_dt_s,
        voxel=artery,
    )

    metadata = sample_metadata(cfg, rng)
    gt = fate_model(tissue, metadata, cfg.fate)

    offsets = None
    if cfg.shuttle_offset_s != 0.0:
        offsets = cfg.shuttle_offset_s * (np.arange(grid.shape[2]) % 2).astype(
            np.float64
        )
    ctp = synthesize_curves(
        tissue, aif, cfg.frame_times_s, baseline, cfg.k_flow_per_s, offsets
    )
    data = np.array(ctp.data)

    # arterial segment: three voxels along y carrying the (scaled) input curve
    ai, aj, ak = artery
    arterial = aif.values_at(cfg.frame_times_s if offsets is None else
                             cfg.frame_times_s + offsets[ak])
    for dj, scale in ((-1, 0.7), (0, 1.0), (1, 0.7)):
        j = aj + dj
        if 0 <= j < grid.shape[1] and brain[ai, j, ak]:
            data[ai, j, ak, :] = cfg.blood_hu + scale * arterial

    if cfg.motion_amp_mm > 0.0 or cfg.motion_amp_deg > 0.0:
        for t in range(1, cfg.n_frames):
            tx = rng.uniform(-cfg.motion_amp_mm, cfg.motion_amp_mm)
            ty = rng.uniform(-cfg.motion_amp_mm, cfg.motion_amp_mm)
            rd = rng.uniform(-cfg.motion_amp_deg, cfg.motion_amp_deg)
            moved = apply_rigid(
                Vol3(grid, np.ascontiguousarray(data[..., t])), tx, ty, rd,
                fill=cfg.air_hu,
            )
            data[..., t] = moved.data

    if cfg.noise_sigma_hu > 0.0:
        data = data + rng.normal(0.0, cfg.noise_sigma_hu, size=data.shape)

    ctp = Ctp4d(grid, cfg.frame_times_s, data, offsets)
    if cfg.tilt_deg != 0.0:
        ctp = _apply_tilt(ctp, cfg.tilt_deg, cfg.air_hu)

    if case_id is None:
        case_id = f"case_{seed:08x}"
    return PhantomCase(case_id, ctp, aif, tissue, metadata, gt, int(seed))


def _apply_tilt(c: Ctp4d, tilt_deg: float, fill: float) -> Ctp4d:
    """Re-bin orthogonal data as if acquired with a tilted gantry.

    Shearing with the negated angle and then labeling the grid as tilted
    makes tilt removal the exact inverse sampling.
    """
    sheared = remove_gantry_tilt(
        Ctp4d(c.grid.with_tilt(-tilt_deg), c.times_s, c.data, c.slice_dt_s),
        fill=fill,
    )
    return Ctp4d(c.grid.with_tilt(tilt_deg), c.times_s, sheared.data, c.slice_dt_s)


def write_case(case: PhantomCase, case_dir) -> None:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(case.ctp, case_dir / "ctp.nii")
    write_nifti(Vol3(case.infarct_gt.grid, case.infarct_gt.data), case_dir / "gt.nii")
    aif = {
        "times_s": case.aif.times_s.tolist(),
        "values_hu": case.aif.values.tolist(),
        "voxel": list(case.aif.voxel) if case.aif.voxel is not None else None,
    }
    (case_dir / "aif.json").write_text(json.dumps(aif))
    meta = case.metadata.to_dict()
    meta["seed"] = case.seed
    meta["case_id"] = case.case_id
    if case.ctp.slice_dt_s is not None:
        meta["slice_dt_s"] = case.ctp.slice_dt_s.tolist()
    (case_dir / "meta.json").write_text(json.dumps(meta, indent=1))


@dataclass(frozen=True, eq=False)
class StoredCase:
    """A case as read back from disk (no tissue ground truth)."""

    case_id: str
    ctp: Ctp4d
    aif: Aif
    metadata: TreatmentMetadata
    infarct_gt: LabelVol
    case_dir: Path


def read_case(case_dir) -> StoredCase:
    case_dir = Path(case_dir)
    ctp = read_nifti(case_dir / "ctp.nii")
    gt_vol = read_nifti(case_dir / "gt.nii")
    gt = LabelVol(gt_vol.grid, np.clip(np.round(gt_vol.data), 0.0, 1.0))
    aif_d = json.loads((case_dir / "aif.json").read_text())
    voxel = tuple(aif_d["voxel"]) if aif_d.get("voxel") is not None else None
    aif = Aif(np.array(aif_d["times_s"]), np.array(aif_d["values_hu"]), voxel)
    meta_d = json.loads((case_dir / "meta.json").read_text())
    metadata = TreatmentMetadata.from_dict(meta_d)
    if "slice_dt_s" in meta_d:
        ctp = Ctp4d(ctp.grid, ctp.times_s, ctp.data, np.array(meta_d["slice_dt_s"]))
    return StoredCase(
        meta_d.get("case_id", case_dir.name), ctp, aif, metadata, gt, case_dir
    )


def cohort_seeds(master_seed: int, n_cases: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(n_cases)]


def generate_cohort(
    cfg: PhantomConfig, n_cases: int, master_seed: int, out_dir=None
) -> list[PhantomCase]:
    """Generate ``n_cases`` independent cases; optionally persist them.

    The manifest records the config and every per-case seed, so the cohort
    can be regenerated file-identically.
    """
    seeds = cohort_seeds(master_seed, n_cases)
    cases = []
    for i, s in enumerate(seeds):
        case = generate_case(cfg, s, case_id=f"case_{i:04d}")
        cases.append(case)
        if out_dir is not None:
            write_case(case, Path(out_dir) / case.case_id)
    if out_dir is not None:
        manifest = {
            "n_cases": n_cases,
            "master_seed": master_seed,
            "config": cfg.to_dict(),
            "cases": [
                {"id": c.case_id, "seed": c.seed, "dir": c.case_id} for c in cases
            ],
        }
        (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return cases


def load_cohort(cohort_dir) -> list[StoredCase]:
    cohort_dir = Path(cohort_dir)
    manifest = json.loads((cohort_dir / "manifest.json").read_text())
    return [read_case(cohort_dir / entry["dir"]) for entry in manifest["cases"]]
