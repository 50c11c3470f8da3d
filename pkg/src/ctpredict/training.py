"""Patch sampling, augmentation, loss and the SGD training loop.

Training operates on preprocessed cases. Each case is flattened into a
`TrainingCase`: standardized time series (time-first), a matching 3x
in-plane context volume, the arterial curve on the frame grid, covariates
and zero-padded labels. Patch windows are snapped so the context pathway
lands exactly on the downsampled grid; full-volume inference reuses the
same convention, so tiled and patched views of the network agree.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .network import (
    HI_SHAPE,
    LO_FACTOR,
    MARGIN_XY,
    MARGIN_Z,
    OUT_SHAPE,
    Model,
    VariantSpec,
    VARIANTS,
    build_model,
    save_weights,
)
from .perfusion import Aif, DeconvConfig, deconvolve, extract_concentration
from .phantom import TreatmentMetadata
from .preprocess import PreprocessedCase
from .volume import Ctp4d, Vol3, downsample_mean, gaussian_smooth

# padding of the once-per-case arrays; sized so any mask-centered window fits
PAD_HI = (24, 24, 8)
PAD_LO = (10, 10, 8)
PAD_OUT = (12, 12, 8)


def _pad_img(a, pad):
    px, py, pz = pad
    return np.pad(a, ((0, 0), (px, px), (py, py), (pz, pz)), mode="edge")


def _pad_lab(a, pad):
    px, py, pz = pad
    return np.pad(a, ((px, px), (py, py), (pz, pz)))


def _meta_features(meta: TreatmentMetadata, spec: VariantSpec) -> np.ndarray:
    feats = meta.as_features(binary_mtici=spec.meta == "binary")
    if spec.meta == "no_onset":
        feats = feats[1:]
    elif spec.meta == "no_recan":
        feats = np.concatenate([feats[:1], feats[2:]])
    return feats.astype(np.float32)


def aif_features(aif: Aif, times_s, std_hu: float) -> np.ndarray:
    """Arterial curve on the frame grid, in standardized intensity units."""
    return (aif.values_at(times_s) / std_hu).astype(np.float32)


@dataclass(eq=False)
class TrainingCase:
    """One case flattened into network-ready padded arrays."""

    case_id: str
    x_hi: np.ndarray  # (T, X+2p, Y+2p, Z+2p) standardized, edge-padded
    x_lo: np.ndarray | None
    base_hi: np.ndarray  # per-voxel pre-bolus baseline, same layout
    base_lo: np.ndarray | None
    aif: np.ndarray  # (T,)
    meta: np.ndarray  # (meta_dim,)
    gt: np.ndarray  # (X+2q, Y+2q, Z+2q) zero-padded
    mask: np.ndarray
    shape: tuple[int, int, int]
    mask_idx: np.ndarray = field(repr=False)  # (n, 3) candidate centers

    @property
    def t_frames(self) -> int:
        return int(self.x_hi.shape[0])


def make_training_case(
    pre: PreprocessedCase,
    spec: VariantSpec,
    deconv: DeconvConfig | None = None,
) -> TrainingCase:
    """Standardize one preprocessed case for a given experiment variant."""
    ctp = pre.ctp
    aif_doc = json.loads((pre.case_dir / "aif.json").read_text())
    aif = Aif(np.asarray(aif_doc["times_s"]), np.asarray(aif_doc["values_hu"]))
    meta = TreatmentMetadata.from_dict(json.loads((pre.case_dir / "meta.json").read_text()))

    if spec.tissue_input == "smoothed":
        sigma = (deconv or DeconvConfig()).presmooth_sigma_mm
        ctp = ctp.map_frames(lambda f: gaussian_smooth(f, sigma))

    aif_curve = aif_features(aif, ctp.times_s, pre.stats.std_hu)

    if spec.tissue_input == "irf":
        conc = extract_concentration(ctp, pre.mask)
        result = deconvolve(conc, aif, deconv or DeconvConfig(), pre.mask)
        data = result.irf.data
        scale = max(float(data.std()), 1e-12)
        x = (data / scale).astype(np.float32)
        n_base = 0  # impulse responses carry no pre-bolus plateau
    else:
        x = ((ctp.data - pre.stats.mean_hu) / pre.stats.std_hu).astype(np.float32)
        n_base = pre.arrival_frame

    x = np.ascontiguousarray(np.moveaxis(x, -1, 0))  # (T, X, Y, Z)
    base = x[:n_base].mean(axis=0) if n_base > 0 else np.zeros(x.shape[1:], np.float32)

    x_lo = base_lo = None
    if spec.lores:
        g = ctp.grid
        lo_frames = [
            downsample_mean(Vol3(g, np.ascontiguousarray(f)), (LO_FACTOR, LO_FACTOR, 1)).data
            for f in x
        ]
        x_lo = _pad_img(np.stack(lo_frames).astype(np.float32), PAD_LO)
        base_lo = x_lo[:n_base].mean(axis=0) if n_base > 0 else np.zeros(x_lo.shape[1:], np.float32)

    mask = pre.mask.astype(bool)
    return TrainingCase(
        case_id=pre.case_id,
        x_hi=_pad_img(x, PAD_HI),
        x_lo=x_lo,
        base_hi=_pad_img(base[None], PAD_HI)[0],
        base_lo=base_lo,
        aif=aif_curve.astype(np.float32),
        meta=_meta_features(meta, spec),
        gt=_pad_lab(pre.infarct_gt.data.astype(np.float32), PAD_OUT),
        mask=_pad_lab(mask.astype(np.float32), PAD_OUT),
        shape=mask.shape,
        mask_idx=np.argwhere(mask),
    )


@dataclass(frozen=True)
class AugmentConfig:
    """Stochastic training-time perturbations.

    Time shifts and contrast-dose scaling exploit the linear time-invariant
    relation between artery and tissue: both curves move together, so the
    underlying hemodynamics are unchanged.
    """

    shift_frames: tuple[int, int] = (-4, 6)
    scale_sigma: float = 0.3
    flip: bool = True
    rotate_deg: float = 10.0
    noise_sigma: float = 0.05
    lti: bool = True


def _time_shift(x, k):
    idx = np.clip(np.arange(x.shape[0]) - k, 0, x.shape[0] - 1)
    return x[idx]


def sample_patch(case: TrainingCase, spec: VariantSpec, rng, aug: AugmentConfig | None = None):
    """Draw one training sample (inputs dict) centered on a random mask voxel."""
    cx, cy, cz = case.mask_idx[rng.integers(len(case.mask_idx))]
    ox = 3 * int(np.round((cx - OUT_SHAPE[0] // 2) / 3))
    oy = 3 * int(np.round((cy - OUT_SHAPE[1] // 2) / 3))
    oz = int(cz) - OUT_SHAPE[2] // 2
    return _assemble(case, spec, (ox, oy, oz), OUT_SHAPE, rng, aug)


def _assemble(case, spec, origin, out_shape, rng=None, aug=None):
    ox, oy, oz = origin
    sx, sy, sz = out_shape
    px, py, pz = PAD_HI
    qx, qy, qz = PAD_OUT

    if spec.one_voxel:
        hi = case.x_hi[:, ox + px : ox + px + sx, oy + py : oy + py + sy,
                       oz + pz : oz + pz + sz]
        base_hi = case.base_hi[ox + px : ox + px + sx, oy + py : oy + py + sy,
                               oz + pz : oz + pz + sz]
    elif spec.hires:
        hx, hy = ox - MARGIN_XY + px, oy - MARGIN_XY + py
        hz = oz - MARGIN_Z + pz
        hi = case.x_hi[:, hx : hx + sx + 2 * MARGIN_XY, hy : hy + sy + 2 * MARGIN_XY,
                       hz : hz + sz + 2 * MARGIN_Z]
        base_hi = case.base_hi[hx : hx + sx + 2 * MARGIN_XY,
                               hy : hy + sy + 2 * MARGIN_XY,
                               hz : hz + sz + 2 * MARGIN_Z]
    else:
        hi = base_hi = None

    lo = base_lo = None
    if spec.lores:
        lx = ox // 3 - MARGIN_XY + PAD_LO[0]
        ly = oy // 3 - MARGIN_XY + PAD_LO[1]
        lz = oz - MARGIN_Z + PAD_LO[2]
        lo = case.x_lo[:, lx : lx + sx // 3 + 2 * MARGIN_XY,
                       ly : ly + sy // 3 + 2 * MARGIN_XY, lz : lz + sz + 2 * MARGIN_Z]
        base_lo = case.base_lo[lx : lx + sx // 3 + 2 * MARGIN_XY,
                               ly : ly + sy // 3 + 2 * MARGIN_XY,
                               lz : lz + sz + 2 * MARGIN_Z]

    y = case.gt[ox + qx : ox + qx + sx, oy + qy : oy + qy + sy, oz + qz : oz + qz + sz]
    m = case.mask[ox + qx : ox + qx + sx, oy + qy : oy + qy + sy, oz + qz : oz + qz + sz]
    aif = case.aif

    hi = None if hi is None else hi.copy()
    lo = None if lo is None else lo.copy()
    y, m = y.copy(), m.copy()

    if aug is not None:
        if aug.lti and spec.lti_augment:
            k = int(rng.integers(aug.shift_frames[0], aug.shift_frames[1] + 1))
            s = float(np.exp(rng.normal(0.0, aug.scale_sigma)))
            if hi is not None:
                hi = base_hi + s * (_time_shift(hi, k) - base_hi)
            if lo is not None:
                lo = base_lo + s * (_time_shift(lo, k) - base_lo)
            aif = s * _time_shift(aif, k)
        if aug.flip and rng.random() < 0.5:
            if hi is not None:
                hi = hi[:, ::-1]
            if lo is not None:
                lo = lo[:, ::-1]
            y, m = y[::-1], m[::-1]
        if aug.rotate_deg > 0:
            ang = float(rng.uniform(-aug.rotate_deg, aug.rotate_deg))
            rot = dict(axes=(1, 2), reshape=False, mode="nearest")
            if hi is not None:
                hi = ndimage.rotate(hi, ang, order=1, **rot)
            if lo is not None:
                lo = ndimage.rotate(lo, ang, order=1, **rot)
            y = ndimage.rotate(y[None], ang, order=0, **rot)[0]
            m = ndimage.rotate(m[None], ang, order=0, **rot)[0]
        if aug.noise_sigma > 0:
            if hi is not None:
                hi = hi + rng.normal(0.0, aug.noise_sigma, hi.shape)
            if lo is not None:
                lo = lo + rng.normal(0.0, aug.noise_sigma, lo.shape)

    f32 = lambda a: None if a is None else np.ascontiguousarray(a, dtype=np.float32)
    return {
        "x_hi": f32(hi),
        "x_lo": f32(lo),
        "x_aif": f32(aif) if spec.aif else None,
        "meta": case.meta.astype(np.float32),
        "y": np.ascontiguousarray(y, dtype=np.float32),
        "m": np.ascontiguousarray(m, dtype=np.float32),
    }


def collate(samples):
    """Stack per-sample dicts into batched network inputs."""
    def stack(key):
        if samples[0][key] is None:
            return None
        return np.stack([s[key] for s in samples])

    return {k: stack(k) for k in ("x_hi", "x_lo", "x_aif", "meta", "y", "m")}


# ---- loss ----------------------------------------------------------------

def weighted_bce(prob, target, mask, w_pos: float = 10.0, eps: float = 1e-7):
    """Masked binary cross-entropy with up-weighted positives.

    Returns (scalar loss, gradient wrt prob). The mean is taken over masked
    voxels, so the scale does not depend on how many positives a batch has.
    """
    p = np.clip(prob, eps, 1.0 - eps)
    w = mask * (1.0 + (w_pos - 1.0) * target)
    n = max(float(mask.sum()), 1.0)
    loss = float(np.sum(w * -(target * np.log(p) + (1.0 - target) * np.log1p(-p))) / n)
    inside = ((prob > eps) & (prob < 1.0 - eps)).astype(p.dtype)
    dprob = w * inside * (-target / p + (1.0 - target) / (1.0 - p)) / n
    return loss, dprob.astype(prob.dtype)


def soft_dice(prob, target, mask, eps: float = 1e-6) -> float:
    """Continuous overlap score in [0, 1] over the masked region."""
    p = prob * mask
    y = target * mask
    return float((2.0 * np.sum(p * y) + eps) / (np.sum(p) + np.sum(y) + eps))


# ---- optimizer -----------------------------------------------------------

def sgd_nesterov_step(params, velocity, grad, lr: float, momentum: float = 0.9):
    """In-place Nesterov momentum update on the flat parameter vector."""
    velocity *= momentum
    velocity -= lr * grad
    params += momentum * velocity
    params -= lr * grad


# ---- inference -----------------------------------------------------------

def calibrate_running_stats(model: Model, cases, seed: int = 0, n_patches: int = 16):
    """Re-estimate the normalization statistics at frozen weights.

    One momentum-free pass over a fixed patch batch replaces the exponential
    running averages, which lag behind the weights they were tracked under.
    Channels that are constant within a case (arterial curve, covariates)
    would otherwise divide a stale residual by a near-zero variance.
    """
    rng = np.random.default_rng(seed)
    samples = [
        sample_patch(cases[rng.integers(len(cases))], model.spec, rng)
        for _ in range(n_patches)
    ]
    batch = collate(samples)
    model.forward(
        batch["x_hi"], batch["x_lo"], batch["x_aif"], batch["meta"],
        training=True, bn_momentum=0.0,
    )


def predict_case(model: Model, case: TrainingCase) -> np.ndarray:
    """Probability volume for a whole case in one fully-convolutional pass."""
    X, Y, Z = case.shape
    spec = model.spec
    if spec.lores:
        sx = 3 * int(np.ceil(X / 3))
        sy = 3 * int(np.ceil(Y / 3))
    else:
        sx, sy = X, Y
    sample = _assemble(case, spec, (0, 0, 0), (sx, sy, Z))
    batch = collate([sample])
    prob, _ = model.forward(
        batch["x_hi"], batch["x_lo"], batch["x_aif"], batch["meta"], training=False
    )
    return prob[0, 0, :X, :Y, :Z]


def evaluate_cases(model: Model, cases) -> float:
    """Mean soft overlap between predictions and ground truth."""
    scores = []
    for case in cases:
        prob = predict_case(model, case)
        qx, qy, qz = PAD_OUT
        X, Y, Z = case.shape
        y = case.gt[qx : qx + X, qy : qy + Y, qz : qz + Z]
        m = case.mask[qx : qx + X, qy : qy + Y, qz : qz + Z]
        scores.append(soft_dice(prob, y, m))
    return float(np.mean(scores))


# ---- training loop --------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    variant: str = "proposed"
    n_steps: int = 1500
    batch_size: int = 4
    lr: float = 3e-3
    momentum: float = 0.9
    w_pos: float = 10.0
    val_every: int = 100
    plateau_patience: int = 3  # evals without improvement before halving lr
    min_lr: float = 1e-5
    seed: int = 0
    augment: AugmentConfig | None = AugmentConfig()

    def resolved_augment(self, spec: VariantSpec) -> AugmentConfig | None:
        if self.augment is None:
            return None
        if not spec.lti_augment and self.augment.lti:
            return replace(self.augment, lti=False)
        return self.augment


@dataclass(eq=False)
class TrainResult:
    model: Model
    history: list
    best_val: float
    best_step: int


def train(
    cases_train,
    cases_val,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_path=None,
    model: Model | None = None,
) -> TrainResult:
    """Run SGD on sampled patches; returns the best-validation model."""
    spec = VARIANTS[cfg.variant]
    t_frames = cases_train[0].t_frames
    if model is None:
        model = build_model(cfg.variant, t_frames, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    aug = cfg.resolved_augment(spec)

    velocity = np.zeros_like(model.params)
    lr = cfg.lr
    best_val, best_step = -1.0, 0
    best_params = model.params.copy()
    best_running = model.running.copy()
    since_best = 0
    history = []
    log_fh = open(log_path, "w") if log_path else None
    t0 = time.monotonic()
    try:
        for step in range(1, cfg.n_steps + 1):
            batch = collate(
                [
                    sample_patch(
                        cases_train[rng.integers(len(cases_train))], spec, rng, aug
                    )
                    for _ in range(cfg.batch_size)
                ]
            )
            prob, cache = model.forward(
                batch["x_hi"], batch["x_lo"], batch["x_aif"], batch["meta"],
                training=True, want_cache=True,
            )
            y = batch["y"][:, None]
            m = batch["m"][:, None]
            loss, dprob = weighted_bce(prob, y, m, cfg.w_pos)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at step {step} (loss={loss})")
            grad = model.backward(dprob, cache)
            sgd_nesterov_step(model.params, velocity, grad, lr, cfg.momentum)
            model.step = step

            rec = {"step": step, "loss": loss, "lr": lr}
            if step % cfg.val_every == 0 or step == cfg.n_steps:
                val = evaluate_cases(model, cases_val) if cases_val else float("nan")
                rec["val_soft_dice"] = val
                rec["elapsed_s"] = round(time.monotonic() - t0, 3)
                if cases_val:
                    if val > best_val:
                        best_val, best_step, since_best = val, step, 0
                        best_params[...] = model.params
                        best_running[...] = model.running
                        if checkpoint_path:
                            save_weights(model, checkpoint_path)
                    else:
                        since_best += 1
                        if since_best >= cfg.plateau_patience and lr > cfg.min_lr:
                            lr = max(lr * 0.5, cfg.min_lr)
                            # resume from the best checkpoint at the reduced
                            # rate instead of refining a trajectory that has
                            # already wandered away from it
                            model.params[...] = best_params
                            model.running[...] = best_running
                            velocity[:] = 0.0
                            since_best = 0
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()

    if cases_val:
        model.params[...] = best_params
        model.running[...] = best_running
        model.step = best_step
    else:
        best_val, best_step = float("nan"), model.step
    calibrate_running_stats(model, cases_train, seed=cfg.seed + 2)
    if checkpoint_path:
        save_weights(model, checkpoint_path)
    return TrainResult(model, history, best_val, best_step)
