"""Classical perfusion analysis: AIF handling, regularized deconvolution, maps.

The deconvolution solves ``c = A r`` per voxel, where ``A`` is the
lower-triangular quadrature matrix of the arterial input function and ``r``
the flow-scaled impulse response. Singular values of ``A`` are filtered with
Tikhonov factors before back-substitution, which is what keeps the
reconstruction stable on noisy curves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Ctp4d, Grid3, LabelVol, Vol3, gaussian_smooth


@dataclass(frozen=True, eq=False)
class Aif:
    """Arterial time-concentration curve (delta-HU) and its source voxel."""

    times_s: np.ndarray
    values: np.ndarray
    voxel: tuple[int, int, int] | None = None

    def __post_init__(self):
        times = np.asarray(self.times_s, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("AIF times and values must be 1D and equal length")
        if not np.isfinite(values).all():
            raise ValueError("AIF values must be finite")
        if values.max() <= 0:
            raise ValueError("AIF peak must be positive")
        if not (np.diff(times) > 0).all():
            raise ValueError("AIF times must be strictly increasing")
        for arr in (times, values):
            arr.setflags(write=False)
        object.__setattr__(self, "times_s", times)
        object.__setattr__(self, "values", values)

    def values_at(self, times_s, strict: bool = True) -> np.ndarray:
        """Linearly interpolate the curve; optionally reject extrapolation."""
        t = np.asarray(times_s, dtype=np.float64)
        if strict and (t.min() < self.times_s[0] - 1e-9 or t.max() > self.times_s[-1] + 1e-9):
            raise ValueError("requested times extend beyond AIF support")
        return np.interp(t, self.times_s, self.values)


@dataclass(frozen=True)
class DeconvConfig:
    """Regularization strength (relative to sigma_max) and spatial presmooth."""

    lambda_rel: float = 0.4
    presmooth_sigma_mm: float = 2.5

    def __post_init__(self):
        if not self.lambda_rel > 0:
            raise ValueError("lambda_rel must be > 0")
        if self.presmooth_sigma_mm < 0:
            raise ValueError("presmooth_sigma_mm must be >= 0")


@dataclass(frozen=True, eq=False)
class PerfusionMaps:
    """Relative CBF (max of IRF), CBV (integral) and Tmax (argmax, seconds)."""

    cbf: Vol3
    cbv: Vol3
    tmax: Vol3


@dataclass(frozen=True, eq=False)
class DeconvResult:
    irf: Ctp4d  # per-voxel flow-scaled impulse response over lag time
    maps: PerfusionMaps


def detect_bolus_arrival(c: Ctp4d, mask: np.ndarray, noise_floor_hu: float = 0.5) -> int:
    """Return the number of leading pre-bolus frames (the baseline window).

    The global mean curve over ``mask`` is scanned for the first frame
    exceeding the running baseline by 3 noise standard deviations (with an
    absolute floor for noiseless data); one frame of margin is kept so the
    baseline window stays strictly pre-arrival.
    """
    g = c.data[mask].mean(axis=0)
    t_total = g.size
    for k in range(2, t_total):
        base = g[:k]
        thr = base.mean() + max(3.0 * base.std(), noise_floor_hu)
        if g[k] > thr:
            n_baseline = k - 1
            if n_baseline < 2:
                raise ValueError("bolus arrives too early to estimate a baseline")
            return n_baseline
    raise ValueError("bolus arrival undetectable on the global mean curve")


def extract_concentration(c: Ctp4d, mask: np.ndarray) -> Ctp4d:
    """Subtract the per-voxel pre-bolus baseline, yielding delta-HU curves."""
    n_base = detect_bolus_arrival(c, mask)
    baseline = c.data[..., :n_base].mean(axis=-1, keepdims=True)
    return Ctp4d(c.grid, c.times_s, c.data - baseline, c.slice_dt_s)


def _curve_features(conc_data: np.ndarray):
    peak = conc_data.max(axis=-1)
    peak_t = conc_data.argmax(axis=-1)
    half = 0.5 * peak[..., None]
    width = (conc_data > np.maximum(half, 1e-12)).sum(axis=-1)
    return peak, peak_t, width


def auto_aif_ranked(
    conc: Ctp4d, mask: np.ndarray, min_peak_hu: float = 20.0, max_candidates: int = 10
) -> list[Aif]:
    """Rank arterial candidates: high peak, early and narrow first pass.

    Candidates above ``min_peak_hu`` are restricted to those with peak time
    at or before the median and width at or below the median; the survivors
    are ordered by descending peak with a lexicographic voxel-index
    tie-break. Falls back to all above-threshold voxels if the joint filter
    is empty.
    """
    peak, peak_t, width = _curve_features(conc.data)
    cand = mask & (peak >= min_peak_hu)
    if not cand.any():
        raise ValueError(f"no AIF candidate with peak >= {min_peak_hu} HU")
    early = peak_t <= np.median(peak_t[cand])
    narrow = width <= np.median(width[cand])
    chosen = cand & early & narrow
    if not chosen.any():
        chosen = cand
    idx = np.argwhere(chosen)
    peaks = peak[chosen]
    # descending peak, then ascending (i, j, k)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -peaks))
    out = []
    for row in order[:max_candidates]:
        i, j, k = (int(v) for v in idx[row])
        out.append(Aif(conc.times_s, conc.data[i, j, k, :], (i, j, k)))
    return out


def auto_aif(conc: Ctp4d, mask: np.ndarray, min_peak_hu: float = 20.0) -> Aif:
    return auto_aif_ranked(conc, mask, min_peak_hu, max_candidates=1)[0]


def build_volterra_matrix(aif: Aif, dt_s: float) -> np.ndarray:
    """Lower-triangular quadrature matrix A with c = A @ r.

    ``A[i, j] = dt * w(i, j) * aif[i - j]`` with composite-trapezoid
    boundary weights: 1/2 at ``j == 0`` and at ``j == i``, multiplicative
    where both apply (so ``A[0, 0] = dt * aif[0] / 4``), 1 elsewhere.
    """
    steps = np.diff(aif.times_s)
    if not np.allclose(steps, dt_s, rtol=1e-6, atol=1e-9):
        raise ValueError("AIF must be resampled to the uniform frame grid first")
    a = aif.values
    t_total = a.size
    i = np.arange(t_total)
    lag = i[:, None] - i[None, :]
    mat = np.where(lag >= 0, a[np.clip(lag, 0, t_total - 1)], 0.0)
    mat[:, 0] *= 0.5
    mat[i, i] *= 0.5
    return dt_s * mat


def _tikhonov_operator(a_mat: np.ndarray, lambda_rel: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(a_mat)
    if s[0] <= 0:
        raise ValueError("AIF quadrature matrix is singular (all-zero AIF)")
    lam = lambda_rel * s[0]
    filt = s / (s * s + lam * lam)  # = F_i / sigma_i with F_i = s^2/(s^2+lam^2)
    return (vt.T * filt) @ u.T


def deconvolve(
    conc: Ctp4d,
    aif: Aif,
    cfg: DeconvConfig,
    mask: np.ndarray,
) -> DeconvResult:
    """Tikhonov-filtered SVD deconvolution of concentration curves.

    Input curves are spatially presmoothed, the AIF matrix is factorized
    once, and every masked voxel is back-substituted through the shared
    filtered pseudo-inverse. Maps: cbf = max of IRF, tmax = its lag,
    cbv = its time-integral (clamped at zero).
    """
    steps = np.diff(conc.times_s)
    dt = float(steps[0])
    if not np.allclose(steps, dt, rtol=1e-6, atol=1e-9):
        raise ValueError("deconvolution expects a uniform time grid")
    data = conc.data
    if cfg.presmooth_sigma_mm > 0:
        sm = conc.map_frames(lambda f: gaussian_smooth(f, cfg.presmooth_sigma_mm))
        data = sm.data
    aif_frames = Aif(conc.times_s, aif.values_at(conc.times_s), aif.voxel)
    a_mat = build_volterra_matrix(aif_frames, dt)
    op = _tikhonov_operator(a_mat, cfg.lambda_rel)

    t_total = conc.n_frames
    curves = data[mask]  # (n_vox, T)
    irf_masked = curves @ op.T
    irf = np.zeros(conc.grid.shape + (t_total,), dtype=np.float64)
    irf[mask] = irf_masked

    cbf = irf.max(axis=-1)
    tmax = dt * irf.argmax(axis=-1).astype(np.float64)
    cbv = np.maximum(dt * irf.sum(axis=-1), 0.0)
    lag_times = dt * np.arange(t_total)
    g = conc.grid
    maps = PerfusionMaps(
        cbf=Vol3(g, cbf), cbv=Vol3(g, cbv), tmax=Vol3(g, tmax)
    )
    return DeconvResult(irf=Ctp4d(g, lag_times, irf), maps=maps)


def threshold_segment(
    maps: PerfusionMaps,
    mask: np.ndarray,
    tmax_lesion_s: float = 6.0,
    cbf_core_fraction: float = 0.3,
    core_rule=None,
    lesion_rule=None,
) -> tuple[LabelVol, LabelVol]:
    """Threshold maps into (core, lesion); core is forced inside the lesion.

    Defaults: lesion where tmax exceeds ``tmax_lesion_s``; core where cbf is
    below ``cbf_core_fraction`` of the median healthy cbf (mask voxels
    outside the lesion candidate region).
    """
    if lesion_rule is None:
        lesion = maps.tmax.data > tmax_lesion_s
    else:
        lesion = np.asarray(lesion_rule(maps), dtype=bool)
    lesion = lesion & mask
    if core_rule is None:
        healthy = mask & ~lesion
        reference = np.median(maps.cbf.data[healthy]) if healthy.any() else 0.0
        core = maps.cbf.data < cbf_core_fraction * reference
    else:
        core = np.asarray(core_rule(maps), dtype=bool)
    core = core & lesion
    g = maps.cbf.grid
    return LabelVol(g, core.astype(np.float64)), LabelVol(g, lesion.astype(np.float64))
