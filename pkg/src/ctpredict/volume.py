"""Geometry-aware 3D/4D volume containers and resampling primitives.

Conventions used throughout the package:

* Arrays are indexed ``[x, y, z]`` (4D: ``[x, y, z, t]``); the serialized
  (file/flat) order is x-fastest, i.e. Fortran order of these arrays.
* Grids share their physical origin at the center of voxel ``(0, 0, 0)``.
* Gantry tilt is a shear about the x-axis: the physical y-coordinate of
  voxel ``(i, j, k)`` is ``j*sy + k*sz*tan(tilt)``.
* Volumes are immutable after construction; every operation returns a new
  volume, which makes them safe to share across parallel workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

AIR_HU = -1024.0


@dataclass(frozen=True)
class Grid3:
    """Voxel lattice: counts, mm spacing and gantry tilt (deg, about x)."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    tilt_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.shape) != 3 or any(n < 1 for n in self.shape):
            raise ValueError(f"grid shape must be three counts >= 1, got {self.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")
        if not abs(self.tilt_deg) < 45:
            raise ValueError(f"|tilt_deg| must be < 45, got {self.tilt_deg}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    @property
    def voxel_volume_ml(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    def with_tilt(self, tilt_deg: float) -> "Grid3":
        return Grid3(self.shape, self.spacing, tilt_deg)


def _as_volume_array(data, shape, ndim_extra=0):
    arr = np.asarray(data)
    if arr.shape[:3] != tuple(shape) or arr.ndim != 3 + ndim_extra:
        raise ValueError(f"data shape {arr.shape} does not match grid {tuple(shape)}")
    if not np.isfinite(arr).all():
        raise ValueError("volume data must be finite")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    arr = arr.copy() if arr.flags.writeable else arr
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Vol3:
    """Scalar field on a Grid3, one value per voxel."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_volume_array(self.data, self.grid.shape))


@dataclass(frozen=True, eq=False)
class LabelVol:
    """Per-voxel value in [0, 1]: binary ground truth or probabilistic map."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        arr = _as_volume_array(self.data, self.grid.shape)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("label values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True, eq=False)
class Ctp4d:
    """4D spatiotemporal attenuation volume (HU) with acquisition times.

    ``data`` has shape ``grid.shape + (T,)``. ``slice_dt_s``, when present,
    holds one per-slice time offset (shuttle acquisitions): slice ``k`` of
    frame ``t`` was acquired at ``times_s[t] + slice_dt_s[k]``.
    """

    grid: Grid3
    times_s: np.ndarray
    data: np.ndarray
    slice_dt_s: np.ndarray | None = field(default=None)

    def __post_init__(self):
        times = np.asarray(self.times_s, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("need at least two time points")
        if not (np.diff(times) > 0).all():
            raise ValueError("times_s must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times_s", times)
        arr = _as_volume_array(self.data, self.grid.shape, ndim_extra=1)
        if arr.shape[3] != times.size:
            raise ValueError(f"{arr.shape[3]} frames but {times.size} time stamps")
        object.__setattr__(self, "data", arr)
        if self.slice_dt_s is not None:
            off = np.asarray(self.slice_dt_s, dtype=np.float64)
            if off.shape != (self.grid.shape[2],):
                raise ValueError("slice_dt_s must have one offset per z-slice")
            off.setflags(write=False)
            object.__setattr__(self, "slice_dt_s", off)

    @property
    def n_frames(self) -> int:
        return int(self.times_s.size)

    def frame(self, t: int) -> Vol3:
        return Vol3(self.grid, np.ascontiguousarray(self.data[..., t]))

    def map_frames(self, fn) -> "Ctp4d":
        """Apply a Vol3 -> Vol3 operation to every frame (shared output grid)."""
        frames = [fn(self.frame(t)) for t in range(self.n_frames)]
        out = np.stack([f.data for f in frames], axis=-1)
        return Ctp4d(frames[0].grid, self.times_s, out, self.slice_dt_s)


def resample_trilinear(v: Vol3, target: Grid3, fill: float = AIR_HU) -> Vol3:
    """Resample onto ``target`` voxel centers with trilinear interpolation.

    Both grids must be orthogonal (tilt 0); they share the origin at voxel
    (0,0,0). Samples outside the source domain take ``fill`` (air by default).
    """
    if v.grid.tilt_deg != 0 or target.tilt_deg != 0:
        raise ValueError("resample_trilinear expects orthogonal grids; remove tilt first")
    if target.n_voxels == 0:
        raise ValueError("degenerate target grid")
    if target == v.grid:
        return Vol3(target, v.data)
    axes = [
        np.arange(target.shape[a]) * target.spacing[a] / v.grid.spacing[a]
        for a in range(3)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)
    out = ndimage.map_coordinates(
        v.data, coords.reshape(3, -1), order=1, mode="constant", cval=fill
    ).reshape(target.shape)
    return Vol3(target, out)


def remove_gantry_tilt(c: Ctp4d, fill: float = AIR_HU) -> Ctp4d:
    """Shear-resample a tilted acquisition onto an orthogonal grid.

    Slice k is shifted by ``-k*sz*tan(tilt)/sy`` voxels in y (linear
    interpolation), so content acquired at physical y lands at the same
    physical y of the orthogonal grid. Zero tilt passes through unchanged.
    """
    if c.grid.tilt_deg == 0:
        return c
    sx, sy, sz = c.grid.spacing
    shear = sz * math.tan(math.radians(c.grid.tilt_deg)) / sy
    ny, nz = c.grid.shape[1], c.grid.shape[2]
    out = np.empty(c.data.shape, dtype=c.data.dtype)
    for k in range(nz):
        y_src = np.arange(ny) + k * shear
        j0 = np.floor(y_src).astype(np.int64)
        w = y_src - j0
        j1 = j0 + 1
        valid0 = ((j0 >= 0) & (j0 < ny))[None, :, None]
        valid1 = ((j1 >= 0) & (j1 < ny))[None, :, None]
        a = np.where(valid0, c.data[:, np.clip(j0, 0, ny - 1), k, :], fill)
        b = np.where(valid1, c.data[:, np.clip(j1, 0, ny - 1), k, :], fill)
        out[:, :, k, :] = (1.0 - w)[None, :, None] * a + w[None, :, None] * b
    return Ctp4d(c.grid.with_tilt(0.0), c.times_s, out, c.slice_dt_s)


def apply_rigid(
    v: Vol3, tx_mm: float, ty_mm: float, rot_deg: float, fill: float = AIR_HU
) -> Vol3:
    """In-plane rigid motion: rotate about the volume's physical center
    (z axis), then translate by ``(tx_mm, ty_mm)``. Trilinear interpolation,
    constant fill outside. The inverse is ``(-tx, -ty, -rot)`` applied in the
    rotated frame, i.e. ``apply_rigid`` with the negated parameters only
    commutes to identity for rotation OR translation alone; use it as the
    forward model inside an optimizer rather than chaining inverses.
    """
    if tx_mm == 0.0 and ty_mm == 0.0 and rot_deg == 0.0:
        return Vol3(v.grid, v.data.copy())
    sx, sy, sz = v.grid.spacing
    theta = math.radians(rot_deg)
    cth, sth = math.cos(theta), math.sin(theta)
    rot = np.array([[cth, -sth, 0.0], [sth, cth, 0.0], [0.0, 0.0, 1.0]])
    scale = np.diag([sx, sy, sz])
    inv_scale = np.diag([1.0 / sx, 1.0 / sy, 1.0 / sz])
    center = (np.array(v.grid.shape, dtype=np.float64) - 1.0) / 2.0 * np.array(
        [sx, sy, sz]
    )
    t = np.array([tx_mm, ty_mm, 0.0])
    # out(o) = in(S^-1 [R^T (S o - t - c) + c]); R^T is the inverse rotation
    mat = inv_scale @ rot.T @ scale
    offset = inv_scale @ (center - rot.T @ (t + center))
    out = ndimage.affine_transform(
        v.data.astype(np.float64), mat, offset=offset, order=1,
        mode="constant", cval=fill,
    )
    return Vol3(v.grid, out)


def _gauss_kernel(sigma_vox: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma_vox))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_smooth(v: Vol3, sigma_mm: float) -> Vol3:
    """Separable Gaussian smoothing with per-axis sigma ``sigma_mm/spacing``.

    Kernels are truncated at 3 sigma and unit-normalized; boundaries use
    kernel renormalization (divide by the smoothed support), so constant
    fields are preserved exactly.
    """
    if sigma_mm < 0:
        raise ValueError("sigma_mm must be >= 0")
    if sigma_mm == 0:
        return v
    out = v.data.astype(np.float64)
    support = np.ones(v.grid.shape, dtype=np.float64)
    for axis in range(3):
        sigma_vox = sigma_mm / v.grid.spacing[axis]
        if sigma_vox <= 0:
            continue
        kern = _gauss_kernel(sigma_vox)
        if kern.size == 1:
            continue
        out = ndimage.convolve1d(out, kern, axis=axis, mode="constant", cval=0.0)
        support = ndimage.convolve1d(support, kern, axis=axis, mode="constant", cval=0.0)
    return Vol3(v.grid, out / support)


def downsample_mean(v: Vol3, factors: tuple[int, int, int]) -> Vol3:
    """Block-mean downsampling; trailing partial blocks average what exists."""
    factors = tuple(int(f) for f in factors)
    if any(f < 1 for f in factors):
        raise ValueError("factors must be integers >= 1")
    if factors == (1, 1, 1):
        return v
    out = v.data.astype(np.float64)
    counts = np.ones(v.grid.shape, dtype=np.float64)
    for axis, f in enumerate(factors):
        if f == 1:
            continue
        edges = np.arange(0, out.shape[axis], f)
        out = np.add.reduceat(out, edges, axis=axis)
        counts = np.add.reduceat(counts, edges, axis=axis)
    out = out / counts
    new_shape = tuple(out.shape)
    new_spacing = tuple(v.grid.spacing[a] * factors[a] for a in range(3))
    return Vol3(Grid3(new_shape, new_spacing, v.grid.tilt_deg), out)
