"""Minimal NIfTI-1 single-file (.nii) reader/writer.

Scope: little-endian single-file volumes with float32 payload, 3D or 4D
(time 4th, uniform step in pixdim[4], origin in toffset). Gantry tilt is
carried in the sform as a y/z shear, so geometry round-trips through the
standard header. Data round-trips bit-exactly; spacings are float32.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .volume import Ctp4d, Grid3, Vol3

_HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert _HEADER_DTYPE.itemsize == 348

_DT_FLOAT32 = 16
_VOX_OFFSET = 352
_UNITS_MM_SEC = 2 | 8


class NiftiError(ValueError):
    """Raised for unsupported or corrupt .nii files."""


def _build_header(grid: Grid3, n_frames: int, dt_s: float, t0_s: float) -> np.ndarray:
    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    ndim = 4 if n_frames > 1 else 3
    dim = np.ones(8, dtype=np.int16)
    dim[0] = ndim
    dim[1:4] = grid.shape
    if ndim == 4:
        dim[4] = n_frames
    hdr["dim"] = dim
    hdr["datatype"] = _DT_FLOAT32
    hdr["bitpix"] = 32
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = grid.spacing
    pixdim[4] = dt_s
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = _VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = _UNITS_MM_SEC
    hdr["toffset"] = t0_s
    hdr["descrip"] = b"ctpredict"
    hdr["sform_code"] = 1
    sx, sy, sz = grid.spacing
    shear_mm = sz * math.tan(math.radians(grid.tilt_deg))
    hdr["srow_x"] = (sx, 0.0, 0.0, 0.0)
    hdr["srow_y"] = (0.0, sy, shear_mm, 0.0)
    hdr["srow_z"] = (0.0, 0.0, sz, 0.0)
    hdr["magic"] = b"n+1"
    return hdr


def write_nifti(v: Vol3 | Ctp4d, path: str | Path) -> None:
    """Write a 3D or 4D volume as little-endian float32 single-file NIfTI-1.

    4D volumes must have uniform time steps; per-slice shuttle offsets do
    not fit the format and belong in sidecar metadata.
    """
    if isinstance(v, Ctp4d):
        steps = np.diff(v.times_s)
        dt = float(steps[0])
        if not np.allclose(steps, dt, rtol=1e-6, atol=1e-9):
            raise NiftiError("cannot write non-uniform time stamps to .nii")
        hdr = _build_header(v.grid, v.n_frames, dt, float(v.times_s[0]))
        payload = v.data
    else:
        hdr = _build_header(v.grid, 1, 0.0, 0.0)
        payload = v.data
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00\x00\x00\x00")
        fh.write(np.asfortranarray(payload, dtype=np.float32).tobytes(order="F"))


def read_nifti(path: str | Path) -> Vol3 | Ctp4d:
    """Read a single-file NIfTI-1 volume written by this package (or alike)."""
    raw = Path(path).read_bytes()
    if len(raw) < 352:
        raise NiftiError(f"{path}: file too short for a NIfTI-1 header")
    hdr = np.frombuffer(raw[:348], dtype=_HEADER_DTYPE)[0]
    if hdr["magic"] not in (b"n+1", b"ni1") or hdr["sizeof_hdr"] != 348:
        raise NiftiError(f"{path}: bad magic/size, not a NIfTI-1 file")
    if hdr["datatype"] != _DT_FLOAT32:
        raise NiftiError(f"{path}: unsupported datatype {hdr['datatype']} (float32 only)")
    ndim = int(hdr["dim"][0])
    if ndim not in (3, 4):
        raise NiftiError(f"{path}: unsupported dimensionality {ndim}")
    shape = tuple(int(n) for n in hdr["dim"][1 : 1 + 3])
    n_frames = int(hdr["dim"][4]) if ndim == 4 else 1
    spacing = tuple(float(s) for s in hdr["pixdim"][1:4])
    sz = spacing[2]
    shear_mm = float(hdr["srow_y"][2]) if hdr["sform_code"] > 0 else 0.0
    tilt_deg = math.degrees(math.atan2(shear_mm, sz)) if sz > 0 else 0.0
    grid = Grid3(shape, spacing, tilt_deg)

    offset = int(hdr["vox_offset"])
    n_expected = grid.n_voxels * n_frames
    payload = np.frombuffer(raw, dtype="<f4", offset=offset)
    if payload.size != n_expected:
        raise NiftiError(
            f"{path}: header promises {n_expected} voxels, payload has {payload.size}"
        )
    full_shape = shape + (n_frames,) if ndim == 4 else shape
    data = payload.reshape(full_shape, order="F")
    if ndim == 3:
        return Vol3(grid, data)
    dt = float(hdr["pixdim"][4])
    if dt <= 0:
        raise NiftiError(f"{path}: 4D file without a positive time step")
    times = float(hdr["toffset"]) + dt * np.arange(n_frames)
    return Ctp4d(grid, times, data)
