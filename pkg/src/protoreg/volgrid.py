"""Core 3D grid types: volumes, displacement fields, pyramids.

Conventions used throughout the package:
  * Volume data is float32, indexed [x, y, z] with shape (nx, ny, nz).
  * Displacement fields store (ux, uy, uz) in shape (3, nx, ny, nz);
    displacements are in voxel units of the field's own grid.
  * Sampling outside the grid returns 0 (inputs are zero-padded anyway).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

Triple = tuple[float, float, float]


def _as_triple(v) -> tuple:
    t = tuple(v)
    if len(t) != 3:
        raise ValidationError(f"expected 3 components, got {len(t)}")
    return t


@dataclass(frozen=True)
class Volume:
    """Scalar 3D grid with physical spacing (mm)."""

    data: np.ndarray                      # (nx, ny, nz) float32
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"volume data must be 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains non-finite values")
        sp = _as_triple(self.spacing)
        if any(s <= 0 for s in sp):
            raise ValidationError(f"spacing must be strictly positive, got {sp}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in sp))
        object.__setattr__(self, "origin", tuple(float(o) for o in _as_triple(self.origin)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        return replace(self, data=np.asarray(data, dtype=np.float32))


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors, voxel units of the owning grid."""

    data: np.ndarray                      # (3, nx, ny, nz) float32
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValidationError(f"field data must have shape (3, nx, ny, nz), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("field contains non-finite values")
        sp = _as_triple(self.spacing)
        if any(s <= 0 for s in sp):
            raise ValidationError(f"spacing must be strictly positive, got {sp}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in sp))
        object.__setattr__(self, "origin", tuple(float(o) for o in _as_triple(self.origin)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def with_data(self, data: np.ndarray) -> "DisplacementField":
        return replace(self, data=np.asarray(data, dtype=np.float32))


def zero_field(like: Volume | DisplacementField) -> DisplacementField:
    return DisplacementField(
        np.zeros((3,) + tuple(like.dims), dtype=np.float32),
        spacing=like.spacing,
        origin=like.origin,
    )


@dataclass(frozen=True)
class Pyramid:
    """Multi-resolution stack; levels[0] is full resolution."""

    levels: tuple
    requested_levels: int = field(default=0)

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValidationError("pyramid needs at least one level")
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.requested_levels == 0:
            object.__setattr__(self, "requested_levels", len(self.levels))

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


# ---------------------------------------------------------------------------
# sampling / warping

def _gather(arr: np.ndarray, ix, iy, iz):
    """Fetch arr[ix, iy, iz] with zero outside the grid."""
    nx, ny, nz = arr.shape
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    out = np.zeros(ix.shape, dtype=np.float64)
    if np.any(inside):
        out[inside] = arr[ix[inside], iy[inside], iz[inside]]
    return out


def _trilinear_arrays(arr: np.ndarray, x, y, z, want_grad: bool = False):
    """Vectorized trilinear interpolation with zero border.

    Returns value, or (value, dv/dx, dv/dy, dv/dz) when want_grad is set;
    derivatives are with respect to the continuous voxel coordinate.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    z0 = np.floor(z).astype(np.int64)
    fx, fy, fz = x - x0, y - y0, z - z0

    val = np.zeros(x.shape, dtype=np.float64)
    if want_grad:
        gx = np.zeros_like(val)
        gy = np.zeros_like(val)
        gz = np.zeros_like(val)
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        sx = 1.0 if dx else -1.0
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            sy = 1.0 if dy else -1.0
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                sz = 1.0 if dz else -1.0
                c = _gather(arr, x0 + dx, y0 + dy, z0 + dz)
                val += wx * wy * wz * c
                if want_grad:
                    gx += sx * wy * wz * c
                    gy += wx * sy * wz * c
                    gz += wx * wy * sz * c
    if want_grad:
        return val, gx, gy, gz
    return val


def trilinear_sample(vol: Volume, p) -> float:
    """Interpolate vol at a continuous voxel coordinate; zero outside."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValidationError(f"bad sample coordinate {p!r}")
    return float(_trilinear_arrays(vol.data, p[0:1], p[1:2], p[2:3])[0])


def _identity_coords(dims):
    nx, ny, nz = dims
    return np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )


def warp(moving: Volume, fld: DisplacementField) -> Volume:
    """Resample moving at x + u(x); implements the warped-image operator."""
    if moving.dims != fld.dims:
        raise ValidationError(f"warp dims mismatch: {moving.dims} vs {fld.dims}")
    if np.all(fld.data == 0):
        return moving  # bit-exact identity
    xx, yy, zz = _identity_coords(moving.dims)
    u = fld.data.astype(np.float64)
    out = _trilinear_arrays(moving.data, xx + u[0], yy + u[1], zz + u[2])
    return Volume(out.astype(np.float32), spacing=moving.spacing, origin=moving.origin)


# ---------------------------------------------------------------------------
# pyramid construction

def _pool_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """Factor-2 average pooling along one axis; trailing odd slab averaged
    over its actual membership."""
    n = arr.shape[axis]
    starts = np.arange(0, n, 2)
    sums = np.add.reduceat(arr, starts, axis=axis)
    counts = np.minimum(starts + 2, n) - starts
    shape = [1] * arr.ndim
    shape[axis] = len(starts)
    return sums / counts.reshape(shape)


def downsample_avg(vol: Volume) -> Volume:
    """Factor-2 average pooling per axis; spacing doubles."""
    arr = vol.data.astype(np.float64)
    for ax in range(3):
        arr = _pool_axis(arr, ax)
    return Volume(arr.astype(np.float32),
                  spacing=tuple(2 * s for s in vol.spacing),
                  origin=vol.origin)


def build_pyramid(vol: Volume, levels: int) -> Pyramid:
    """Repeated average pooling; level count is clipped so every axis keeps
    at least 2 voxels at the coarsest level."""
    if levels < 1:
        raise ValidationError(f"level count must be >= 1, got {levels}")
    requested = levels
    max_levels = 1 + int(math.floor(math.log2(max(min(vol.dims), 1))))
    if levels > max_levels:
        logger.warning("pyramid reduced from %d to %d levels for dims %s",
                       levels, max_levels, vol.dims)
        levels = max_levels
    out = [vol]
    for _ in range(levels - 1):
        out.append(downsample_avg(out[-1]))
    return Pyramid(tuple(out), requested_levels=requested)


# ---------------------------------------------------------------------------
# field algebra

def upsample_field(fld: DisplacementField, target_dims) -> DisplacementField:
    """Trilinear upsampling by 2 per axis with displacement magnitudes
    doubled (voxel units change with the grid).

    Corner-aligned: fine coordinate i maps to coarse coordinate i/2,
    clamped at the far edge.
    """
    target_dims = tuple(int(d) for d in target_dims)
    src = fld.dims
    for a in range(3):
        if math.ceil(target_dims[a] / 2) != src[a]:
            raise ValidationError(
                f"target dims {target_dims} not a factor-2 refinement of {src}")
    xx, yy, zz = _identity_coords(target_dims)
    cx = np.minimum(xx / 2.0, src[0] - 1)
    cy = np.minimum(yy / 2.0, src[1] - 1)
    cz = np.minimum(zz / 2.0, src[2] - 1)
    out = np.empty((3,) + target_dims, dtype=np.float32)
    for c in range(3):
        out[c] = (2.0 * _trilinear_arrays(fld.data[c], cx, cy, cz)).astype(np.float32)
    return DisplacementField(out,
                             spacing=tuple(s / 2 for s in fld.spacing),
                             origin=fld.origin)


def compose_additive(up: DisplacementField, residual: DisplacementField) -> DisplacementField:
    """Voxel-wise sum of the upsampled coarse field and the fine residual."""
    if up.dims != residual.dims:
        raise ValidationError(f"compose dims mismatch: {up.dims} vs {residual.dims}")
    return up.with_data(up.data + residual.data)


def jacobian_det(fld: DisplacementField) -> Volume:
    """det(I + grad u) per voxel; central differences in the interior,
    one-sided at the faces (voxel units)."""
    if min(fld.dims) < 2:
        raise ValidationError("jacobian needs at least 2 voxels per axis")
    u = fld.data.astype(np.float64)
    # J[i][j] = d u_i / d x_j
    J = [[np.gradient(u[i], axis=j) for j in range(3)] for i in range(3)]
    for i in range(3):
        J[i][i] = J[i][i] + 1.0
    det = (J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
           - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
           + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]))
    return Volume(det.astype(np.float32), spacing=fld.spacing, origin=fld.origin)


def pad_to_shape(vol: Volume, target_dims) -> Volume:
    """Zero-pad at the high-index side up to target dims."""
    target_dims = tuple(int(d) for d in target_dims)
    if any(t < c for t, c in zip(target_dims, vol.dims)):
        raise ValidationError(f"target {target_dims} smaller than {vol.dims}")
    if target_dims == vol.dims:
        return vol
    pad = [(0, t - c) for t, c in zip(target_dims, vol.dims)]
    return Volume(np.pad(vol.data, pad), spacing=vol.spacing, origin=vol.origin)
