"""Dense voxel grids over a world-aligned box, with trilinear sampling.

Conventions used throughout the package:

* A grid covers an axis-aligned world box ``extent`` with ``dims = (nx, ny, nz)``
  voxels per axis.  Voxel centers sit at ``min + (i + 0.5) * voxel_size``, so
  the continuous index of a world point is ``(p - min) / voxel_size - 0.5``:
  index 0.0 is the center of the first voxel and ``n - 1`` the center of the
  last one along each axis.
* Storage is float64, channel-major, then z, y, x row-major:
  ``data[c, iz, iy, ix]``.
* Sampling outside the voxel-center range falls off linearly into a zero
  border (zero padding).  One full voxel outside the extent the sampled value
  is exactly the zero vector, and the falloff is continuous on the way there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Extent3:
    """Axis-aligned world box in meters, ``min < max`` per axis."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.min.shape != (3,) or self.max.shape != (3,):
            raise ValueError("extent bounds must be 3-vectors")
        if not (np.isfinite(self.min).all() and np.isfinite(self.max).all()):
            raise ValueError("extent bounds must be finite")
        if not (self.max > self.min).all():
            raise ValueError("extent max must exceed extent min on every axis")

    def size(self) -> np.ndarray:
        return self.max - self.min

    def voxel_size(self, dims) -> np.ndarray:
        return self.size() / np.asarray(dims, dtype=np.float64)

    def contains(self, pts) -> np.ndarray:
        """Inclusive box test, vectorized over the last axis."""
        pts = np.asarray(pts, dtype=np.float64)
        return ((pts >= self.min) & (pts <= self.max)).all(axis=-1)

    def __eq__(self, other):
        return (
            isinstance(other, Extent3)
            and np.array_equal(self.min, other.min)
            and np.array_equal(self.max, other.max)
        )


@dataclass
class VoxelGrid:
    """A ``channels x nz x ny x nx`` float64 tensor bound to a world extent."""

    dims: tuple  # (nx, ny, nz)
    channels: int
    extent: Extent3
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 3 or any(n < 1 for n in self.dims):
            raise ValueError("dims must be three positive integers")
        nx, ny, nz = self.dims
        expected = (self.channels, nz, ny, nx)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != expected:
            raise ValueError(
                f"data shape {self.data.shape} does not match (C, nz, ny, nx) = {expected}"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("grid values must all be finite")

    @classmethod
    def zeros(cls, dims, channels, extent) -> "VoxelGrid":
        nx, ny, nz = (int(n) for n in dims)
        data = np.zeros((channels, nz, ny, nx), dtype=np.float64)
        return cls(dims=(nx, ny, nz), channels=channels, extent=extent, data=data)

    @property
    def voxel_size(self) -> np.ndarray:
        return self.extent.voxel_size(self.dims)

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def axis_centers(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centers along one axis (0=x, 1=y, 2=z)."""
        n = self.dims[axis]
        vs = self.voxel_size[axis]
        return self.extent.min[axis] + (np.arange(n) + 0.5) * vs

    def center_points(self) -> np.ndarray:
        """All voxel centers as an (nz*ny*nx, 3) array in z, y, x raster order."""
        cx = self.axis_centers(0)
        cy = self.axis_centers(1)
        cz = self.axis_centers(2)
        zz, yy, xx = np.meshgrid(cz, cy, cx, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1)

    def same_geometry(self, other: "VoxelGrid") -> bool:
        return self.dims == other.dims and self.extent == other.extent


@dataclass
class GridGradient:
    """Accumulator for d(loss)/d(voxel values), same layout as its grid."""

    data: np.ndarray

    @classmethod
    def zeros_like(cls, grid: VoxelGrid) -> "GridGradient":
        return cls(data=np.zeros_like(grid.data))

    def merge(self, other: "GridGradient") -> None:
        """Merge a privately accumulated buffer by summation."""
        self.data += other.data


def _as_points(pts):
    """Normalize point input to (N, 3) float64 plus a flag for single-point input."""
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (3,) or (N, 3)")
    if not np.isfinite(pts).all():
        raise ValueError("points must be finite")
    return pts, single


def world_to_continuous_index(grid: VoxelGrid, pts):
    """Map world points to continuous voxel indices (x, y, z order)."""
    pts, single = _as_points(pts)
    ci = (pts - grid.extent.min) / grid.voxel_size - 0.5
    return ci[0] if single else ci


def continuous_index_to_world(grid: VoxelGrid, ci):
    """Inverse of :func:`world_to_continuous_index`."""
    ci, single = _as_points(ci)
    pts = grid.extent.min + (ci + 0.5) * grid.voxel_size
    return pts[0] if single else pts


# Corner enumeration order: bit 0 -> +x, bit 1 -> +y, bit 2 -> +z.
_CORNER_OFFSETS = [(k & 1, (k >> 1) & 1, (k >> 2) & 1) for k in range(8)]


def corner_weights(dims, ci):
    """Trilinear corner indices and weights for continuous indices.

    Returns ``(idx, w, inside)`` where ``idx`` is (8, N) flattened voxel
    indices (clamped into range so they are always addressable), ``w`` is
    (8, N) weights with out-of-range corners zeroed, and ``inside`` is the
    (8, N) bool in-range mask.  In-range weights of a query sum to at most 1,
    and to exactly 1 when all eight corners are in range.
    """
    nx, ny, nz = dims
    ci = np.atleast_2d(np.asarray(ci, dtype=np.float64))
    n = ci.shape[0]
    i0 = np.floor(ci).astype(np.int64)
    f = ci - i0

    idx = np.empty((8, n), dtype=np.int64)
    w = np.empty((8, n), dtype=np.float64)
    inside = np.empty((8, n), dtype=bool)
    wx1, wy1, wz1 = f[:, 0], f[:, 1], f[:, 2]
    wx0, wy0, wz0 = 1.0 - wx1, 1.0 - wy1, 1.0 - wz1
    for k, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
        ix = i0[:, 0] + dx
        iy = i0[:, 1] + dy
        iz = i0[:, 2] + dz
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        wk = (wx1 if dx else wx0) * (wy1 if dy else wy0) * (wz1 if dz else wz0)
        idx[k] = (
            np.clip(iz, 0, nz - 1) * ny + np.clip(iy, 0, ny - 1)
        ) * nx + np.clip(ix, 0, nx - 1)
        w[k] = np.where(ok, wk, 0.0)
        inside[k] = ok
    return idx, w, inside


def gather_corners(data: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted corner gather: ``data`` is (C, nvox) flat, returns (N, C)."""
    vals = data[:, idx]  # (C, 8, N)
    return np.einsum("ckn,kn->nc", vals, w)


def scatter_corners(grad_flat: np.ndarray, idx: np.ndarray, w: np.ndarray,
                    upstream: np.ndarray) -> None:
    """Transpose of :func:`gather_corners`; accumulates into ``grad_flat`` (C, nvox)."""
    nvox = grad_flat.shape[1]
    flat_idx = idx.ravel()
    for c in range(grad_flat.shape[0]):
        contrib = (w * upstream[:, c]).ravel()
        grad_flat[c] += np.bincount(flat_idx, weights=contrib, minlength=nvox)


def grid_sample(grid: VoxelGrid, pts):
    """Trilinearly sample the grid at world points.

    Returns (C,) for a single point or (N, C) for a batch.  Queries whose
    corners fall outside the voxel-center range receive zero contributions
    from those corners (zero padding).
    """
    ci = world_to_continuous_index(grid, pts)
    single = ci.ndim == 1
    idx, w, _ = corner_weights(grid.dims, ci)
    out = gather_corners(grid.data.reshape(grid.channels, -1), idx, w)
    return out[0] if single else out


def grid_sample_adjoint(grid: VoxelGrid, pts, upstream, grad: GridGradient) -> None:
    """Accumulate d(loss)/d(voxels) for upstream gradients at sample points.

    ``upstream`` is (C,) or (N, C), matching the shape grid_sample returns for
    ``pts``.  Each sample scatters ``upstream * weight`` into its (at most 8)
    in-range corners.
    """
    ci = world_to_continuous_index(grid, pts)
    single = ci.ndim == 1
    upstream = np.asarray(upstream, dtype=np.float64)
    if single:
        upstream = upstream[None, :]
    if upstream.shape != (np.atleast_2d(ci).shape[0], grid.channels):
        raise ValueError("upstream shape must match (N, channels)")
    idx, w, _ = corner_weights(grid.dims, ci)
    scatter_corners(grad.data.reshape(grid.channels, -1), idx, w, upstream)


def sample_point_gradient(grid: VoxelGrid, pts):
    """Analytic Jacobian of grid_sample with respect to the query point.

    Returns (C, 3) for a single point or (N, C, 3) for a batch.  The trilinear
    interpolant is multilinear inside each cell, so this Jacobian is exact
    between cell faces and a one-sided value on them.
    """
    ci = world_to_continuous_index(grid, pts)
    single = ci.ndim == 1
    ci2 = np.atleast_2d(ci)
    n = ci2.shape[0]
    idx, _, inside = corner_weights(grid.dims, ci2)
    flat = grid.data.reshape(grid.channels, -1)
    vals = flat[:, idx] * inside[None, :, :]  # zero padded corner values

    i0 = np.floor(ci2).astype(np.int64)
    f = ci2 - i0
    wx1, wy1, wz1 = f[:, 0], f[:, 1], f[:, 2]
    wx0, wy0, wz0 = 1.0 - wx1, 1.0 - wy1, 1.0 - wz1

    dw = np.empty((8, n, 3), dtype=np.float64)
    for k, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
        wx = wx1 if dx else wx0
        wy = wy1 if dy else wy0
        wz = wz1 if dz else wz0
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        sz = 1.0 if dz else -1.0
        dw[k, :, 0] = sx * wy * wz
        dw[k, :, 1] = wx * sy * wz
        dw[k, :, 2] = wx * wy * sz
    jac = np.einsum("ckn,kna->nca", vals, dw) / grid.voxel_size[None, None, :]
    return jac[0] if single else jac
