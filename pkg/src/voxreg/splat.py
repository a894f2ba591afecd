"""Lift-splat of per-pixel features into a voxel grid, and helpers that
prepare splatted volumes for downstream heads.

A feature image carries C feature channels plus a discrete depth
distribution over the depth bins for every pixel.  Splatting back-projects
every (pixel, bin) pair to its world position and scatters
``feature * probability`` into the eight surrounding voxels with the same
trilinear weights that sampling uses, making the operation the exact
transpose of trilinear grid sampling.  Probability mass that lands outside
the grid is dropped, mirroring the zero-padding border of sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel, DepthBins, back_project, sample_depths
from .grid import (
    Extent3,
    VoxelGrid,
    corner_weights,
    scatter_corners,
    world_to_continuous_index,
)

_DIST_TOL = 1e-6


@dataclass
class FeatureImage:
    """Per-pixel features plus a per-pixel depth-bin distribution.

    ``features`` is (C, H, W), ``distribution`` (n_bins, H, W) with
    nonnegative entries summing to 1 per pixel within 1e-6.
    """

    features: np.ndarray
    distribution: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.distribution = np.asarray(self.distribution, dtype=np.float64)
        if self.features.ndim != 3 or self.distribution.ndim != 3:
            raise ValueError("features and distribution must be 3-d arrays")
        if self.features.shape[1:] != self.distribution.shape[1:]:
            raise ValueError("features and distribution must share H x W")
        if not np.isfinite(self.features).all() or not np.isfinite(self.distribution).all():
            raise ValueError("feature image must be finite")
        if (self.distribution < 0).any():
            raise ValueError("depth distribution must be nonnegative")
        sums = self.distribution.sum(axis=0)
        if np.abs(sums - 1.0).max() > _DIST_TOL:
            raise ValueError("depth distribution must sum to 1 per pixel")

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    @property
    def num_bins(self) -> int:
        return self.distribution.shape[0]

    @property
    def shape(self) -> tuple:
        return self.features.shape[1:]


def image_pixel_centers(img_size: int, cam_size: int) -> np.ndarray:
    """Camera pixel coordinates of feature-map cells.

    A feature map partitions the camera image uniformly; cell i maps to the
    camera coordinate of its center.  When the sizes match these are the
    integer pixel centers.
    """
    scale = cam_size / img_size
    return (np.arange(img_size) + 0.5) * scale - 0.5


def splat(
    img: FeatureImage,
    cam: CameraModel,
    bins: DepthBins,
    dims,
    extent: Extent3,
    out: VoxelGrid | None = None,
) -> VoxelGrid:
    """Scatter one camera's features into a voxel grid.

    Every (pixel, bin) pair contributes ``feature * probability`` at the
    world point of that pixel at the bin-center depth.  Accumulates into
    ``out`` when given (which must match dims/extent), otherwise into a new
    zero grid.
    """
    if img.num_bins != bins.count:
        raise ValueError("distribution bin count must match the depth bins")
    if out is None:
        out = VoxelGrid.zeros(dims, img.channels, extent)
    else:
        if out.dims != tuple(int(n) for n in dims) or out.extent != extent:
            raise ValueError("output grid geometry mismatch")
        if out.channels != img.channels:
            raise ValueError("output grid channel mismatch")

    h, w = img.shape
    us = image_pixel_centers(w, cam.width)
    vs = image_pixel_centers(h, cam.height)
    uu, vv = np.meshgrid(us, vs)
    z = sample_depths(bins)
    pts = back_project(cam, uu.ravel()[:, None], vv.ravel()[:, None], z[None, :])
    n_pix = h * w

    # upstream (N, C) = feature broadcast over bins, weighted by probability
    feat = img.features.reshape(img.channels, n_pix).T  # (n_pix, C)
    prob = img.distribution.reshape(bins.count, n_pix).T  # (n_pix, n_bins)
    upstream = feat[:, None, :] * prob[:, :, None]  # (n_pix, n_bins, C)

    tmp = VoxelGrid.zeros(dims, img.channels, extent)
    ci = world_to_continuous_index(tmp, pts.reshape(-1, 3))
    idx, wts, _ = corner_weights(tmp.dims, ci)
    scatter_corners(
        out.data.reshape(out.channels, -1),
        idx,
        wts,
        upstream.reshape(-1, img.channels),
    )
    return out


def coord_volume(dims, extent: Extent3) -> VoxelGrid:
    """Three-channel grid of voxel-center coordinates mapped to [-1, 1].

    Channel j holds the j-th coordinate of each voxel center under the
    affine map taking extent min to -1 and extent max to +1.
    """
    grid = VoxelGrid.zeros(dims, 3, extent)
    nx, ny, nz = grid.dims
    for axis, n in ((0, nx), (1, ny), (2, nz)):
        c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
        shape = [1, 1, 1]
        shape[2 - axis] = n  # data axes are (z, y, x)
        grid.data[axis] = c.reshape(shape)
    return grid


_NEIGHBOR_AXES = [(1, 1), (1, -1), (2, 1), (2, -1), (3, 1), (3, -1)]


def _shifted(arr: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Shift along one data axis, zero-filling the vacated border."""
    out = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if step == 1:
        src[axis] = slice(1, None)
        dst[axis] = slice(None, -1)
    else:
        src[axis] = slice(None, -1)
        dst[axis] = slice(1, None)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def densify_baseline(
    grid: VoxelGrid, iterations: int, mask: np.ndarray | None = None
) -> tuple[VoxelGrid, np.ndarray]:
    """Diffusion-style fill of empty voxels from their 6-neighborhoods.

    One iteration assigns every empty voxel with at least one occupied
    6-neighbor the mean of those occupied neighbors' values (per channel,
    synchronous update) and marks it occupied.  Voxels occupied before an
    iteration are never modified by it.  ``mask`` overrides the default
    occupancy mask (any channel nonzero).  Returns the filled grid and the
    final mask; zero iterations returns an identical copy.
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    data = grid.data.copy()
    if mask is None:
        mask = (data != 0).any(axis=0)
    else:
        mask = np.asarray(mask, dtype=bool).copy()
        if mask.shape != data.shape[1:]:
            raise ValueError("mask shape must match the grid's spatial shape")

    for _ in range(iterations):
        masked_vals = data * mask[None]
        mask_f = mask.astype(np.float64)
        nbr_sum = np.zeros_like(data)
        nbr_cnt = np.zeros(mask.shape, dtype=np.float64)
        for axis, step in _NEIGHBOR_AXES:
            nbr_sum += _shifted(masked_vals, axis, step)
            nbr_cnt += _shifted(mask_f, axis - 1, step)  # mask lacks the channel axis
        fill = (~mask) & (nbr_cnt > 0)
        if not fill.any():
            break
        safe = np.where(nbr_cnt > 0, nbr_cnt, 1.0)
        data[:, fill] = (nbr_sum / safe[None])[:, fill]
        mask = mask | fill

    out = VoxelGrid(dims=grid.dims, channels=grid.channels, extent=grid.extent, data=data)
    return out, mask
