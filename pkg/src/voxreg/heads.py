"""Read-out heads over fitted volumes: occupancy grids, point labeling,
pillar feature construction, and the IoU metric.

"Free" space is an explicit semantic class channel, not a density threshold,
so prediction is always an argmax over class channels (ties resolve to the
lowest class index, matching numpy's argmax).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import tanh_gate
from .grid import Extent3, VoxelGrid, grid_sample

_CHUNK = 1 << 17


@dataclass
class OccupancyGrid:
    """Integer class labels on a voxel lattice."""

    dims: tuple  # (nx, ny, nz)
    extent: Extent3
    classes: np.ndarray  # (nz, ny, nx) integer

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        nx, ny, nz = self.dims
        self.classes = np.asarray(self.classes)
        if self.classes.shape != (nz, ny, nx):
            raise ValueError("classes must be shaped (nz, ny, nx)")
        if not np.issubdtype(self.classes.dtype, np.integer):
            raise ValueError("classes must be integers")


def predict_occupancy(semantic: VoxelGrid, dims, extent: Extent3) -> OccupancyGrid:
    """Argmax semantic class at every target voxel center.

    Target centers are sampled from the semantic volume trilinearly; centers
    beyond the source extent sample the zero vector and therefore fall to
    class 0 by the lowest-index tie rule.
    """
    target = VoxelGrid.zeros(dims, 1, extent)
    pts = target.center_points()
    nx, ny, nz = target.dims
    labels = np.empty(pts.shape[0], dtype=np.int32)
    for lo in range(0, pts.shape[0], _CHUNK):
        chunk = pts[lo : lo + _CHUNK]
        labels[lo : lo + chunk.shape[0]] = np.argmax(
            grid_sample(semantic, chunk), axis=1
        )
    return OccupancyGrid(dims=target.dims, extent=extent, classes=labels.reshape(nz, ny, nx))


def segment_points(semantic: VoxelGrid, points, free_class: int = 0) -> np.ndarray:
    """Class labels for query points (for example lidar returns).

    Points inside the extent take the argmax of the trilinearly sampled
    class vector; points outside the extent are labeled ``free_class``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    labels = np.full(pts.shape[0], free_class, dtype=np.int32)
    inside = semantic.extent.contains(pts)
    if inside.any():
        vals = grid_sample(semantic, pts[inside])
        labels[inside] = np.argmax(vals, axis=1)
    return labels


def bev_features(dense: VoxelGrid, density: VoxelGrid, proj: np.ndarray) -> np.ndarray:
    """Collapse a gated feature volume into top-down feature maps.

    The feature volume is gated per voxel by tanh(density), the nz slices of
    each channel are stacked into a C * nz vector per (x, y) column (channel
    major), and ``proj`` of shape (C * nz, C_out) mixes them.  Returns
    (C_out, ny, nx).
    """
    if density.channels != 1:
        raise ValueError("density grid must have one channel")
    if not dense.same_geometry(density):
        raise ValueError("feature and density grids must share geometry")
    c = dense.channels
    nx, ny, nz = dense.dims
    proj = np.asarray(proj, dtype=np.float64)
    if proj.shape[0] != c * nz:
        raise ValueError(f"projection must have {c * nz} input rows")
    gated = tanh_gate(dense.data, density.data)
    stacked = gated.reshape(c * nz, ny, nx)
    return np.einsum("so,syx->oyx", proj, stacked)


def miou(
    pred: OccupancyGrid,
    gt: OccupancyGrid,
    num_classes: int,
    mask: np.ndarray | None = None,
):
    """Mean intersection-over-union between two label grids.

    Classes absent from both prediction and ground truth are excluded from
    the mean.  ``mask`` optionally restricts scoring to a voxel subset.
    Returns ``(per_class, mean, counts)`` where per_class holds NaN for
    excluded classes and counts maps class -> dict of raw tallies.
    """
    if pred.classes.shape != gt.classes.shape:
        raise ValueError("prediction and ground truth shapes differ")
    p = pred.classes.ravel()
    g = gt.classes.ravel()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
        p, g = p[mask], g[mask]
    per_class = np.full(num_classes, np.nan)
    counts = {}
    for c in range(num_classes):
        pc = p == c
        gc = g == c
        inter = int(np.count_nonzero(pc & gc))
        union = int(np.count_nonzero(pc | gc))
        counts[c] = {
            "pred": int(np.count_nonzero(pc)),
            "gt": int(np.count_nonzero(gc)),
            "intersection": inter,
            "union": union,
        }
        if union > 0:
            per_class[c] = inter / union
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean, counts
