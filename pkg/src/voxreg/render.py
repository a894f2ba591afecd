"""Emission-absorption compositing along rays and full view renders.

For one ray with sorted sample depths ``t_i``, densities ``sigma_i >= 0`` and
per-sample semantic vectors ``s_i``:

    delta_i = t_{i+1} - t_i          (last delta = mean of the preceding ones)
    a_i     = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j < i} (1 - a_j)             (T_1 = 1 exactly)
    w_i     = T_i * a_i
    D       = sum_i w_i * v_i        (v_i defaults to t_i)
    S       = sum_i w_i * s_i
    W       = sum_i w_i = 1 - prod_i (1 - a_i)

There is no weight normalization and no background term; W < 1 simply means
part of the ray escaped.  Camera renders use camera-frame z for both t and v;
top-down renders keep t as distance fallen from the extent top but accumulate
v = height, so D is the expected surface height.

The adjoint routine returns exact reverse-mode gradients of (D, S, W) with
respect to the per-sample densities and semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import (
    CameraModel,
    DepthBins,
    back_project,
    bev_rays,
    sample_depths,
    strided_pixel_centers,
)
from .grid import VoxelGrid, grid_sample


@dataclass
class RaySampleBatch:
    """Per-ray sorted samples for a batch of rays.

    ``t`` and ``density`` are (R, n); ``semantics`` is (R, n, K); ``points``
    optionally carries the (R, n, 3) world positions the samples came from;
    ``values`` optionally overrides the scalar accumulated into D (defaults
    to ``t`` when absent).
    """

    t: np.ndarray
    density: np.ndarray
    semantics: np.ndarray
    points: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.atleast_2d(np.asarray(self.t, dtype=np.float64))
        self.density = np.atleast_2d(np.asarray(self.density, dtype=np.float64))
        self.semantics = np.asarray(self.semantics, dtype=np.float64)
        if self.semantics.ndim == 2:
            self.semantics = self.semantics[None, :, :]
        r, n = self.t.shape
        if self.density.shape != (r, n):
            raise ValueError("density shape must match t")
        if self.semantics.shape[:2] != (r, n):
            raise ValueError("semantics shape must match t on the ray axes")
        if n >= 2 and not (np.diff(self.t, axis=1) > 0).all():
            raise ValueError("sample depths must be strictly increasing per ray")
        if not np.isfinite(self.t).all() or not np.isfinite(self.density).all():
            raise ValueError("samples must be finite")
        if (self.density < 0).any():
            raise ValueError("densities must be nonnegative")
        if self.values is not None:
            self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
            if self.values.shape != (r, n):
                raise ValueError("values shape must match t")

    @property
    def num_rays(self) -> int:
        return self.t.shape[0]

    @property
    def num_samples(self) -> int:
        return self.t.shape[1]

    @property
    def num_classes(self) -> int:
        return self.semantics.shape[2]

    def scalar_values(self) -> np.ndarray:
        return self.t if self.values is None else self.values


@dataclass
class RenderOutput:
    """Composited ray outputs plus the per-sample internals."""

    depth: np.ndarray  # (R,)
    semantics: np.ndarray  # (R, K)
    weight_sum: np.ndarray  # (R,)
    weights: np.ndarray  # (R, n)
    transmittance: np.ndarray  # (R, n)
    opacity: np.ndarray  # (R, n)
    delta: np.ndarray  # (R, n)


def sample_deltas(t: np.ndarray) -> np.ndarray:
    """Forward-difference spacings with the trailing one set to their mean.

    A single-sample ray has no difference to take; its spacing is defined
    as 1.0 so that sigma * delta reduces to sigma.
    """
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    r, n = t.shape
    if n == 1:
        return np.ones((r, 1), dtype=np.float64)
    d = np.diff(t, axis=1)
    out = np.empty((r, n), dtype=np.float64)
    out[:, :-1] = d
    out[:, -1] = d.mean(axis=1)
    return out


def composite(batch: RaySampleBatch) -> RenderOutput:
    """Composite a batch of rays front to back."""
    t, sigma, sem = batch.t, batch.density, batch.semantics
    delta = sample_deltas(t)
    a = -np.expm1(-sigma * delta)
    one_minus = 1.0 - a
    trans = np.cumprod(one_minus, axis=1)
    trans = np.concatenate([np.ones((t.shape[0], 1)), trans[:, :-1]], axis=1)
    w = trans * a
    v = batch.scalar_values()
    depth = (w * v).sum(axis=1)
    semantics = np.einsum("rn,rnk->rk", w, sem)
    return RenderOutput(
        depth=depth,
        semantics=semantics,
        weight_sum=w.sum(axis=1),
        weights=w,
        transmittance=trans,
        opacity=a,
        delta=delta,
    )


def composite_adjoint(
    batch: RaySampleBatch,
    grad_depth: np.ndarray,
    grad_semantics: np.ndarray,
    grad_weight_sum: np.ndarray | None = None,
    out: RenderOutput | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact reverse-mode gradients of composite outputs.

    Args are upstream gradients: ``grad_depth`` (R,), ``grad_semantics``
    (R, K), and optionally ``grad_weight_sum`` (R,).  Passing the forward
    ``out`` avoids recomputation.  Returns ``(d_sigma, d_semantics)`` shaped
    (R, n) and (R, n, K).

    Derivation: with u_i = dL/dw_i = gD * v_i + gS . s_i + gW,

        dL/ds_i     = w_i * gS
        dL/dsigma_i = delta_i * ((1 - a_i) * T_i * u_i - sum_{j>i} u_j * w_j)

    The suffix-sum form contains no division, so fully opaque samples
    (a_i = 1) are handled exactly.
    """
    if out is None:
        out = composite(batch)
    gd = np.atleast_1d(np.asarray(grad_depth, dtype=np.float64))
    gs = np.atleast_2d(np.asarray(grad_semantics, dtype=np.float64))
    r, n = batch.t.shape
    u = gd[:, None] * batch.scalar_values() + np.einsum(
        "rnk,rk->rn", batch.semantics, gs
    )
    if grad_weight_sum is not None:
        gw = np.atleast_1d(np.asarray(grad_weight_sum, dtype=np.float64))
        u = u + gw[:, None]

    uw = u * out.weights
    # suffix[i] = sum_{j > i} u_j w_j
    suffix = np.zeros((r, n), dtype=np.float64)
    if n > 1:
        suffix[:, :-1] = np.cumsum(uw[:, ::-1], axis=1)[:, ::-1][:, 1:]
    d_sigma = out.delta * ((1.0 - out.opacity) * out.transmittance * u - suffix)
    d_sem = out.weights[:, :, None] * gs[:, None, :]
    return d_sigma, d_sem


@dataclass
class ViewRender:
    """Maps plus flat per-ray internals for one rendered view.

    ``depth`` is (H, W); ``semantics`` is (H, W, K); ``weight_sum`` (H, W).
    ``batch`` and ``out`` keep the flat ray data (row-major over the map) for
    gradient propagation.
    """

    depth: np.ndarray
    semantics: np.ndarray
    weight_sum: np.ndarray
    batch: RaySampleBatch
    out: RenderOutput
    shape: tuple


def _sample_volumes(density: VoxelGrid, semantic: VoxelGrid, pts_flat: np.ndarray):
    sigma = grid_sample(density, pts_flat)[:, 0]
    sem = grid_sample(semantic, pts_flat)
    return sigma, sem


def _check_shared_extent(density: VoxelGrid, semantic: VoxelGrid) -> None:
    if density.channels != 1:
        raise ValueError("density grid must have one channel")
    if density.extent != semantic.extent:
        raise ValueError("density and semantic grids must share an extent")


def render_camera(
    density: VoxelGrid,
    semantic: VoxelGrid,
    cam: CameraModel,
    bins: DepthBins,
    stride: int = 4,
) -> ViewRender:
    """Render expected-depth, semantic, and weight-sum maps for one camera.

    Samples are placed so their camera-frame z equals the bin centers, and
    the rendered depth is expected camera-frame z.  Pixels are visited at
    stride-cell centers; the output maps are (height // stride) by
    (width // stride).
    """
    _check_shared_extent(density, semantic)
    us = strided_pixel_centers(cam.width, stride)
    vs = strided_pixel_centers(cam.height, stride)
    h, w = len(vs), len(us)
    uu, vv = np.meshgrid(us, vs)  # (h, w), row-major over v
    z = sample_depths(bins)
    n = bins.count
    pts = back_project(cam, uu.ravel()[:, None], vv.ravel()[:, None], z[None, :])
    r = h * w
    sigma, sem = _sample_volumes(density, semantic, pts.reshape(r * n, 3))
    batch = RaySampleBatch(
        t=np.broadcast_to(z, (r, n)).copy(),
        density=sigma.reshape(r, n),
        semantics=sem.reshape(r, n, -1),
        points=pts,
    )
    out = composite(batch)
    k = batch.num_classes
    return ViewRender(
        depth=out.depth.reshape(h, w),
        semantics=out.semantics.reshape(h, w, k),
        weight_sum=out.weight_sum.reshape(h, w),
        batch=batch,
        out=out,
        shape=(h, w),
    )


def render_bev(
    density: VoxelGrid,
    semantic: VoxelGrid,
    nx: int,
    ny: int,
    nz_samples: int,
) -> ViewRender:
    """Render expected-height and semantic maps from straight-down rays.

    One ray per cell of an (nx, ny) lattice over the grid footprint; maps
    come back (ny, nx).  The accumulated scalar is world height, so the
    depth map holds the expected surface height per cell.
    """
    _check_shared_extent(density, semantic)
    lattice = bev_rays(density.extent, nx, ny, nz_samples)
    pts = lattice.sample_points()
    r = lattice.nx * lattice.ny
    n = lattice.nz_samples
    sigma, sem = _sample_volumes(density, semantic, pts.reshape(r * n, 3))
    batch = RaySampleBatch(
        t=np.broadcast_to(lattice.t, (r, n)).copy(),
        density=sigma.reshape(r, n),
        semantics=sem.reshape(r, n, -1),
        points=pts,
        values=np.broadcast_to(lattice.heights, (r, n)).copy(),
    )
    out = composite(batch)
    k = batch.num_classes
    return ViewRender(
        depth=out.depth.reshape(ny, nx),
        semantics=out.semantics.reshape(ny, nx, k),
        weight_sum=out.weight_sum.reshape(ny, nx),
        batch=batch,
        out=out,
        shape=(ny, nx),
    )
