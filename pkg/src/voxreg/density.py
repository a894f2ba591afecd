"""Signed distance to volume density via a scaled Laplace CDF.

The transform maps a signed distance ``s`` (positive inside objects, negative
in free space) to a nonnegative density ``alpha * cdf(s)`` where ``cdf`` is
the CDF of a zero-mean Laplace distribution with scale ``beta``:

    cdf(s) = 0.5 * exp(s / beta)          for s <= 0
    cdf(s) = 1 - 0.5 * exp(-s / beta)     for s > 0

``alpha`` is the saturated interior density and ``beta`` the width of the
soft transition around the surface.  Both are strictly positive; they are
stored as unconstrained logs so gradient steps can never leave the valid
range.  The transform is monotonically increasing and C1: both branches have
derivative ``alpha / (2 * beta)`` at ``s = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import VoxelGrid


@dataclass
class LaplaceParams:
    """Learnable transform parameters, kept positive through log storage."""

    log_alpha: float
    log_beta: float

    @classmethod
    def from_values(cls, alpha: float = 10.0, beta: float = 0.1) -> "LaplaceParams":
        if not (alpha > 0 and beta > 0):
            raise ValueError("alpha and beta must be strictly positive")
        return cls(log_alpha=float(np.log(alpha)), log_beta=float(np.log(beta)))

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta))


def _split(s):
    s = np.asarray(s, dtype=np.float64)
    return s, s <= 0


def psi_beta(s, params: LaplaceParams):
    """Density alpha * cdf(s).  Vectorized over ``s``."""
    s, neg = _split(s)
    alpha, beta = params.alpha, params.beta
    # Exponent is nonpositive on both branches, so this never overflows.
    e = np.exp(-np.abs(s) / beta)
    return alpha * np.where(neg, 0.5 * e, 1.0 - 0.5 * e)


def psi_beta_grad_s(s, params: LaplaceParams):
    """d(density)/ds, continuous across s = 0 where it equals alpha/(2 beta)."""
    s, _ = _split(s)
    alpha, beta = params.alpha, params.beta
    return (alpha / (2.0 * beta)) * np.exp(-np.abs(s) / beta)


def psi_beta_grad_alpha(s, params: LaplaceParams):
    """d(density)/d(alpha), which is just the Laplace CDF itself."""
    s, neg = _split(s)
    e = np.exp(-np.abs(s) / params.beta)
    return np.where(neg, 0.5 * e, 1.0 - 0.5 * e)


def psi_beta_grad_beta(s, params: LaplaceParams):
    """d(density)/d(beta).

    Both branches reduce to ``-(alpha * s) / (2 beta^2) * exp(-|s|/beta)``:
    widening the transition raises density outside the surface and lowers it
    inside, and has no effect exactly at the surface.
    """
    s, _ = _split(s)
    alpha, beta = params.alpha, params.beta
    return -(alpha * s) / (2.0 * beta**2) * np.exp(-np.abs(s) / beta)


def psi_beta_grad(s, params: LaplaceParams):
    """All three partials of the density at once: (d/ds, d/dalpha, d/dbeta)."""
    return (
        psi_beta_grad_s(s, params),
        psi_beta_grad_alpha(s, params),
        psi_beta_grad_beta(s, params),
    )


def density_volume_from_sdf(sdf: VoxelGrid, params: LaplaceParams) -> VoxelGrid:
    """Elementwise transform of a single-channel signed distance grid."""
    if sdf.channels != 1:
        raise ValueError("signed distance grid must have exactly one channel")
    data = psi_beta(sdf.data, params)
    return VoxelGrid(dims=sdf.dims, channels=1, extent=sdf.extent, data=data)


def tanh_gate(dense, density):
    """Gate feature channels by the bounded density response tanh(density).

    Accepts either two grids sharing dims/extent (density single-channel),
    returning a gated grid, or two raw arrays where ``density`` broadcasts
    against the feature channels, returning an array.
    """
    if isinstance(dense, VoxelGrid) or isinstance(density, VoxelGrid):
        if not (isinstance(dense, VoxelGrid) and isinstance(density, VoxelGrid)):
            raise ValueError("tanh_gate needs two grids or two arrays, not a mix")
        if not dense.same_geometry(density):
            raise ValueError("feature and density grids must share dims and extent")
        if density.channels != 1:
            raise ValueError("density grid must have exactly one channel")
        data = dense.data * np.tanh(density.data)
        return VoxelGrid(dims=dense.dims, channels=dense.channels,
                         extent=dense.extent, data=data)
    dense = np.asarray(dense, dtype=np.float64)
    density = np.asarray(density, dtype=np.float64)
    return dense * np.tanh(density)
