"""Central finite-difference verification of every analytic gradient.

Each check builds a random instance, evaluates the analytic gradient, and
compares against central differences.  Relative error uses a floored
denominator:

    err = |a - n| / max(|a|, |n|, 1e-4)

The floor matters: a central difference of a loss of magnitude L carries
irreducible float64 noise around eps * L / (2h), a few 1e-10 here, so
demanding relative agreement on gradients far below that is meaningless.
With the 1e-4 floor, entries above it are compared relatively and entries
below it are compared absolutely to threshold * 1e-4 (1e-9 at the 1e-5
threshold), which sits just above the noise.  Sign flips and dropped terms
on small entries still fail loudly.

Checks return their max relative error; ``run_all`` bundles them with the
pass thresholds used by the command-line ``grad-check`` report.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraModel, DepthBins, look_at
from .density import LaplaceParams, psi_beta, psi_beta_grad_alpha, psi_beta_grad_beta, psi_beta_grad_s
from .grid import (
    Extent3,
    GridGradient,
    VoxelGrid,
    grid_sample,
    grid_sample_adjoint,
    sample_point_gradient,
)
from .losses import SupervisionMaps, depth_loss, semantic_loss
from .render import RaySampleBatch, composite, composite_adjoint
from .scenes import GroundPlane, SceneSpec, Sphere, make_supervision

ERR_FLOOR = 1e-4


def rel_err(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), ERR_FLOOR)
    return np.abs(a - b) / denom


def check_psi(seed: int = 0, n: int = 1000) -> float:
    """d(psi)/d(s, alpha, beta) vs central differences.

    Distances are drawn as s = u * beta with |u| in [0.01, 4] so the
    difference stencil never straddles the curvature jump at s = 0 (where
    the derivative itself stays C0) and the gradients stay well above the
    noise floor.  The kink itself is checked exactly at s = 0 with a step
    small enough that the one-sided curvature error is negligible.
    """
    rng = np.random.default_rng(seed)
    alphas = rng.uniform(0.5, 20.0, n)
    betas = rng.uniform(0.05, 0.5, n)
    u = rng.uniform(0.01, 4.0, n) * rng.choice([-1.0, 1.0], n)
    s = u * betas
    worst = 0.0
    for i in range(n):
        p = LaplaceParams.from_values(alphas[i], betas[i])
        si = np.array([s[i]])
        h = 1e-6
        fd_s = (psi_beta(si + h, p) - psi_beta(si - h, p)) / (2 * h)
        fd_a = (
            psi_beta(si, LaplaceParams.from_values(alphas[i] + h, betas[i]))
            - psi_beta(si, LaplaceParams.from_values(alphas[i] - h, betas[i]))
        ) / (2 * h)
        hb = 1e-4 * betas[i]
        fd_b = (
            psi_beta(si, LaplaceParams.from_values(alphas[i], betas[i] + hb))
            - psi_beta(si, LaplaceParams.from_values(alphas[i], betas[i] - hb))
        ) / (2 * hb)
        worst = max(
            worst,
            float(rel_err(psi_beta_grad_s(si, p), fd_s).max()),
            float(rel_err(psi_beta_grad_alpha(si, p), fd_a).max()),
            float(rel_err(psi_beta_grad_beta(si, p), fd_b).max()),
        )
    # the derivative at the join: symmetric stencil with the curvature jump
    # contributes error h * alpha / (4 beta^2); keep h tiny
    for alpha, beta in ((10.0, 0.1), (2.0, 0.05), (0.5, 0.5)):
        p = LaplaceParams.from_values(alpha, beta)
        z = np.array([0.0])
        h = 1e-9
        fd = (psi_beta(z + h, p) - psi_beta(z - h, p)) / (2 * h)
        worst = max(worst, float(rel_err(psi_beta_grad_s(z, p), fd).max()))
    return worst


def _random_grid(rng, dims=(4, 3, 5), channels=2) -> VoxelGrid:
    extent = Extent3(np.array([-1.0, 0.0, -2.0]), np.array([3.0, 1.5, 0.5]))
    grid = VoxelGrid.zeros(dims, channels, extent)
    grid.data[...] = rng.normal(0.0, 1.0, grid.data.shape)
    return grid


def check_grid_sample_adjoint(seed: int = 0, num_points: int = 80) -> float:
    """Scattered voxel gradients vs perturbing each voxel."""
    rng = np.random.default_rng(seed)
    grid = _random_grid(rng)
    lo, hi = grid.extent.min, grid.extent.max
    vs = grid.voxel_size
    # mix interior points with points in the border falloff band outside
    pts = np.concatenate(
        [
            rng.uniform(lo + 0.05 * vs, hi - 0.05 * vs, (num_points - 20, 3)),
            rng.uniform(lo - 1.4 * vs, hi + 1.4 * vs, (20, 3)),
        ]
    )
    upstream = rng.normal(0.0, 1.0, (len(pts), grid.channels))

    grad = GridGradient.zeros_like(grid)
    for p, u in zip(pts, upstream):
        grid_sample_adjoint(grid, p, u, grad)

    def total(data):
        g = VoxelGrid(dims=grid.dims, channels=grid.channels, extent=grid.extent, data=data)
        return float((grid_sample(g, pts) * upstream).sum())

    h = 1e-5
    fd = np.zeros_like(grid.data)
    flat = grid.data.ravel()
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = total(grid.data)
        flat[j] = orig - h
        dn = total(grid.data)
        flat[j] = orig
        fd.ravel()[j] = (up - dn) / (2 * h)
    return float(rel_err(grad.data, fd).max())


def check_point_jacobian(seed: int = 0, num_points: int = 100) -> float:
    """d(sample)/d(point) vs central differences at interior points."""
    rng = np.random.default_rng(seed)
    grid = _random_grid(rng)
    vs = grid.voxel_size
    # keep each coordinate at least a tenth of a cell away from cell faces
    # so the difference stencil stays inside one multilinear cell
    dims = np.asarray(grid.dims)
    cells = rng.integers(0, dims - 1, (num_points, 3))
    frac = rng.uniform(0.1, 0.9, (num_points, 3))
    ci = cells + frac
    pts = grid.extent.min + (ci + 0.5) * vs
    worst = 0.0
    for p in pts:
        jac = sample_point_gradient(grid, p)
        for ax in range(3):
            h = vs[ax] * 1e-5
            e = np.zeros(3)
            e[ax] = h
            fd = (grid_sample(grid, p + e) - grid_sample(grid, p - e)) / (2 * h)
            worst = max(worst, float(rel_err(jac[:, ax], fd).max()))
    return worst


def _random_batch(rng, rays: int, n: int, with_values: bool) -> RaySampleBatch:
    gaps = rng.uniform(1e-2, 0.8, (rays, n))
    t = 0.1 + np.cumsum(gaps, axis=1)
    density = rng.uniform(0.5, 4.0, (rays, n))
    sem = rng.normal(0.0, 1.0, (rays, n, 3))
    values = rng.uniform(-2.0, 2.0, (rays, n)) if with_values else None
    return RaySampleBatch(t=t, density=density, semantics=sem, values=values)


def check_composite(seed: int = 0, rays: int = 25, lengths=(1, 2, 4, 8)) -> float:
    """Composite adjoint wrt density and semantics vs central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in lengths:
        for with_values in (False, True):
            batch = _random_batch(rng, rays, n, with_values)
            gd = rng.normal(0.0, 1.0, rays)
            gs = rng.normal(0.0, 1.0, (rays, 3))
            gw = rng.normal(0.0, 1.0, rays)
            out = composite(batch)
            d_sigma, d_sem = composite_adjoint(batch, gd, gs, gw, out=out)

            def loss_of(b: RaySampleBatch) -> np.ndarray:
                o = composite(b)
                return gd * o.depth + (gs * o.semantics).sum(axis=1) + gw * o.weight_sum

            h = 1e-6
            for r in range(rays):
                for i in range(n):
                    d = batch.density.copy()
                    d[r, i] += h
                    up = loss_of(RaySampleBatch(batch.t, d, batch.semantics, values=batch.values))[r]
                    d[r, i] -= 2 * h
                    dn = loss_of(RaySampleBatch(batch.t, d, batch.semantics, values=batch.values))[r]
                    worst = max(worst, float(rel_err(d_sigma[r, i], (up - dn) / (2 * h)).max()))
                    for c in range(3):
                        s = batch.semantics.copy()
                        s[r, i, c] += h
                        up = loss_of(RaySampleBatch(batch.t, batch.density, s, values=batch.values))[r]
                        s[r, i, c] -= 2 * h
                        dn = loss_of(RaySampleBatch(batch.t, batch.density, s, values=batch.values))[r]
                        worst = max(worst, float(rel_err(d_sem[r, i, c], (up - dn) / (2 * h)).max()))
    return worst


def _random_sup(rng, cam_shapes, bev_shape, num_classes):
    cam_depth, cam_class, cam_mask = [], [], []
    for shape in cam_shapes:
        cam_depth.append(rng.uniform(1.0, 50.0, shape))
        cam_class.append(rng.integers(0, num_classes, shape))
        cam_mask.append(rng.uniform(0, 1, shape) > 0.3)
    bev_height = rng.uniform(-2.0, 4.0, bev_shape)
    bev_class = rng.integers(0, num_classes, bev_shape)
    bev_mask = rng.uniform(0, 1, bev_shape) > 0.3
    return SupervisionMaps(
        cam_depth=cam_depth, cam_class=cam_class, cam_mask=cam_mask,
        bev_height=bev_height, bev_class=bev_class, bev_mask=bev_mask,
    )


def check_depth_loss(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    shapes = [(5, 4), (4, 4)]
    bev_shape = (4, 3)
    sup = _random_sup(rng, shapes, bev_shape, 3)
    sup.cam_mask[1][...] = False  # one empty group must contribute zero
    cam_d = [rng.uniform(1.0, 50.0, s) for s in shapes]
    bev_d = rng.uniform(-2.0, 4.0, bev_shape)
    _, _, _, cam_grads, bev_grad = depth_loss(cam_d, bev_d, sup, transition=1.0)

    def total(cams, bev):
        t, _, _, _, _ = depth_loss(cams, bev, sup, transition=1.0)
        return t

    h = 1e-5
    worst = 0.0
    for k, d in enumerate(cam_d):
        for j in range(d.size):
            orig = d.ravel()[j]
            d.ravel()[j] = orig + h
            up = total(cam_d, bev_d)
            d.ravel()[j] = orig - h
            dn = total(cam_d, bev_d)
            d.ravel()[j] = orig
            worst = max(worst, float(rel_err(cam_grads[k].ravel()[j], (up - dn) / (2 * h)).max()))
    for j in range(bev_d.size):
        orig = bev_d.ravel()[j]
        bev_d.ravel()[j] = orig + h
        up = total(cam_d, bev_d)
        bev_d.ravel()[j] = orig - h
        dn = total(cam_d, bev_d)
        bev_d.ravel()[j] = orig
        worst = max(worst, float(rel_err(bev_grad.ravel()[j], (up - dn) / (2 * h)).max()))
    return worst


def check_semantic_loss(seed: int = 0, renormalize: bool = False) -> float:
    rng = np.random.default_rng(seed)
    k = 3
    shapes = [(4, 4), (3, 4)]
    bev_shape = (3, 3)
    sup = _random_sup(rng, shapes, bev_shape, k)
    cam_s = [rng.normal(0.0, 1.5, (*s, k)) for s in shapes]
    bev_s = rng.normal(0.0, 1.5, (*bev_shape, k))
    cam_w = [rng.uniform(0.3, 1.0, s) for s in shapes] if renormalize else None
    bev_w = rng.uniform(0.3, 1.0, bev_shape) if renormalize else None
    _, _, _, cam_grads, bev_grad, cam_wg, bev_wg = semantic_loss(
        cam_s, bev_s, sup, cam_weight_sums=cam_w, bev_weight_sum=bev_w, renormalize=renormalize
    )

    def total():
        t, _, _, _, _, _, _ = semantic_loss(
            cam_s, bev_s, sup, cam_weight_sums=cam_w, bev_weight_sum=bev_w,
            renormalize=renormalize,
        )
        return t

    h = 1e-6
    worst = 0.0

    def sweep(arr, grad):
        nonlocal worst
        flat, gflat = arr.ravel(), np.asarray(grad).ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = total()
            flat[j] = orig - h
            dn = total()
            flat[j] = orig
            worst = max(worst, float(rel_err(gflat[j], (up - dn) / (2 * h)).max()))

    for kk in range(len(cam_s)):
        sweep(cam_s[kk], cam_grads[kk])
    sweep(bev_s, bev_grad)
    if renormalize:
        for kk in range(len(cam_w)):
            sweep(cam_w[kk], cam_wg[kk])
        sweep(bev_w, bev_wg)
    return worst


def check_losses(seed: int = 0) -> float:
    return max(
        check_depth_loss(seed),
        check_semantic_loss(seed + 1, renormalize=False),
        check_semantic_loss(seed + 2, renormalize=True),
    )


def _tiny_setup(seed: int = 0):
    """6x6x6 grid, two 8x8 cameras, small scene, random nonzero init."""
    from .fit import FitConfig, build_plan

    extent = Extent3(np.array([0.0, 0.0, 0.0]), np.array([3.0, 3.0, 3.0]))
    dims = (6, 6, 6)
    scene = SceneSpec(
        num_classes=3,
        primitives=[
            GroundPlane(z=0.3, cls=1),
            Sphere(center=np.array([1.5, 1.5, 1.4]), radius=0.8, cls=2),
        ],
    )
    r1, t1 = look_at(np.array([-1.2, 1.5, 2.4]), np.array([1.5, 1.5, 1.0]))
    r2, t2 = look_at(np.array([1.5, -0.8, 2.0]), np.array([1.5, 1.5, 0.8]))
    cams = [
        CameraModel(fx=6.0, fy=6.0, cx=3.5, cy=3.5, width=8, height=8,
                    rotation=r1, translation=t1, name="a"),
        CameraModel(fx=6.0, fy=6.0, cx=3.5, cy=3.5, width=8, height=8,
                    rotation=r2, translation=t2, name="b"),
    ]
    bins = DepthBins(near=0.5, far=5.0, count=12)
    cfg = FitConfig(stride=1, seed=seed, threads=1, precheck=False)
    bundle = make_supervision(scene, cams, bins, dims, extent, stride=1, seed=seed)
    plan = build_plan(cams, bins, dims, extent, stride=1)
    rng = np.random.default_rng(seed + 7)
    sdf = VoxelGrid.zeros(dims, 1, extent)
    sdf.data[...] = rng.normal(0.0, 0.3, sdf.data.shape)
    sem = VoxelGrid.zeros(dims, 3, extent)
    sem.data[...] = rng.normal(0.0, 0.3, sem.data.shape)
    params = LaplaceParams.from_values(8.0, 0.15)
    return sdf, sem, params, plan, bundle.supervision(), cfg


def check_end_to_end(seed: int = 0) -> float:
    """Loss -> grids chain through rendering vs central differences."""
    from .fit import loss_and_grads

    sdf, sem, params, plan, sup, cfg = _tiny_setup(seed)
    total, _, d_sdf, d_sem, d_la, d_lb = loss_and_grads(sdf, sem, params, plan, sup, cfg)

    def loss_of() -> float:
        t, _, _, _, _, _ = loss_and_grads(sdf, sem, params, plan, sup, cfg)
        return t

    h = 1e-5
    worst = 0.0
    for arr, grad in ((sdf.data, d_sdf), (sem.data, d_sem)):
        flat, gflat = arr.ravel(), grad.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_of()
            flat[j] = orig - h
            dn = loss_of()
            flat[j] = orig
            worst = max(worst, float(rel_err(gflat[j], (up - dn) / (2 * h)).max()))
    for attr, grad in (("log_alpha", d_la), ("log_beta", d_lb)):
        orig = getattr(params, attr)
        setattr(params, attr, orig + h)
        up = loss_of()
        setattr(params, attr, orig - h)
        dn = loss_of()
        setattr(params, attr, orig)
        worst = max(worst, float(rel_err(grad, (up - dn) / (2 * h)).max()))
    return worst


def quick_adjoint_check(seed: int = 0) -> float:
    """Trimmed psi/composite/sampling check used as a fit precheck."""
    return max(
        check_psi(seed, n=40),
        check_composite(seed, rays=6, lengths=(2, 5)),
        check_grid_sample_adjoint(seed, num_points=30),
    )


THRESHOLDS = {
    "psi_beta": 1e-5,
    "grid_sample_adjoint": 1e-5,
    "point_jacobian": 1e-4,
    "composite": 1e-5,
    "losses": 1e-5,
    "end_to_end": 1e-4,
}


def run_all(seed: int = 0) -> dict:
    """All suites; maps name -> (max rel err, threshold, passed)."""
    errs = {
        "psi_beta": check_psi(seed),
        "grid_sample_adjoint": check_grid_sample_adjoint(seed),
        "point_jacobian": check_point_jacobian(seed),
        "composite": check_composite(seed),
        "losses": check_losses(seed),
        "end_to_end": check_end_to_end(seed),
    }
    return {
        name: {"max_rel_err": err, "threshold": THRESHOLDS[name], "ok": err < THRESHOLDS[name]}
        for name, err in errs.items()
    }
