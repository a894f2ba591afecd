"""Direct Adam fitting of signed-distance and semantic volumes from 2D
depth and semantic supervision rendered out of the volumes themselves.

The geometry of every supervised view is fixed for the whole fit, so the
plan precomputes each sample point's eight corner indices and trilinear
weights once.  A step is then: transform the distance grid to density,
gather samples, composite, evaluate the losses, run the exact adjoint back
to the grids, and take one decoupled-weight-decay Adam step.

Rays are processed in fixed-size chunks whose private gradient buffers are
merged in chunk order.  The partition never depends on the thread count, so
results are identical for any ``threads`` setting; across different
partitions the merged gradients agree to float64 rounding (within 1e-9).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import DepthBins, back_project, bev_rays, sample_depths, strided_pixel_centers
from .density import (
    LaplaceParams,
    psi_beta,
    psi_beta_grad_alpha,
    psi_beta_grad_beta,
    psi_beta_grad_s,
)
from .formats import read_grid, write_grid
from .grid import Extent3, VoxelGrid, corner_weights, gather_corners, scatter_corners
from .heads import predict_occupancy, miou
from .losses import LossWeights, SupervisionMaps, regulator_loss
from .render import RaySampleBatch, composite, composite_adjoint, render_bev, render_camera
from .scenes import (
    GroundTruthBundle,
    SceneSpec,
    bake_sdf,
    make_supervision,
    occupancy_labels,
    trace_bev,
    trace_camera,
)

CHUNK_RAYS = 4096


@dataclass
class FitConfig:
    steps: int = 2000
    lr: float = 2e-4
    weight_decay: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha_init: float = 10.0
    beta_init: float = 0.1
    lambda_depth: float = 1.0
    lambda_semantic: float = 1.0
    use_depth: bool = True
    use_semantic: bool = True
    camera_sup: bool = True
    bev_sup: bool = True
    stride: int = 4
    lidar_rate: float = 1.0
    seed: int = 0
    renormalize: bool = False
    transition: float = 1.0
    threads: int = 1
    precheck: bool = True
    bev_shape: tuple | None = None  # defaults to the grid footprint
    nz_samples: int | None = None  # defaults to the grid z resolution


@dataclass
class FitState:
    sdf: VoxelGrid
    semantic: VoxelGrid
    params: LaplaceParams
    adam_m: dict
    adam_v: dict
    step: int = 0

    def snapshot(self) -> "FitState":
        return FitState(
            sdf=VoxelGrid(
                dims=self.sdf.dims,
                channels=1,
                extent=self.sdf.extent,
                data=self.sdf.data.copy(),
            ),
            semantic=VoxelGrid(
                dims=self.semantic.dims,
                channels=self.semantic.channels,
                extent=self.semantic.extent,
                data=self.semantic.data.copy(),
            ),
            params=LaplaceParams(self.params.log_alpha, self.params.log_beta),
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
        )


class FitDiverged(RuntimeError):
    """Raised when the total loss stops being finite."""

    def __init__(self, step: int, value: float, last_good: FitState, rows: list):
        super().__init__(
            f"non-finite total loss {value!r} at step {step}; "
            f"last finite state is from step {last_good.step}"
        )
        self.step = step
        self.value = value
        self.last_good = last_good
        self.rows = rows


@dataclass
class PlanView:
    """Precomputed sampling geometry for one rendered view."""

    kind: str  # "cam" or "bev"
    shape: tuple  # map shape (rows, cols)
    t: np.ndarray  # (R, n)
    values: np.ndarray | None  # (R, n) scalar override (heights for bev)
    idx: np.ndarray  # (8, R * n) corner indices
    w: np.ndarray  # (8, R * n) corner weights

    @property
    def num_rays(self) -> int:
        return self.t.shape[0]

    @property
    def num_samples(self) -> int:
        return self.t.shape[1]


@dataclass
class RenderPlan:
    dims: tuple
    extent: Extent3
    views: list

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _plan_corners(dims, extent: Extent3, pts: np.ndarray):
    vs = extent.size() / np.asarray(dims, dtype=np.float64)
    ci = (pts.reshape(-1, 3) - extent.min) / vs - 0.5
    idx, w, _ = corner_weights(dims, ci)
    return idx, w


def build_plan(
    cams: list,
    bins: DepthBins,
    dims,
    extent: Extent3,
    stride: int = 4,
    bev_shape: tuple | None = None,
    nz_samples: int | None = None,
    camera_views: bool = True,
    bev_view: bool = True,
) -> RenderPlan:
    """Precompute per-view sample geometry for repeated rendering."""
    views = []
    if camera_views:
        z = sample_depths(bins)
        for cam in cams:
            us = strided_pixel_centers(cam.width, stride)
            vs = strided_pixel_centers(cam.height, stride)
            uu, vv = np.meshgrid(us, vs)
            pts = back_project(
                cam, uu.ravel()[:, None], vv.ravel()[:, None], z[None, :]
            )
            r = uu.size
            idx, w = _plan_corners(dims, extent, pts)
            views.append(
                PlanView(
                    kind="cam",
                    shape=(len(vs), len(us)),
                    t=np.broadcast_to(z, (r, bins.count)).copy(),
                    values=None,
                    idx=idx,
                    w=w,
                )
            )
    if bev_view:
        nx_b, ny_b = bev_shape if bev_shape is not None else (dims[0], dims[1])
        nz = nz_samples if nz_samples is not None else dims[2]
        lattice = bev_rays(extent, nx_b, ny_b, nz)
        pts = lattice.sample_points()
        r = lattice.nx * lattice.ny
        idx, w = _plan_corners(dims, extent, pts)
        views.append(
            PlanView(
                kind="bev",
                shape=(ny_b, nx_b),
                t=np.broadcast_to(lattice.t, (r, nz)).copy(),
                values=np.broadcast_to(lattice.heights, (r, nz)).copy(),
                idx=idx,
                w=w,
            )
        )
    return RenderPlan(dims=tuple(int(n) for n in dims), extent=extent, views=views)


def _ray_chunks(num_rays: int):
    return [(lo, min(lo + CHUNK_RAYS, num_rays)) for lo in range(0, num_rays, CHUNK_RAYS)]


def _run_tasks(tasks, threads: int):
    """Run callables, preserving order; threads <= 1 stays inline."""
    if threads <= 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


@dataclass
class _ViewForward:
    batches: list  # per-chunk RaySampleBatch
    outs: list  # per-chunk RenderOutput
    depth: np.ndarray
    semantics: np.ndarray
    weight_sum: np.ndarray


def forward_view(view: PlanView, combined_flat: np.ndarray, threads: int = 1) -> _ViewForward:
    """Gather and composite one view from a stacked (1 + K, nvox) volume."""
    n = view.num_samples
    chunks = _ray_chunks(view.num_rays)

    def run(lo, hi):
        sl = slice(lo * n, hi * n)
        sampled = gather_corners(combined_flat, view.idx[:, sl], view.w[:, sl])
        sigma = sampled[:, 0].reshape(hi - lo, n)
        sem = sampled[:, 1:].reshape(hi - lo, n, -1)
        batch = RaySampleBatch(
            t=view.t[lo:hi],
            density=np.maximum(sigma, 0.0),
            semantics=sem,
            values=None if view.values is None else view.values[lo:hi],
        )
        return batch, composite(batch)

    results = _run_tasks([lambda lo=lo, hi=hi: run(lo, hi) for lo, hi in chunks], threads)
    batches = [b for b, _ in results]
    outs = [o for _, o in results]
    k = combined_flat.shape[0] - 1
    depth = np.concatenate([o.depth for o in outs]).reshape(view.shape)
    sem = np.concatenate([o.semantics for o in outs]).reshape(*view.shape, k)
    wsum = np.concatenate([o.weight_sum for o in outs]).reshape(view.shape)
    return _ViewForward(batches=batches, outs=outs, depth=depth, semantics=sem, weight_sum=wsum)


def backward_view(
    view: PlanView,
    fwd: _ViewForward,
    grad_depth: np.ndarray | None,
    grad_sem: np.ndarray | None,
    grad_wsum: np.ndarray | None,
    num_channels: int,
    num_voxels: int,
    threads: int = 1,
) -> np.ndarray:
    """Adjoint of forward_view; returns a stacked (1 + K, nvox) gradient."""
    n = view.num_samples
    k = num_channels - 1
    r = view.num_rays
    gd = np.zeros(r) if grad_depth is None else np.asarray(grad_depth).reshape(r)
    gs = (
        np.zeros((r, k))
        if grad_sem is None
        else np.asarray(grad_sem).reshape(r, k)
    )
    gw = None if grad_wsum is None else np.asarray(grad_wsum).reshape(r)
    chunks = _ray_chunks(r)

    def run(ci, lo, hi):
        sl = slice(lo * n, hi * n)
        batch, out = fwd.batches[ci], fwd.outs[ci]
        d_sigma, d_sem = composite_adjoint(
            batch,
            gd[lo:hi],
            gs[lo:hi],
            None if gw is None else gw[lo:hi],
            out=out,
        )
        upstream = np.concatenate(
            [d_sigma.reshape(-1, 1), d_sem.reshape((hi - lo) * n, k)], axis=1
        )
        buf = np.zeros((num_channels, num_voxels))
        scatter_corners(buf, view.idx[:, sl], view.w[:, sl], upstream)
        return buf

    bufs = _run_tasks(
        [lambda ci=ci, lo=lo, hi=hi: run(ci, lo, hi) for ci, (lo, hi) in enumerate(chunks)],
        threads,
    )
    total = bufs[0]
    for b in bufs[1:]:
        total += b
    return total


def loss_and_grads(
    sdf: VoxelGrid,
    semantic: VoxelGrid,
    params: LaplaceParams,
    plan: RenderPlan,
    sup: SupervisionMaps,
    cfg: FitConfig,
):
    """Full forward and exact backward pass through rendering and losses.

    Returns ``(total, parts, d_sdf, d_semantic, d_log_alpha, d_log_beta)``
    with gradient arrays shaped like the grid data.
    """
    k = semantic.channels
    density_data = psi_beta(sdf.data, params)
    combined = np.concatenate(
        [density_data.reshape(1, -1), semantic.data.reshape(k, -1)], axis=0
    )
    fwds = [forward_view(v, combined, cfg.threads) for v in plan.views]

    cam_idx = [i for i, v in enumerate(plan.views) if v.kind == "cam"]
    bev_idx = [i for i, v in enumerate(plan.views) if v.kind == "bev"]
    cam_depth = [fwds[i].depth for i in cam_idx]
    cam_sem = [fwds[i].semantics for i in cam_idx]
    cam_wsum = [fwds[i].weight_sum for i in cam_idx]
    bev_depth = fwds[bev_idx[0]].depth if bev_idx else None
    bev_sem = fwds[bev_idx[0]].semantics if bev_idx else None
    bev_wsum = fwds[bev_idx[0]].weight_sum if bev_idx else None

    res = regulator_loss(
        cam_depth,
        cam_sem,
        bev_depth,
        bev_sem,
        sup,
        weights=LossWeights(depth=cfg.lambda_depth, semantic=cfg.lambda_semantic),
        transition=cfg.transition,
        use_depth=cfg.use_depth,
        use_semantic=cfg.use_semantic,
        cam_weight_sums=cam_wsum,
        bev_weight_sum=bev_wsum,
        renormalize=cfg.renormalize,
    )

    nvox = plan.num_voxels
    grad_combined = np.zeros((1 + k, nvox))
    for j, i in enumerate(cam_idx):
        gw = res.cam_weight_grads[j] if res.cam_weight_grads is not None else None
        grad_combined += backward_view(
            plan.views[i],
            fwds[i],
            res.cam_depth_grads[j],
            res.cam_sem_grads[j],
            gw,
            1 + k,
            nvox,
            cfg.threads,
        )
    for i in bev_idx:
        grad_combined += backward_view(
            plan.views[i],
            fwds[i],
            res.bev_depth_grad,
            res.bev_sem_grad,
            res.bev_weight_grad,
            1 + k,
            nvox,
            cfg.threads,
        )

    d_density = grad_combined[0].reshape(sdf.data.shape)
    d_semantic = grad_combined[1:].reshape(semantic.data.shape)
    d_sdf = d_density * psi_beta_grad_s(sdf.data, params)
    d_alpha = float((d_density * psi_beta_grad_alpha(sdf.data, params)).sum())
    d_beta = float((d_density * psi_beta_grad_beta(sdf.data, params)).sum())
    d_log_alpha = d_alpha * params.alpha
    d_log_beta = d_beta * params.beta
    return res.total, res.parts, d_sdf, d_semantic, d_log_alpha, d_log_beta


def _adam_update(param, grad, m, v, t, lr, b1, b2, eps, wd):
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * np.square(grad)
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * param)


def init_state(dims, extent: Extent3, num_classes: int, cfg: FitConfig) -> FitState:
    """Zero-distance, uniform-semantics starting point."""
    sdf = VoxelGrid.zeros(dims, 1, extent)
    semantic = VoxelGrid.zeros(dims, num_classes, extent)
    adam_m = {
        "sdf": np.zeros_like(sdf.data),
        "semantic": np.zeros_like(semantic.data),
        "log_alpha": np.zeros(()),
        "log_beta": np.zeros(()),
    }
    adam_v = {k: np.zeros_like(v) for k, v in adam_m.items()}
    return FitState(
        sdf=sdf,
        semantic=semantic,
        params=LaplaceParams.from_values(cfg.alpha_init, cfg.beta_init),
        adam_m=adam_m,
        adam_v=adam_v,
        step=0,
    )


def fit_step(state: FitState, plan: RenderPlan, sup: SupervisionMaps, cfg: FitConfig) -> dict:
    """One loss evaluation plus one Adam step; mutates the state in place.

    Raises :class:`FitDiverged` via the caller's bookkeeping when the total
    is non-finite (this function only reports it).
    """
    total, parts, d_sdf, d_sem, d_la, d_lb = loss_and_grads(
        state.sdf, state.semantic, state.params, plan, sup, cfg
    )
    row = {
        "step": state.step,
        "dep_cam": parts["dep_cam"],
        "dep_bev": parts["dep_bev"],
        "sem_cam": parts["sem_cam"],
        "sem_bev": parts["sem_bev"],
        "total": total,
    }
    if not np.isfinite(total):
        return row

    t = state.step + 1
    _adam_update(
        state.sdf.data, d_sdf, state.adam_m["sdf"], state.adam_v["sdf"],
        t, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
    )
    _adam_update(
        state.semantic.data, d_sem, state.adam_m["semantic"], state.adam_v["semantic"],
        t, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
    )
    la = np.array(state.params.log_alpha)
    _adam_update(la, d_la, state.adam_m["log_alpha"], state.adam_v["log_alpha"],
                 t, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, 0.0)
    lb = np.array(state.params.log_beta)
    _adam_update(lb, d_lb, state.adam_m["log_beta"], state.adam_v["log_beta"],
                 t, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, 0.0)
    state.params.log_alpha = float(la)
    state.params.log_beta = float(lb)
    state.step = t
    return row


@dataclass
class FitResult:
    state: FitState
    rows: list
    bundle: GroundTruthBundle
    plan: RenderPlan


def _filtered_supervision(bundle: GroundTruthBundle, cfg: FitConfig) -> SupervisionMaps:
    sup = bundle.supervision()
    if not cfg.camera_sup:
        sup = SupervisionMaps(
            cam_depth=[], cam_class=[], cam_mask=[],
            bev_height=sup.bev_height, bev_class=sup.bev_class, bev_mask=sup.bev_mask,
        )
    if not cfg.bev_sup:
        sup = SupervisionMaps(
            cam_depth=sup.cam_depth, cam_class=sup.cam_class, cam_mask=sup.cam_mask,
            bev_height=None, bev_class=None, bev_mask=None,
        )
    return sup


def fit(
    scene: SceneSpec,
    cams: list,
    bins: DepthBins,
    dims,
    extent: Extent3,
    cfg: FitConfig,
    on_step=None,
) -> FitResult:
    """Fit volumes to a scene's rendered-view supervision from zero init."""
    if not cfg.camera_sup and not cfg.bev_sup:
        raise ValueError("at least one supervision view group must be enabled")
    if cfg.precheck:
        from .gradcheck import quick_adjoint_check

        worst = quick_adjoint_check(seed=cfg.seed)
        if worst > 1e-5:
            raise RuntimeError(
                f"gradient precheck failed (max rel err {worst:.3e}); refusing to fit"
            )
    bundle = make_supervision(
        scene, cams, bins, dims, extent,
        stride=cfg.stride, bev_shape=cfg.bev_shape,
        lidar_rate=cfg.lidar_rate, seed=cfg.seed,
    )
    sup = _filtered_supervision(bundle, cfg)
    plan = build_plan(
        cams, bins, dims, extent,
        stride=cfg.stride, bev_shape=cfg.bev_shape, nz_samples=cfg.nz_samples,
        camera_views=cfg.camera_sup, bev_view=cfg.bev_sup,
    )
    state = init_state(dims, extent, scene.num_classes, cfg)
    rows = []
    for _ in range(cfg.steps):
        last_good = state.snapshot()
        row = fit_step(state, plan, sup, cfg)
        rows.append(row)
        if not np.isfinite(row["total"]):
            raise FitDiverged(row["step"], row["total"], last_good, rows)
        if on_step is not None:
            on_step(row)
    return FitResult(state=state, rows=rows, bundle=bundle, plan=plan)


def evaluate_fit(
    state: FitState,
    scene: SceneSpec,
    eval_cams: list,
    bins: DepthBins,
    dims,
    extent: Extent3,
    stride: int = 1,
    sdf_band: float | None = None,
) -> dict:
    """Depth, height, and occupancy metrics of a fitted state.

    ``sdf_band`` additionally reports occupancy mIoU restricted to voxels
    whose true distance magnitude exceeds the band (clearly inside or
    outside voxels).
    """
    from .density import density_volume_from_sdf

    density = density_volume_from_sdf(state.sdf, state.params)
    metrics = {"cameras": {}}
    maes = []
    for cam in eval_cams:
        view = render_camera(density, state.semantic, cam, bins, stride=stride)
        depth_gt, _, mask, _ = trace_camera(scene, cam, bins, stride=stride, extent=extent)
        if mask.any():
            mae = float(np.abs(view.depth - depth_gt)[mask].mean())
        else:
            mae = float("nan")
        metrics["cameras"][cam.name] = {"depth_mae": mae, "valid": int(mask.sum())}
        maes.append(mae)
    if maes:
        metrics["depth_mae_mean"] = float(np.nanmean(maes))

    ny, nx = dims[1], dims[0]
    bev_view = render_bev(density, state.semantic, nx, ny, dims[2])
    h_gt, _, h_mask = trace_bev(scene, extent, nx, ny)
    if h_mask.any():
        metrics["bev_height_mae"] = float(np.abs(bev_view.depth - h_gt)[h_mask].mean())

    def _object_mean(per_class):
        obj = np.asarray(per_class, dtype=np.float64)
        obj = np.delete(obj, scene.free_class)
        return float(np.nanmean(obj)) if np.any(np.isfinite(obj)) else 0.0

    pred = predict_occupancy(state.semantic, dims, extent)
    gt = occupancy_labels(scene, dims, extent)
    per_class, mean, counts = miou(pred, gt, scene.num_classes)
    metrics["occupancy"] = {
        "miou": mean,
        "miou_objects": _object_mean(per_class),
        "per_class_iou": per_class.tolist(),
    }
    if sdf_band is not None:
        true_sdf, _ = bake_sdf(scene, dims, extent)
        band_mask = np.abs(true_sdf.data[0]) > sdf_band
        per_class_b, mean_b, counts_b = miou(pred, gt, scene.num_classes, mask=band_mask)
        metrics["occupancy_banded"] = {
            "miou": mean_b,
            "miou_objects": _object_mean(per_class_b),
            "per_class_iou": per_class_b.tolist(),
            "band": sdf_band,
            "voxels": int(band_mask.sum()),
        }
    metrics["alpha"] = state.params.alpha
    metrics["beta"] = state.params.beta
    return metrics


def pipeline_smoke(
    scene: SceneSpec,
    cams: list,
    bins: DepthBins,
    dims,
    extent: Extent3,
    stride: int = 1,
    densify_iterations: int = 2,
) -> dict:
    """Non-learned end-to-end pass through lift/splat, densify, and heads.

    Camera features are ideal: a one-hot class vector per pixel placed at
    the depth bin nearest the traced ground-truth depth (rays that miss
    spread their unit mass uniformly).  The splatted volume is hole-filled
    and scored as occupancy against the baked labels.  This exercises the
    full pipeline shape; the numbers are diagnostics, not fit results.
    """
    from .splat import FeatureImage, densify_baseline, splat

    k = scene.num_classes
    z = sample_depths(bins)
    out = VoxelGrid.zeros(dims, k, extent)
    for cam in cams:
        depth, cls, mask, _ = trace_camera(scene, cam, bins, stride=stride, extent=extent)
        h, w = depth.shape
        features = np.zeros((k, h, w))
        rows, cols = np.nonzero(mask)
        features[cls[rows, cols], rows, cols] = 1.0
        dist = np.full((bins.count, h, w), 1.0 / bins.count)
        nearest = np.abs(depth[rows, cols][:, None] - z[None, :]).argmin(axis=1)
        dist[:, rows, cols] = 0.0
        dist[nearest, rows, cols] = 1.0
        img = FeatureImage(features=features, distribution=dist)
        splat(img, cam, bins, dims, extent, out=out)
    filled, _ = densify_baseline(out, densify_iterations)
    pred = predict_occupancy(filled, dims, extent)
    gt = occupancy_labels(scene, dims, extent)
    per_class, mean, _ = miou(pred, gt, k)
    return {
        "splat_mass": float(out.data.sum()),
        "filled_mass": float(filled.data.sum()),
        "occupancy": {"miou": mean, "per_class_iou": per_class.tolist()},
    }


def save_checkpoint(dir_path, state: FitState) -> None:
    """Write paired grid files plus the scalar parameters."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    write_grid(d / "sdf.vxg", state.sdf)
    write_grid(d / "semantic.vxg", state.semantic)
    doc = {
        "version": 1,
        "step": state.step,
        "log_alpha": state.params.log_alpha,
        "log_beta": state.params.log_beta,
        "alpha": state.params.alpha,
        "beta": state.params.beta,
    }
    with open(d / "params.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(dir_path) -> FitState:
    d = Path(dir_path)
    sdf = read_grid(d / "sdf.vxg")
    semantic = read_grid(d / "semantic.vxg")
    with open(d / "params.json") as fh:
        doc = json.load(fh)
    params = LaplaceParams(log_alpha=float(doc["log_alpha"]), log_beta=float(doc["log_beta"]))
    adam_m = {
        "sdf": np.zeros_like(sdf.data),
        "semantic": np.zeros_like(semantic.data),
        "log_alpha": np.zeros(()),
        "log_beta": np.zeros(()),
    }
    adam_v = {k: np.zeros_like(v) for k, v in adam_m.items()}
    return FitState(
        sdf=sdf, semantic=semantic, params=params,
        adam_m=adam_m, adam_v=adam_v, step=int(doc.get("step", 0)),
    )
