"""Package acceptance gate: nine go/no-go checks over the whole toolkit.

Each test prints exactly one ``[criterion N] PASS/FAIL`` line (run pytest
with ``-s`` to see them live).  Criteria 6 and 7 share three long fits of
the reference scene through a module-scoped fixture; everything else runs
in seconds.  Expected values follow the conventions recorded in the test
docstrings: independent scalar oracles are restated here rather than
imported from other test modules.
"""

import json
import time

import numpy as np
import pytest

import voxreg as vx
from voxreg.camera import CameraModel, DepthBins, look_at, save_rig
from voxreg.cli import main as cli_main
from voxreg.density import LaplaceParams, density_volume_from_sdf
from voxreg.fit import FitConfig, evaluate_fit, fit, init_state
from voxreg.formats import read_loss_csv
from voxreg.gradcheck import run_all
from voxreg.grid import Extent3, VoxelGrid, grid_sample
from voxreg.heads import miou, predict_occupancy
from voxreg.losses import lovasz_softmax
from voxreg.render import RaySampleBatch, composite, render_bev, render_camera
from voxreg.scenes import (
    bake_sdf,
    occupancy_labels,
    save_scene,
    trace_bev,
    trace_camera,
)
from voxreg.splat import FeatureImage, splat


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")


# ---------------------------------------------------------------------------
# independent scalar oracles, restated from first principles


def _scalar_composite(t, sigma, semantics=None, values=None):
    """One ray, one sample at a time: gaps, opacity, survival, weights."""
    t = [float(x) for x in t]
    n = len(t)
    gaps = [t[i + 1] - t[i] for i in range(n - 1)]
    tail = sum(gaps) / len(gaps) if gaps else 1.0
    gaps.append(tail)
    k = len(semantics[0]) if semantics is not None else 0
    surv = 1.0
    depth = 0.0
    wsum = 0.0
    sem = [0.0] * k
    for i in range(n):
        a = 1.0 - np.exp(-sigma[i] * gaps[i])
        w = surv * a
        v = values[i] if values is not None else t[i]
        depth += w * v
        wsum += w
        for c in range(k):
            sem[c] += w * semantics[i][c]
        surv *= 1.0 - a
    return depth, np.array(sem), wsum


def _jaccard_loss_of_sets(gt_set: set, err_set: set) -> float:
    kept = gt_set - err_set
    union = gt_set | err_set
    if not union:
        return 0.0
    return 1.0 - len(kept) / len(union)


def _lovasz_oracle(probs: np.ndarray, labels: np.ndarray) -> float:
    """Per present class: sort errors, evaluate the Jaccard loss on explicit
    prefix sets, and take the dot product with the consecutive differences."""
    n, k = probs.shape
    losses = []
    for c in np.unique(labels):
        fg = labels == c
        errors = np.where(fg, 1.0 - probs[:, c], probs[:, c])
        order = np.argsort(-errors, kind="stable")
        gt_set = set(np.nonzero(fg)[0].tolist())
        deltas = []
        prev = 0.0
        for m in range(1, n + 1):
            err_set = set(order[:m].tolist())
            jac = _jaccard_loss_of_sets(gt_set, err_set)
            deltas.append(jac - prev)
            prev = jac
        losses.append(float(np.dot(errors[order], deltas)))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# shared long fits (criteria 6 and 7)


def _banded_object_miou(state, scene, dims, extent, band=0.4):
    """Occupancy mIoU over |true distance| > band voxels, averaged over the
    non-free classes.

    Free space never receives positive class supervision from either view
    family (camera rays that miss are masked out; top-down rays always hit
    ground), so the free class is excluded from the mean, matching the
    common occupancy benchmark convention of scoring the object classes.
    """
    true_sdf, _ = bake_sdf(scene, dims, extent)
    mask = np.abs(true_sdf.data[0]) > band
    pred = predict_occupancy(state.semantic, dims, extent)
    gt = occupancy_labels(scene, dims, extent)
    per, _, _ = miou(pred, gt, scene.num_classes, mask=mask)
    obj = np.asarray(per, dtype=float)[1:]
    return float(np.nanmean(obj)) if np.any(np.isfinite(obj)) else 0.0


@pytest.fixture(scope="module")
def reference_fits():
    scene = vx.reference_scene()
    cams, bins = vx.reference_rig()
    dims, extent = vx.reference_grid()
    heldout = vx.heldout_camera()

    base = init_state(dims, extent, scene.num_classes, FitConfig())
    base_eval = evaluate_fit(base, scene, [heldout], bins, dims, extent, stride=2)
    out = {
        "base_mae": base_eval["depth_mae_mean"],
        "base_occ": _banded_object_miou(base, scene, dims, extent),
        "runs": {},
    }
    toggles = {
        "joint": {},
        "cam_only": {"bev_sup": False},
        "bev_only": {"camera_sup": False},
    }
    for tag, kw in toggles.items():
        cfg = FitConfig(
            steps=2000, stride=2, threads=1, precheck=False, seed=0, **kw
        )
        t0 = time.perf_counter()
        res = fit(scene, cams, bins, dims, extent, cfg)
        elapsed = time.perf_counter() - t0
        ev = evaluate_fit(res.state, scene, [heldout], bins, dims, extent, stride=2)
        out["runs"][tag] = {
            "totals": np.array([r["total"] for r in res.rows]),
            "elapsed": elapsed,
            "mae": ev["depth_mae_mean"],
            "occ": _banded_object_miou(res.state, scene, dims, extent),
        }
    return out


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_all(seed=0)
    elapsed = time.perf_counter() - t0
    isolated = ("psi_beta", "grid_sample_adjoint", "composite", "losses")
    checks = [results[name]["max_rel_err"] < 1e-5 for name in isolated]
    checks.append(results["end_to_end"]["max_rel_err"] < 1e-4)
    checks.append(all(r["ok"] for r in results.values()))
    checks.append(elapsed < 60.0)
    worst_iso = max(results[name]["max_rel_err"] for name in isolated)
    ok = all(checks)
    _report(
        1,
        ok,
        f"isolated suites max {worst_iso:.2e} < 1e-5, "
        f"end-to-end {results['end_to_end']['max_rel_err']:.2e} < 1e-4, "
        f"{elapsed:.1f} s < 60 s",
    )
    assert ok


def test_criterion_2_composite_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    rays = 0
    for n in range(1, 17):
        count = 625
        rays += count
        gaps = rng.uniform(1e-2, 0.8, (count, n))
        t = 0.1 + np.cumsum(gaps, axis=1)
        sigma = rng.uniform(0.0, 4.0, (count, n))
        sem = rng.normal(0.0, 1.0, (count, n, 3))
        out = composite(RaySampleBatch(t=t, density=sigma, semantics=sem))
        for r in range(count):
            d, s, w = _scalar_composite(t[r], sigma[r], sem[r])
            worst = max(
                worst,
                abs(out.depth[r] - d),
                float(np.abs(out.semantics[r] - s).max()),
                abs(out.weight_sum[r] - w),
            )

    # two-sample hand example: w1 = 1 - 1/e, w2 = (1/e)(1 - 1/e),
    # D = 0.5 w1 + 1.5 w2 and W = 1 - 1/e^2 in closed form
    hand_d, _, hand_w = _scalar_composite([0.5, 1.5], [1.0, 1.0], [[0.0], [0.0]])
    assert abs(hand_d - 0.6648765163165233) < 1e-12
    assert abs(hand_w - 0.8646647167633873) < 1e-12
    out = composite(
        RaySampleBatch(
            t=np.array([[0.5, 1.5]]),
            density=np.array([[1.0, 1.0]]),
            semantics=np.zeros((1, 2, 1)),
        )
    )
    d_err = abs(out.depth[0] - hand_d)
    w_err = abs(out.weight_sum[0] - hand_w)
    # six-digit roundings of the closed forms land within 1e-4 / 1e-6
    rounded_d = abs(out.depth[0] - 0.664903)
    rounded_w = abs(out.weight_sum[0] - 0.864665)
    ok = (
        worst < 1e-12
        and d_err < 1e-6
        and w_err < 1e-6
        and rounded_d < 1e-4
        and rounded_w < 1e-6
    )
    _report(
        2,
        ok,
        f"{rays} rays vs scalar oracle max {worst:.2e} < 1e-12, "
        f"hand example D err {d_err:.2e}, W err {w_err:.2e} < 1e-6",
    )
    assert ok


def test_criterion_3_weight_invariants():
    rng = np.random.default_rng(1)
    worst_id = 0.0
    worst_sum = 0.0
    worst_mono = 0.0
    rays = 0
    for n in (1, 2, 4, 8, 16):
        count = 2000
        rays += count
        gaps = rng.uniform(1e-2, 0.8, (count, n))
        t = 0.1 + np.cumsum(gaps, axis=1)
        sigma = rng.uniform(0.0, 6.0, (count, n))
        out = composite(RaySampleBatch(t=t, density=sigma, semantics=np.zeros((count, n, 1))))
        alt = 1.0 - np.prod(1.0 - out.opacity, axis=1)
        worst_id = max(worst_id, float(np.abs(out.weight_sum - alt).max()))
        worst_sum = max(worst_sum, float(out.weight_sum.max()) - 1.0)
        if n > 1:
            worst_mono = max(
                worst_mono, float(np.diff(out.transmittance, axis=1).max())
            )
    ok = worst_id < 1e-9 and worst_sum <= 1e-12 and worst_mono <= 1e-15
    _report(
        3,
        ok,
        f"{rays} rays: |sum(w) - (1 - prod(1-a))| max {worst_id:.2e} < 1e-9, "
        f"sum(w) <= 1 (excess {max(worst_sum, 0.0):.1e}), "
        f"transmittance non-increasing (max rise {max(worst_mono, 0.0):.1e})",
    )
    assert ok


def test_criterion_4_splat_adjointness_and_mass():
    rng = np.random.default_rng(2)
    dims = (6, 5, 7)
    extent = Extent3(min=(-3.0, -2.5, 0.0), max=(3.0, 2.5, 7.0))
    bins = DepthBins(near=0.5, far=7.0, count=4)
    from voxreg.camera import sample_depths
    from voxreg.splat import image_pixel_centers

    worst = 0.0
    for _ in range(100):
        w, h = int(rng.integers(3, 7)), int(rng.integers(3, 6))
        cam = CameraModel(
            fx=float(rng.uniform(4.0, 9.0)),
            fy=float(rng.uniform(4.0, 9.0)),
            cx=(w - 1) / 2 + float(rng.uniform(-0.3, 0.3)),
            cy=(h - 1) / 2 + float(rng.uniform(-0.3, 0.3)),
            width=w,
            height=h,
            rotation=np.eye(3),
            translation=rng.uniform(-0.5, 0.5, 3) + np.array([0.0, 0.0, 0.2]),
        )
        feats = rng.normal(size=(2, h, w))
        dist = rng.random(size=(bins.count, h, w))
        dist /= dist.sum(axis=0, keepdims=True)
        img = FeatureImage(features=feats, distribution=dist)
        grid = splat(img, cam, bins, dims, extent)

        test_vol = VoxelGrid(
            dims=dims,
            channels=2,
            extent=extent,
            data=rng.normal(size=(2, dims[2], dims[1], dims[0])),
        )
        lhs = float((grid.data * test_vol.data).sum())

        z = sample_depths(bins)
        us = image_pixel_centers(w, cam.width)
        vs = image_pixel_centers(h, cam.height)
        rhs = 0.0
        from voxreg.camera import back_project

        for r in range(h):
            for c in range(w):
                pts = back_project(
                    cam, np.full(bins.count, us[c]), np.full(bins.count, vs[r]), z
                )
                sampled = grid_sample(test_vol, pts)
                for b in range(bins.count):
                    rhs += float(
                        dist[b, r, c] * (feats[:, r, c] * sampled[b]).sum()
                    )
        denom = max(abs(lhs), abs(rhs), 1.0)
        worst = max(worst, abs(lhs - rhs) / denom)

    # interior support: a camera whose whole frustum lands inside the grid
    # conserves per-channel feature mass
    cam = CameraModel(
        fx=8.0, fy=8.0, cx=3.5, cy=2.5, width=8, height=6,
        rotation=np.eye(3), translation=np.array([0.0, 0.0, 0.5]),
    )
    mass_bins = DepthBins(near=1.0, far=5.0, count=5)
    rng2 = np.random.default_rng(3)
    feats = rng2.random(size=(2, 6, 8))
    dist = rng2.random(size=(mass_bins.count, 6, 8))
    dist /= dist.sum(axis=0, keepdims=True)
    grid = splat(
        FeatureImage(features=feats, distribution=dist),
        cam,
        mass_bins,
        (16, 16, 16),
        Extent3(min=(-4.0, -4.0, 0.0), max=(4.0, 4.0, 8.0)),
    )
    mass_err = float(
        np.abs(grid.data.sum(axis=(1, 2, 3)) - feats.sum(axis=(1, 2))).max()
    )
    ok = worst < 1e-9 and mass_err < 1e-9
    _report(
        4,
        ok,
        f"adjoint identity over 100 cases max {worst:.2e} < 1e-9, "
        f"interior mass error {mass_err:.2e} < 1e-9",
    )
    assert ok


def test_criterion_5_ground_truth_self_consistency():
    t0 = time.perf_counter()
    scene = vx.reference_scene()
    cams, bins = vx.reference_rig()
    dims, extent = vx.reference_grid()
    assert bins.near == 2.0 and bins.far == 70.4 and bins.count == 86
    vs = (np.asarray(extent.max) - np.asarray(extent.min)) / np.asarray(dims)
    np.testing.assert_allclose(vs, 0.4)

    sdf, sem = bake_sdf(scene, dims, extent)
    density = density_volume_from_sdf(sdf, LaplaceParams.from_values(10.0, 0.1))
    cam_maes = []
    for cam in cams:
        view = render_camera(density, sem, cam, bins, stride=1)
        depth_gt, _, mask, _ = trace_camera(scene, cam, bins, stride=1, extent=extent)
        cam_maes.append(float(np.abs(view.depth - depth_gt)[mask].mean()))
    bev = render_bev(density, sem, dims[0], dims[1], dims[2])
    h_gt, _, h_mask = trace_bev(scene, extent, dims[0], dims[1])
    bev_mae = float(np.abs(bev.depth - h_gt)[h_mask].mean())
    elapsed = time.perf_counter() - t0
    ok = max(cam_maes) < 1.0 and bev_mae < 0.4 and elapsed < 120.0
    _report(
        5,
        ok,
        f"camera depth MAE max {max(cam_maes):.3f} m < 1.0, "
        f"BEV height MAE {bev_mae:.3f} m < 0.4, {elapsed:.1f} s < 120 s",
    )
    assert ok


def test_criterion_6_regulator_fit(reference_fits):
    """2000-step joint fit from zero init on the reference scene.

    The pinned final mIoU (0.4132) comes from the first validated run of
    this exact configuration (stride-2 supervision, seed 0, single thread)
    and is regression-checked within +/-0.02.
    """
    run = reference_fits["runs"]["joint"]
    windows = run["totals"].reshape(10, 200).mean(axis=1)
    monotone = bool(np.all(np.diff(windows) < 0.0))
    ratio = reference_fits["base_mae"] / run["mae"]
    gain = run["occ"] - reference_fits["base_occ"]
    pinned = abs(run["occ"] - 0.4132) <= 0.02
    ok = (
        monotone
        and ratio >= 5.0
        and gain >= 0.3
        and pinned
        and run["elapsed"] < 900.0
    )
    _report(
        6,
        ok,
        f"200-step windows strictly decrease ({monotone}), "
        f"held-out depth MAE {reference_fits['base_mae']:.3f} -> {run['mae']:.3f} "
        f"({ratio:.2f}x >= 5x), banded object mIoU "
        f"{reference_fits['base_occ']:.4f} -> {run['occ']:.4f} "
        f"(+{gain:.4f} >= 0.3, pinned 0.4132 +/- 0.02), "
        f"{run['elapsed'] / 60:.1f} min < 15 min",
    )
    assert ok


def test_criterion_7_supervision_ablation(reference_fits):
    joint = reference_fits["runs"]["joint"]["occ"]
    cam_only = reference_fits["runs"]["cam_only"]["occ"]
    bev_only = reference_fits["runs"]["bev_only"]["occ"]
    floor = max(cam_only, bev_only) - 0.02
    ok = joint >= floor
    _report(
        7,
        ok,
        f"joint {joint:.4f} >= max(camera-only {cam_only:.4f}, "
        f"top-down-only {bev_only:.4f}) - 0.02 = {floor:.4f}",
    )
    assert ok


def test_criterion_8_lovasz_brute_force():
    rng = np.random.default_rng(4)
    logits = rng.normal(0.0, 1.5, (6, 3))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    worst = 0.0
    count = 0
    for code in range(3**6):
        labels = np.array([(code // 3**i) % 3 for i in range(6)])
        got, _ = lovasz_softmax(probs, labels)
        want = _lovasz_oracle(probs, labels)
        worst = max(worst, abs(got - want))
        count += 1
    ok = worst < 1e-12 and count == 729
    _report(
        8,
        ok,
        f"all {count} label assignments (6 pixels, 3 classes) "
        f"max |loss - oracle| {worst:.2e} < 1e-12",
    )
    assert ok


def test_criterion_9_thread_determinism(tmp_path):
    """fit subcommand, fixed seed, --threads 1 vs 8.

    The camera is 80x60 at stride 1 so one view spans multiple ray chunks
    and the worker pool actually runs.
    """
    scene = vx.SceneSpec(
        primitives=[
            vx.GroundPlane(z=0.0, cls=1),
            vx.Sphere(center=(3.0, 0.0, 1.0), radius=1.0, cls=2),
        ],
        num_classes=3,
        free_class=0,
        class_names=["free", "ground", "sphere"],
    )
    rot, trans = look_at((-1.5, 0.0, 2.5), (3.0, 0.0, 0.5))
    cam = CameraModel(
        fx=40.0, fy=40.0, cx=39.5, cy=29.5, width=80, height=60,
        rotation=rot, translation=trans, name="c0",
    )
    bins = DepthBins(near=1.0, far=12.0, count=16)
    scene_path = tmp_path / "scene.json"
    rig_path = tmp_path / "rig.json"
    save_scene(scene_path, scene)
    save_rig(rig_path, [cam], bins)

    logs = []
    for threads in ("1", "8"):
        out = tmp_path / f"t{threads}"
        code = cli_main(
            ["fit", "--scene", str(scene_path), "--rig", str(rig_path),
             "--out", str(out), "--dims=16,16,8", "--extent=-2,-4,-0.5,6,4,3.5",
             "--steps", "30", "--stride", "1", "--seed", "0",
             "--threads", threads, "--skip-precheck", "--log-every", "0"]
        )
        assert code == 0
        rows = read_loss_csv(out / "loss.csv")
        logs.append(np.array([r["total"] for r in rows]))
    diff = float(np.abs(logs[0] - logs[1]).max())
    ok = len(logs[0]) == 30 and diff < 1e-9
    _report(
        9,
        ok,
        f"fit subcommand loss logs, seed 0, threads 1 vs 8: "
        f"max |difference| {diff:.2e} < 1e-9 over {len(logs[0])} steps",
    )
    assert ok
