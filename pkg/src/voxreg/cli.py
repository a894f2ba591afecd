"""Command-line surface tying the library into runnable experiments.

Subcommands: gen-scene, render, splat, densify, fit, eval-occ, grad-check,
bench.  Options can come from a JSON config file (--config) with explicit
flags winning over config values, which win over built-in defaults.

Exit codes:
  0  success
  2  bad input: missing file, malformed JSON (reported with line info),
     unparsable flag values
  3  grid/extent mismatch between volumes that must share geometry
  4  non-finite loss during fitting (the last finite checkpoint is saved)
  5  gradient-check threshold violation
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .camera import DepthBins, load_rig, save_rig
from .density import LaplaceParams, density_volume_from_sdf
from .fit import (
    FitConfig,
    FitDiverged,
    evaluate_fit,
    fit,
    load_checkpoint,
    pipeline_smoke,
    save_checkpoint,
)
from .formats import (
    read_feature_image,
    read_grid,
    read_occupancy,
    miou_report,
    write_class_png,
    write_grid,
    write_loss_csv,
    write_mask_png,
    write_metrics_json,
    write_occupancy,
    write_pfm,
)
from .grid import Extent3, VoxelGrid
from .heads import miou, predict_occupancy
from .render import render_bev, render_camera
from .scenes import (
    bake_sdf,
    heldout_camera,
    make_supervision,
    reference_grid,
    reference_rig,
    reference_scene,
    save_scene,
)
from .splat import FeatureImage, densify_baseline, splat


def _fail(code: int, msg: str):
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(code)


def _load_json(path):
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        _fail(2, f"missing file: {p}")
    except OSError as e:
        _fail(2, f"cannot read {p}: {e}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        _fail(2, f"malformed JSON in {p}: {e.msg} at line {e.lineno} column {e.colno}")


def _load_scene_file(path):
    doc = _load_json(path)
    from .scenes import scene_from_json

    try:
        return scene_from_json(doc)
    except (ValueError, KeyError, TypeError) as e:
        _fail(2, f"bad scene file {path}: {e}")


def _load_rig_file(path):
    try:
        return load_rig(path)
    except FileNotFoundError:
        _fail(2, f"missing file: {path}")
    except json.JSONDecodeError as e:
        _fail(2, f"malformed JSON in {path}: {e.msg} at line {e.lineno} column {e.colno}")
    except (ValueError, KeyError, TypeError) as e:
        _fail(2, f"bad rig file {path}: {e}")


def _read_grid_file(path):
    try:
        return read_grid(path)
    except FileNotFoundError:
        _fail(2, f"missing file: {path}")
    except ValueError as e:
        _fail(2, f"bad grid file {path}: {e}")


def _parse_dims(s: str) -> tuple:
    parts = str(s).split(",")
    if len(parts) != 3:
        _fail(2, f"dims must be nx,ny,nz (got {s!r})")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        _fail(2, f"dims must be integers (got {s!r})")
    if any(d <= 0 for d in dims):
        _fail(2, f"dims must be positive (got {s!r})")
    return dims


def _parse_extent(s: str) -> Extent3:
    parts = str(s).split(",")
    if len(parts) != 6:
        _fail(2, f"extent must be xmin,ymin,zmin,xmax,ymax,zmax (got {s!r})")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        _fail(2, f"extent must be numbers (got {s!r})")
    try:
        return Extent3(min=vals[:3], max=vals[3:])
    except ValueError as e:
        _fail(2, f"bad extent: {e}")


def _resolve_threads(flag_value) -> int:
    if flag_value is not None:
        return max(1, int(flag_value))
    env = os.environ.get("VOXREG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            _fail(2, f"VOXREG_THREADS must be an integer (got {env!r})")
    return 1


class _Options:
    """flag > config > default lookup for one subcommand invocation."""

    def __init__(self, args):
        self.args = args
        self.cfg = _load_json(args.config) if getattr(args, "config", None) else {}
        if not isinstance(self.cfg, dict):
            _fail(2, f"config root must be a JSON object: {args.config}")

    def get(self, key: str, default=None, cast=None):
        flag = getattr(self.args, key.replace("-", "_"), None)
        value = flag if flag is not None else self.cfg.get(key, default)
        if value is None:
            return None
        if cast is not None:
            try:
                return cast(value)
            except (TypeError, ValueError):
                _fail(2, f"bad value for {key}: {value!r}")
        return value

    def geometry(self):
        ref_dims, ref_extent = reference_grid()
        dims = self.get("dims")
        extent = self.get("extent")
        dims = ref_dims if dims is None else _parse_dims(dims)
        if extent is None:
            ext = ref_extent
        elif isinstance(extent, (list, tuple)):
            ext = _parse_extent(",".join(str(v) for v in extent))
        else:
            ext = _parse_extent(extent)
        return dims, ext

    def scene(self):
        path = self.get("scene")
        return reference_scene() if path is None else _load_scene_file(path)

    def rig(self):
        path = self.get("rig")
        return reference_rig() if path is None else _load_rig_file(path)


def _onoff(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    _fail(2, f"expected on|off (got {value!r})")


def _out_dir(opts) -> Path:
    out = Path(opts.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_scene(args) -> int:
    opts = _Options(args)
    scene = opts.scene()
    cams, bins = opts.rig()
    dims, extent = opts.geometry()
    stride = opts.get("stride", 1, int)
    lidar_rate = opts.get("lidar-rate", 1.0, float)
    seed = opts.get("seed", 0, int)
    out = _out_dir(opts)

    try:
        bundle = make_supervision(
            scene, cams, bins, dims, extent,
            stride=stride, lidar_rate=lidar_rate, seed=seed,
        )
    except ValueError as e:
        _fail(2, str(e))
    for i, cam in enumerate(cams):
        write_pfm(out / f"{cam.name}_depth.pfm", bundle.cam_depth[i])
        write_class_png(out / f"{cam.name}_class.png", bundle.cam_class[i])
        write_mask_png(out / f"{cam.name}_mask.png", bundle.cam_mask[i])
    write_pfm(out / "bev_height.pfm", bundle.bev_height)
    write_class_png(out / "bev_class.png", bundle.bev_class)
    write_mask_png(out / "bev_mask.png", bundle.bev_mask)
    write_occupancy(out / "occupancy.vxg", bundle.occupancy)
    sdf, sem = bake_sdf(scene, dims, extent)
    write_grid(out / "sdf.vxg", sdf)
    write_grid(out / "semantic.vxg", sem)
    save_scene(out / "scene.json", scene)
    save_rig(out / "rig.json", cams, bins)
    print(f"wrote supervision for {len(cams)} cameras + BEV to {out}")
    print(f"grid {dims[0]}x{dims[1]}x{dims[2]}, {int(bundle.points.shape[0])} labeled points")
    return 0


def _load_volumes(opts):
    """sdf+params or direct density, plus the semantic grid."""
    sem = _read_grid_file(opts.get("semantic", "semantic.vxg"))
    density_path = opts.get("density")
    if density_path is not None:
        density = _read_grid_file(density_path)
    else:
        sdf = _read_grid_file(opts.get("sdf", "sdf.vxg"))
        params_path = opts.get("params")
        if params_path is not None:
            doc = _load_json(params_path)
            try:
                params = LaplaceParams(
                    log_alpha=float(doc["log_alpha"]), log_beta=float(doc["log_beta"])
                )
            except (KeyError, TypeError, ValueError) as e:
                _fail(2, f"bad params file {params_path}: {e}")
        else:
            params = LaplaceParams.from_values(
                opts.get("alpha", 10.0, float), opts.get("beta", 0.1, float)
            )
        if sdf.channels != 1:
            _fail(2, "distance grid must have exactly one channel")
        density = density_volume_from_sdf(sdf, params)
    if density.channels != 1:
        _fail(3, "density grid must have exactly one channel")
    if not density.same_geometry(sem) or density.extent != sem.extent:
        _fail(3, "density and semantic grids must share dims and extent")
    return density, sem


def cmd_render(args) -> int:
    opts = _Options(args)
    density, sem = _load_volumes(opts)
    cams, bins = opts.rig()
    stride = opts.get("stride", 1, int)
    out = _out_dir(opts)
    for cam in cams:
        try:
            view = render_camera(density, sem, cam, bins, stride=stride)
        except ValueError as e:
            _fail(3, str(e))
        write_pfm(out / f"{cam.name}_depth.pfm", view.depth)
        write_class_png(out / f"{cam.name}_class.png", view.semantics.argmax(axis=2))
        write_pfm(out / f"{cam.name}_wsum.pfm", view.weight_sum)
    nx, ny, nz = density.dims
    bev = render_bev(density, sem, nx, ny, nz)
    write_pfm(out / "bev_height.pfm", bev.depth)
    write_class_png(out / "bev_class.png", bev.semantics.argmax(axis=2))
    write_pfm(out / "bev_wsum.pfm", bev.weight_sum)
    print(f"rendered {len(cams)} cameras + BEV to {out}")
    return 0


def cmd_splat(args) -> int:
    opts = _Options(args)
    cams, bins = opts.rig()
    dims, extent = opts.geometry()
    paths = args.features
    if len(paths) != len(cams):
        _fail(2, f"{len(paths)} feature images for {len(cams)} cameras")
    out_grid = None
    for path, cam in zip(paths, cams):
        try:
            features, dist = read_feature_image(path)
            img = FeatureImage(features=features, distribution=dist)
        except FileNotFoundError:
            _fail(2, f"missing file: {path}")
        except ValueError as e:
            _fail(2, f"bad feature image {path}: {e}")
        if out_grid is None:
            out_grid = VoxelGrid.zeros(dims, img.channels, extent)
        elif img.channels != out_grid.channels:
            _fail(3, "feature images disagree on channel count")
        splat(img, cam, bins, dims, extent, out=out_grid)
    out = _out_dir(opts)
    write_grid(out / "splat.vxg", out_grid)
    print(f"splatted {len(paths)} views into {out / 'splat.vxg'} "
          f"(mass {out_grid.data.sum():.6g})")
    return 0


def cmd_densify(args) -> int:
    opts = _Options(args)
    grid = _read_grid_file(args.grid)
    iterations = opts.get("iterations", 2, int)
    filled, mask = densify_baseline(grid, iterations)
    out = _out_dir(opts)
    write_grid(out / "densified.vxg", filled)
    print(f"filled {int(mask.sum())} of {mask.size} voxels after {iterations} iterations")
    return 0


def cmd_fit(args) -> int:
    opts = _Options(args)
    scene = opts.scene()
    cams, bins = opts.rig()
    dims, extent = opts.geometry()
    out = _out_dir(opts)
    mode = opts.get("mode", "grid")
    if mode == "smoke":
        metrics = pipeline_smoke(
            scene, cams, bins, dims, extent,
            stride=opts.get("stride", 4, int),
            densify_iterations=opts.get("iterations", 2, int),
        )
        write_metrics_json(out / "metrics.json", metrics)
        print(f"pipeline smoke mIoU {metrics['occupancy']['miou']:.4f}")
        return 0
    if mode != "grid":
        _fail(2, f"unknown fit mode {mode!r} (grid or smoke)")

    cfg = FitConfig(
        steps=opts.get("steps", 2000, int),
        lr=opts.get("lr", 2e-4, float),
        weight_decay=opts.get("weight-decay", 1e-7, float),
        lambda_depth=opts.get("lambda-depth", 1.0, float),
        lambda_semantic=opts.get("lambda-semantic", 1.0, float),
        use_depth=_onoff(opts.get("depth-loss", "on")),
        use_semantic=_onoff(opts.get("sem-loss", "on")),
        camera_sup=_onoff(opts.get("camera-sup", "on")),
        bev_sup=_onoff(opts.get("bev-sup", "on")),
        stride=opts.get("stride", 4, int),
        lidar_rate=opts.get("lidar-rate", 1.0, float),
        seed=opts.get("seed", 0, int),
        renormalize=bool(opts.get("renormalize", False)),
        threads=_resolve_threads(opts.get("threads")),
        precheck=not bool(opts.get("skip-precheck", False)),
        alpha_init=opts.get("alpha", 10.0, float),
        beta_init=opts.get("beta", 0.1, float),
    )
    if cfg.steps < 0 or cfg.lr < 0 or cfg.weight_decay < 0:
        _fail(2, "steps, lr, and weight decay must be non-negative")
    log_every = opts.get("log-every", 100, int)

    def on_step(row):
        if log_every > 0 and row["step"] % log_every == 0:
            print(
                f"step {row['step']:5d}  total {row['total']:.6f}  "
                f"dep {row['dep_cam'] + row['dep_bev']:.6f}  "
                f"sem {row['sem_cam'] + row['sem_bev']:.6f}",
                flush=True,
            )

    try:
        result = fit(scene, cams, bins, dims, extent, cfg, on_step=on_step)
    except FitDiverged as e:
        save_checkpoint(out / "checkpoint", e.last_good)
        write_loss_csv(out / "loss.csv", e.rows)
        _fail(4, f"{e}; last finite checkpoint written to {out / 'checkpoint'}")
    except (ValueError, RuntimeError) as e:
        _fail(2, str(e))

    save_checkpoint(out / "checkpoint", result.state)
    write_loss_csv(out / "loss.csv", result.rows)
    eval_cams = [heldout_camera()] if opts.get("heldout", True) else cams
    metrics = evaluate_fit(
        result.state, scene, eval_cams, bins, dims, extent,
        stride=opts.get("eval-stride", 4, int),
        sdf_band=opts.get("band", None, float),
    )
    metrics["final_loss"] = result.rows[-1]["total"] if result.rows else None
    write_metrics_json(out / "metrics.json", metrics)
    print(f"fit finished after {len(result.rows)} steps; outputs in {out}")
    if "depth_mae_mean" in metrics:
        print(f"held-out depth MAE {metrics['depth_mae_mean']:.4f} m")
    print(f"occupancy mIoU {metrics['occupancy']['miou']:.4f}")
    return 0


def cmd_eval_occ(args) -> int:
    opts = _Options(args)
    try:
        gt = read_occupancy(args.gt)
    except FileNotFoundError:
        _fail(2, f"missing file: {args.gt}")
    except ValueError as e:
        _fail(2, f"bad occupancy file {args.gt}: {e}")
    if args.pred is not None:
        try:
            pred = read_occupancy(args.pred)
        except FileNotFoundError:
            _fail(2, f"missing file: {args.pred}")
        except ValueError as e:
            _fail(2, f"bad occupancy file {args.pred}: {e}")
    elif args.semantic is not None:
        sem = _read_grid_file(args.semantic)
        pred = predict_occupancy(sem, gt.dims, gt.extent)
    else:
        _fail(2, "provide --pred or --semantic")
    if pred.classes.shape != gt.classes.shape:
        _fail(3, "prediction and ground-truth grids have different shapes")
    num_classes = opts.get("num-classes", int(max(pred.classes.max(), gt.classes.max())) + 1, int)
    per_class, mean, counts = miou(pred, gt, num_classes)
    report = miou_report(per_class, mean, counts)
    out = opts.get("out")
    if out is not None:
        write_metrics_json(Path(out), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_all

    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()
    results = run_all(seed)
    elapsed = time.perf_counter() - t0
    ok = True
    for name, r in results.items():
        status = "PASS" if r["ok"] else "FAIL"
        print(f"{name:22s} max rel err {r['max_rel_err']:.3e}  "
              f"threshold {r['threshold']:.0e}  {status}")
        ok = ok and r["ok"]
    print(f"total {elapsed:.1f} s")
    if not ok:
        _fail(5, "gradient check exceeded threshold")
    return 0


def cmd_bench(args) -> int:
    opts = _Options(args)
    scene = opts.scene()
    cams, bins = opts.rig()
    dims, extent = opts.geometry()
    threads = _resolve_threads(opts.get("threads"))
    steps = opts.get("steps", 5, int)

    from .fit import build_plan, fit_step, init_state, _filtered_supervision
    from .fit import FitConfig as _FC

    t0 = time.perf_counter()
    sdf, sem = bake_sdf(scene, dims, extent)
    print(f"bake_sdf            {time.perf_counter() - t0:8.3f} s")

    params = LaplaceParams.from_values()
    density = density_volume_from_sdf(sdf, params)
    t0 = time.perf_counter()
    render_camera(density, sem, cams[0], bins, stride=1)
    print(f"render 64x48 full   {time.perf_counter() - t0:8.3f} s")

    cfg = _FC(stride=4, threads=threads, precheck=False, seed=0)
    bundle = make_supervision(scene, cams, bins, dims, extent, stride=4, seed=0)
    sup = _filtered_supervision(bundle, cfg)
    t0 = time.perf_counter()
    plan = build_plan(cams, bins, dims, extent, stride=4)
    print(f"build_plan          {time.perf_counter() - t0:8.3f} s")

    state = init_state(dims, extent, scene.num_classes, cfg)
    t0 = time.perf_counter()
    for _ in range(steps):
        fit_step(state, plan, sup, cfg)
    per = (time.perf_counter() - t0) / max(1, steps)
    print(f"fit_step (x{steps})     {per:8.3f} s/step  (threads={threads})")
    print(f"projected 2000 steps: {per * 2000 / 60:.1f} min")
    return 0


def _add_common(p: argparse.ArgumentParser, geometry=True, rig=True, scene=False):
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    if geometry:
        p.add_argument("--dims", help="grid dims as nx,ny,nz")
        p.add_argument("--extent", help="extent as xmin,ymin,zmin,xmax,ymax,zmax")
    if rig:
        p.add_argument("--rig", help="camera rig JSON (default: built-in reference rig)")
    if scene:
        p.add_argument("--scene", help="scene JSON (default: built-in reference scene)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="voxreg",
        description="Differentiable voxel volume rendering and feature regulation toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="trace ground-truth supervision and baked grids")
    _add_common(p, scene=True)
    p.add_argument("--stride", type=int, help="camera pixel stride (default 1)")
    p.add_argument("--lidar-rate", type=float, help="valid-pixel keep probability (default 1.0)")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("render", help="render depth/semantic/weight maps from grids")
    _add_common(p)
    p.add_argument("--sdf", help="distance grid .vxg (default sdf.vxg)")
    p.add_argument("--semantic", help="semantic grid .vxg (default semantic.vxg)")
    p.add_argument("--density", help="render this density grid directly instead of --sdf")
    p.add_argument("--params", help="JSON with log_alpha/log_beta (checkpoint params.json)")
    p.add_argument("--alpha", type=float, help="density scale when --params absent (default 10)")
    p.add_argument("--beta", type=float, help="density sharpness when --params absent (default 0.1)")
    p.add_argument("--stride", type=int, help="pixel stride (default 1)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("splat", help="splat per-camera feature images into a voxel grid")
    _add_common(p)
    p.add_argument("features", nargs="+", help="one .vxf feature image per rig camera, in order")
    p.set_defaults(func=cmd_splat)

    p = sub.add_parser("densify", help="neighbor-mean hole filling on a voxel grid")
    _add_common(p, geometry=False, rig=False)
    p.add_argument("--grid", required=True, help="input .vxg grid")
    p.add_argument("--iterations", type=int, help="fill passes (default 2)")
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("fit", help="fit distance+semantic volumes to rendered supervision")
    _add_common(p, scene=True)
    p.add_argument("--mode", choices=["grid", "smoke"],
                   help="grid: optimize volumes; smoke: splat->densify->heads pass")
    p.add_argument("--steps", type=int, help="optimizer steps (default 2000)")
    p.add_argument("--lr", type=float, help="learning rate (default 2e-4)")
    p.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 1e-7)")
    p.add_argument("--lambda-depth", type=float, help="depth loss weight (default 1)")
    p.add_argument("--lambda-semantic", type=float, help="semantic loss weight (default 1)")
    p.add_argument("--depth-loss", help="on|off (default on)")
    p.add_argument("--sem-loss", help="on|off (default on)")
    p.add_argument("--camera-sup", help="on|off camera supervision views (default on)")
    p.add_argument("--bev-sup", help="on|off top-down supervision view (default on)")
    p.add_argument("--stride", type=int, help="camera pixel stride during fitting (default 4)")
    p.add_argument("--eval-stride", type=int, help="pixel stride for final metrics (default 4)")
    p.add_argument("--lidar-rate", type=float, help="supervision keep probability (default 1)")
    p.add_argument("--renormalize", action="store_true", default=None,
                   help="divide rendered class accumulations by the weight sum")
    p.add_argument("--alpha", type=float, help="initial density scale (default 10)")
    p.add_argument("--beta", type=float, help="initial density sharpness (default 0.1)")
    p.add_argument("--threads", type=int, help="worker threads (default: VOXREG_THREADS or 1)")
    p.add_argument("--skip-precheck", action="store_true", default=None,
                   help="skip the gradient precheck before fitting")
    p.add_argument("--iterations", type=int, help="densify passes in smoke mode (default 2)")
    p.add_argument("--band", type=float, help="also score occupancy on |distance| > band voxels")
    p.add_argument("--log-every", type=int, help="print a loss line every N steps (default 100)")
    p.add_argument("--no-heldout", dest="heldout", action="store_false", default=None,
                   help="evaluate depth on the training cameras instead of the held-out pose")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval-occ", help="mIoU report between occupancy grids")
    _add_common(p, geometry=False, rig=False)
    p.add_argument("--pred", help="predicted occupancy .vxg")
    p.add_argument("--semantic", help="or: semantic grid .vxg to argmax at GT voxel centers")
    p.add_argument("--gt", required=True, help="ground-truth occupancy .vxg")
    p.add_argument("--num-classes", type=int, help="class count (default: inferred)")
    p.set_defaults(func=cmd_eval_occ)

    p = sub.add_parser("grad-check", help="finite-difference verification of all gradients")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench", help="time rendering and fit steps on the reference setup")
    _add_common(p, scene=True)
    p.add_argument("--steps", type=int, help="fit steps to time (default 5)")
    p.add_argument("--threads", type=int, help="worker threads (default: VOXREG_THREADS or 1)")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    raise SystemExit(main())
