"""Command-line tests: exit codes, output files, idempotence, option
precedence, and thread determinism, all through the argparse entry point.
"""

import json

import numpy as np
import pytest

import voxreg as vx
from voxreg.camera import CameraModel, DepthBins, look_at, save_rig
from voxreg.cli import main
from voxreg.formats import (
    read_grid,
    read_loss_csv,
    write_feature_image,
    write_grid,
)
from voxreg.grid import Extent3, VoxelGrid
from voxreg.scenes import save_scene


@pytest.fixture
def small_setup(tmp_path):
    scene = vx.SceneSpec(
        primitives=[
            vx.GroundPlane(z=0.0, cls=1),
            vx.Sphere(center=(3.0, 0.0, 1.0), radius=1.0, cls=2),
        ],
        num_classes=3,
        free_class=0,
        class_names=["free", "ground", "sphere"],
    )
    cams = []
    for name, eye in (("c0", (-1.0, 0.0, 2.0)), ("c1", (-1.0, 1.5, 2.0))):
        rot, trans = look_at(eye, (3.0, 0.0, 0.5))
        cams.append(
            CameraModel(
                fx=8.0, fy=8.0, cx=7.5, cy=5.5, width=16, height=12,
                rotation=rot, translation=trans, name=name,
            )
        )
    bins = DepthBins(near=1.0, far=10.0, count=12)
    scene_path = tmp_path / "scene.json"
    rig_path = tmp_path / "rig.json"
    save_scene(scene_path, scene)
    save_rig(rig_path, cams, bins)
    # = form because an extent starting with "-" parses as a flag otherwise
    geometry = ["--dims=12,12,8", "--extent=-2,-3,-0.5,5,3,3"]
    return {
        "scene": scene,
        "cams": cams,
        "bins": bins,
        "scene_path": str(scene_path),
        "rig_path": str(rig_path),
        "geometry": geometry,
        "tmp": tmp_path,
    }


def _gen_scene(setup, out):
    return main(
        ["gen-scene", "--scene", setup["scene_path"], "--rig", setup["rig_path"],
         "--out", str(out), *setup["geometry"]]
    )


def _dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


class TestGenScene:
    def test_writes_expected_files(self, small_setup):
        out = small_setup["tmp"] / "gt"
        assert _gen_scene(small_setup, out) == 0
        names = {p.name for p in out.iterdir()}
        for cam in ("c0", "c1"):
            assert {f"{cam}_depth.pfm", f"{cam}_class.png", f"{cam}_mask.png"} <= names
        assert {
            "bev_height.pfm", "bev_class.png", "bev_mask.png",
            "occupancy.vxg", "sdf.vxg", "semantic.vxg", "scene.json", "rig.json",
        } <= names

    def test_idempotent_byte_identical(self, small_setup):
        a = small_setup["tmp"] / "gt_a"
        b = small_setup["tmp"] / "gt_b"
        _gen_scene(small_setup, a)
        _gen_scene(small_setup, b)
        assert _dir_bytes(a) == _dir_bytes(b)

    def test_missing_scene_file_exits_2(self, small_setup, capsys):
        with pytest.raises(SystemExit) as err:
            main(["gen-scene", "--scene", "/nonexistent/scene.json"])
        assert err.value.code == 2
        assert "missing file" in capsys.readouterr().err

    def test_malformed_json_exits_2_with_line(self, small_setup, capsys):
        bad = small_setup["tmp"] / "bad.json"
        bad.write_text('{\n  "primitives": [\n')
        with pytest.raises(SystemExit) as err:
            main(["gen-scene", "--scene", str(bad)])
        assert err.value.code == 2
        assert "line" in capsys.readouterr().err

    def test_bad_dims_flag_exits_2(self, small_setup):
        with pytest.raises(SystemExit) as err:
            main(
                ["gen-scene", "--scene", small_setup["scene_path"],
                 "--rig", small_setup["rig_path"], "--dims", "12,12"]
            )
        assert err.value.code == 2


class TestRender:
    def test_renders_from_baked_grids(self, small_setup):
        gt = small_setup["tmp"] / "gt"
        _gen_scene(small_setup, gt)
        out = small_setup["tmp"] / "render"
        code = main(
            ["render", "--sdf", str(gt / "sdf.vxg"), "--semantic", str(gt / "semantic.vxg"),
             "--rig", small_setup["rig_path"], "--stride", "2", "--out", str(out)]
        )
        assert code == 0
        names = {p.name for p in out.iterdir()}
        assert {"c0_depth.pfm", "c0_class.png", "c0_wsum.pfm", "bev_height.pfm"} <= names

    def test_geometry_mismatch_exits_3(self, small_setup):
        gt = small_setup["tmp"] / "gt"
        _gen_scene(small_setup, gt)
        wrong = VoxelGrid.zeros(
            (6, 6, 4), 3, Extent3(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0))
        )
        wrong_path = small_setup["tmp"] / "wrong_sem.vxg"
        write_grid(wrong_path, wrong)
        with pytest.raises(SystemExit) as err:
            main(
                ["render", "--sdf", str(gt / "sdf.vxg"), "--semantic", str(wrong_path),
                 "--rig", small_setup["rig_path"], "--out", str(small_setup["tmp"] / "r")]
            )
        assert err.value.code == 3

    def test_missing_grid_exits_2(self, small_setup):
        with pytest.raises(SystemExit) as err:
            main(
                ["render", "--sdf", "/nope.vxg", "--semantic", "/nope2.vxg",
                 "--rig", small_setup["rig_path"]]
            )
        assert err.value.code == 2


class TestSplatDensify:
    def _feature_images(self, setup):
        paths = []
        rng = np.random.default_rng(0)
        for i, cam in enumerate(setup["cams"]):
            feats = rng.random(size=(3, cam.height, cam.width))
            dist = rng.random(size=(setup["bins"].count, cam.height, cam.width))
            dist /= dist.sum(axis=0, keepdims=True)
            path = setup["tmp"] / f"feat{i}.vxf"
            write_feature_image(path, feats, dist)
            paths.append(str(path))
        return paths

    def test_splat_then_densify(self, small_setup):
        paths = self._feature_images(small_setup)
        out = small_setup["tmp"] / "sp"
        code = main(
            ["splat", *paths, "--rig", small_setup["rig_path"],
             "--out", str(out), *small_setup["geometry"]]
        )
        assert code == 0
        grid = read_grid(out / "splat.vxg")
        assert grid.data.sum() > 0.0

        out2 = small_setup["tmp"] / "dn"
        code = main(
            ["densify", "--grid", str(out / "splat.vxg"), "--iterations", "1",
             "--out", str(out2)]
        )
        assert code == 0
        filled = read_grid(out2 / "densified.vxg")
        assert filled.data.sum() >= grid.data.sum()

    def test_feature_count_mismatch_exits_2(self, small_setup):
        paths = self._feature_images(small_setup)
        with pytest.raises(SystemExit) as err:
            main(
                ["splat", paths[0], "--rig", small_setup["rig_path"],
                 *small_setup["geometry"]]
            )
        assert err.value.code == 2

    def test_densify_missing_grid_exits_2(self, small_setup):
        with pytest.raises(SystemExit) as err:
            main(["densify", "--grid", "/nope.vxg"])
        assert err.value.code == 2


def _fit_args(setup, out, extra=()):
    return [
        "fit", "--scene", setup["scene_path"], "--rig", setup["rig_path"],
        "--out", str(out), *setup["geometry"],
        "--steps", "3", "--stride", "4", "--skip-precheck", "--log-every", "0",
        *extra,
    ]


class TestFit:
    def test_fit_writes_outputs(self, small_setup):
        out = small_setup["tmp"] / "fit"
        assert main(_fit_args(small_setup, out)) == 0
        assert (out / "checkpoint" / "sdf.vxg").exists()
        assert (out / "checkpoint" / "semantic.vxg").exists()
        assert (out / "checkpoint" / "params.json").exists()
        rows = read_loss_csv(out / "loss.csv")
        assert len(rows) == 3
        metrics = json.loads((out / "metrics.json").read_text())
        assert "occupancy" in metrics and "final_loss" in metrics

    def test_fit_idempotent(self, small_setup):
        a = small_setup["tmp"] / "fit_a"
        b = small_setup["tmp"] / "fit_b"
        main(_fit_args(small_setup, a))
        main(_fit_args(small_setup, b))
        assert _dir_bytes(a) == _dir_bytes(b)
        assert _dir_bytes(a / "checkpoint") == _dir_bytes(b / "checkpoint")

    def test_smoke_mode(self, small_setup):
        out = small_setup["tmp"] / "smoke"
        code = main(
            ["fit", "--mode", "smoke", "--scene", small_setup["scene_path"],
             "--rig", small_setup["rig_path"], "--out", str(out),
             *small_setup["geometry"], "--stride", "2"]
        )
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert "occupancy" in metrics

    def test_unknown_mode_exits_2(self, small_setup):
        with pytest.raises(SystemExit) as err:
            main(
                ["fit", "--mode", "nope", "--scene", small_setup["scene_path"]]
            )
        # argparse rejects values outside choices before the command runs
        assert err.value.code == 2

    def test_threads_flag_does_not_change_loss_log(self, small_setup):
        logs = []
        for threads in ("1", "8"):
            out = small_setup["tmp"] / f"fit_t{threads}"
            main(_fit_args(small_setup, out, ("--threads", threads, "--steps", "5")))
            rows = read_loss_csv(out / "loss.csv")
            logs.append(np.array([r["total"] for r in rows]))
        np.testing.assert_allclose(logs[0], logs[1], rtol=0, atol=1e-9)

    def test_env_threads_fallback(self, small_setup, monkeypatch):
        monkeypatch.setenv("VOXREG_THREADS", "2")
        out = small_setup["tmp"] / "fit_env"
        assert main(_fit_args(small_setup, out)) == 0
        monkeypatch.setenv("VOXREG_THREADS", "lots")
        with pytest.raises(SystemExit) as err:
            main(_fit_args(small_setup, small_setup["tmp"] / "fit_env2"))
        assert err.value.code == 2

    def test_config_file_and_flag_precedence(self, small_setup):
        cfg_path = small_setup["tmp"] / "fit.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "scene": small_setup["scene_path"],
                    "rig": small_setup["rig_path"],
                    "dims": "12,12,8",
                    "extent": "-2,-3,-0.5,5,3,3",
                    "steps": 4,
                    "stride": 4,
                    "skip-precheck": True,
                    "log-every": 0,
                }
            )
        )
        # config beats defaults
        out = small_setup["tmp"] / "cfg_only"
        assert main(["fit", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert len(read_loss_csv(out / "loss.csv")) == 4
        # explicit flag beats config
        out = small_setup["tmp"] / "cfg_flag"
        assert (
            main(["fit", "--config", str(cfg_path), "--out", str(out), "--steps", "2"])
            == 0
        )
        assert len(read_loss_csv(out / "loss.csv")) == 2

    def test_negative_steps_exits_2(self, small_setup):
        with pytest.raises(SystemExit) as err:
            main(_fit_args(small_setup, small_setup["tmp"] / "x") + ["--steps", "-1"])
        assert err.value.code == 2


class TestEvalOcc:
    def test_semantic_vs_gt(self, small_setup, capsys):
        gt = small_setup["tmp"] / "gt"
        _gen_scene(small_setup, gt)
        capsys.readouterr()  # drain the gen-scene progress lines
        out_path = small_setup["tmp"] / "occ_report.json"
        code = main(
            ["eval-occ", "--gt", str(gt / "occupancy.vxg"),
             "--semantic", str(gt / "semantic.vxg"), "--out", str(out_path)]
        )
        assert code == 0
        report = json.loads(out_path.read_text())
        # the baked semantic volume argmaxes back to its own labels
        assert report["miou"] == pytest.approx(1.0)
        printed = json.loads(capsys.readouterr().out)
        assert printed == report

    def test_prediction_shape_mismatch_exits_3(self, small_setup):
        gt = small_setup["tmp"] / "gt"
        _gen_scene(small_setup, gt)
        from voxreg.formats import write_occupancy
        from voxreg.heads import OccupancyGrid

        small = OccupancyGrid(
            dims=(2, 2, 2),
            extent=Extent3(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0)),
            classes=np.zeros((2, 2, 2), dtype=np.int32),
        )
        pred_path = small_setup["tmp"] / "pred.vxg"
        write_occupancy(pred_path, small)
        with pytest.raises(SystemExit) as err:
            main(
                ["eval-occ", "--gt", str(gt / "occupancy.vxg"), "--pred", str(pred_path)]
            )
        assert err.value.code == 3

    def test_requires_pred_or_semantic(self, small_setup):
        gt = small_setup["tmp"] / "gt"
        _gen_scene(small_setup, gt)
        with pytest.raises(SystemExit) as err:
            main(["eval-occ", "--gt", str(gt / "occupancy.vxg")])
        assert err.value.code == 2

    def test_missing_gt_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["eval-occ", "--gt", "/nope.vxg", "--pred", "/nope.vxg"])
        assert err.value.code == 2


class TestGradCheckCommand:
    def test_passes_and_prints_suites(self, capsys):
        assert main(["grad-check", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_threshold_violation_exits_5(self, monkeypatch, capsys):
        import importlib

        gradcheck = importlib.import_module("voxreg.gradcheck")

        def broken(seed):
            return {
                "composite": {"max_rel_err": 1.0, "threshold": 1e-5, "ok": False}
            }

        monkeypatch.setattr(gradcheck, "run_all", broken)
        with pytest.raises(SystemExit) as err:
            main(["grad-check"])
        assert err.value.code == 5
        assert "FAIL" in capsys.readouterr().out


class TestBench:
    def test_bench_runs(self, small_setup, capsys):
        code = main(
            ["bench", "--scene", small_setup["scene_path"],
             "--rig", small_setup["rig_path"], *small_setup["geometry"],
             "--steps", "1"]
        )
        assert code == 0
        assert "fit_step" in capsys.readouterr().out
