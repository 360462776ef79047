"""End-to-end CLI: generate, sweep (resume/workers), dataset, masks, eval."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from conftest import write_config
from spherefuse.cli import main
from spherefuse.geometry import load_mask_png, pose_to_json, save_mask_png, CameraPose

def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenerate:
    def test_reruns_byte_identical(self, tiny_layout_dir, tmp_path):
        config = write_config(tmp_path / "config.json")
        for out in ("run_a", "run_b"):
            rc = main(
                [
                    "generate",
                    "--layout", str(tiny_layout_dir / "layout.json"),
                    "--config", str(config),
                    "--seed", "11",
                    "--out", str(tmp_path / out),
                ]
            )
            assert rc == 0
        assert _tree_bytes(tmp_path / "run_a") == _tree_bytes(tmp_path / "run_b")

    def test_md_baseline_mode_stitch_off(self, tiny_layout_dir, tmp_path):
        config = write_config(tmp_path / "config.json", stitch=False)
        rc = main(
            [
                "generate",
                "--layout", str(tiny_layout_dir / "layout.json"),
                "--config", str(config),
                "--out", str(tmp_path / "run"),
            ]
        )
        assert rc == 0
        manifest = json.loads((tmp_path / "run" / "run.json").read_text())
        assert manifest["config"]["stitch"] is False
        assert (tmp_path / "run" / "erp.png").exists()

    def test_mpf_writes_erp_plus_20_views(self, tiny_layout_dir, tmp_path):
        config = write_config(
            tmp_path / "config.json", pipeline="mpf", persp_image_size=32, steps=2, bootstrap_steps=1
        )
        rc = main(
            [
                "generate",
                "--layout", str(tiny_layout_dir / "layout.json"),
                "--config", str(config),
                "--out", str(tmp_path / "run"),
            ]
        )
        assert rc == 0
        views = sorted((tmp_path / "run" / "views").glob("view*.png"))
        assert len(views) == 20
        assert (tmp_path / "run" / "erp.png").exists()

    def test_missing_layout_exit_2(self, tmp_path):
        config = write_config(tmp_path / "config.json")
        rc = main(
            ["generate", "--layout", str(tmp_path / "nope.json"), "--config", str(config), "--out", str(tmp_path / "o")]
        )
        assert rc == 2

    def test_unreachable_adapter_exit_3(self, tiny_layout_dir, tmp_path):
        config = write_config(tmp_path / "config.json", steps=1, bootstrap_steps=0)
        rc = main(
            [
                "generate",
                "--layout", str(tiny_layout_dir / "layout.json"),
                "--config", str(config),
                "--backend", "adapter:http://127.0.0.1:9/predict",
                "--out", str(tmp_path / "o"),
            ]
        )
        assert rc == 3

    def test_config_hash_embedded(self, tiny_layout_dir, tmp_path):
        from spherefuse.config import PipelineConfig, config_hash

        config_path = write_config(tmp_path / "config.json")
        main(
            [
                "generate",
                "--layout", str(tiny_layout_dir / "layout.json"),
                "--config", str(config_path),
                "--out", str(tmp_path / "run"),
            ]
        )
        manifest = json.loads((tmp_path / "run" / "run.json").read_text())
        expected = config_hash(PipelineConfig.from_json(json.loads(config_path.read_text())))
        assert manifest["config_hash"] == expected


def _sweep_spec(tmp_path, layout_dir, values=None, steps=50):
    spec = {
        "axis": "bootstrap",
        "values": values if values is not None else [1, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50],
        "one_at_a_time": True,
        "base_config": {
            "pipeline": "mstd",
            "erp_width": 128,
            "erp_height": 64,
            "steps": steps,
            "stride": 8,
        },
        "layouts": [str(layout_dir / "layout.json")],
        "seeds": [0],
    }
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(spec))
    return path


class TestSweep:
    def test_bootstrap_axis_eleven_runs_and_schema(self, tiny_layout_dir, tmp_path):
        sweep = _sweep_spec(tmp_path, tiny_layout_dir)
        rc = main(["sweep", "--sweep", str(sweep), "--out", str(tmp_path / "out")])
        assert rc == 0
        manifest = json.loads((tmp_path / "out" / "sweep_manifest.json").read_text())
        assert len(manifest["runs"]) == 11
        assert all(r["status"] == "ok" for r in manifest["runs"])
        header = (tmp_path / "out" / "aggregate.csv").read_text().splitlines()[0]
        assert header == "bootstrap,n,iou,clip_score,image_reward,fid,cmmd"

    def test_empty_values_error(self, tiny_layout_dir, tmp_path):
        sweep = _sweep_spec(tmp_path, tiny_layout_dir, values=[])
        rc = main(["sweep", "--sweep", str(sweep), "--out", str(tmp_path / "out")])
        assert rc == 2

    def test_resume_skips_existing(self, tiny_layout_dir, tmp_path):
        sweep = _sweep_spec(tmp_path, tiny_layout_dir, values=[1, 3], steps=4)
        out = tmp_path / "out"
        assert main(["sweep", "--sweep", str(sweep), "--out", str(out)]) == 0
        mtimes = {p: p.stat().st_mtime_ns for p in out.rglob("erp.png")}

        # resume with nothing missing: no run re-executed
        assert main(["sweep", "--sweep", str(sweep), "--out", str(out), "--resume"]) == 0
        assert {p: p.stat().st_mtime_ns for p in out.rglob("erp.png")} == mtimes

        # delete one run: only that one is regenerated
        victim = sorted(out.glob("runs/bootstrap=3/*/seed0000"))[0]
        import shutil

        shutil.rmtree(victim)
        assert main(["sweep", "--sweep", str(sweep), "--out", str(out), "--resume"]) == 0
        after = {p: p.stat().st_mtime_ns for p in out.rglob("erp.png")}
        changed = {p for p in after if p not in mtimes or after[p] != mtimes[p]}
        assert changed == {victim / "erp.png"}

    def test_resume_hash_mismatch_aborts(self, tiny_layout_dir, tmp_path):
        sweep = _sweep_spec(tmp_path, tiny_layout_dir, values=[1, 3], steps=4)
        out = tmp_path / "out"
        assert main(["sweep", "--sweep", str(sweep), "--out", str(out)]) == 0
        # change an unswept parameter: existing runs no longer match
        spec = json.loads(sweep.read_text())
        spec["base_config"]["stride"] = 4
        sweep.write_text(json.dumps(spec))
        rc = main(["sweep", "--sweep", str(sweep), "--out", str(out), "--resume"])
        assert rc == 2

    def test_worker_counts_byte_identical(self, tiny_layout_dir, tmp_path):
        sweep = _sweep_spec(tmp_path, tiny_layout_dir, values=[1, 2, 3], steps=3)
        assert main(["sweep", "--sweep", str(sweep), "--out", str(tmp_path / "w1"), "--workers", "1"]) == 0
        assert main(["sweep", "--sweep", str(sweep), "--out", str(tmp_path / "w4"), "--workers", "4"]) == 0
        a = _tree_bytes(tmp_path / "w1" / "runs")
        b = _tree_bytes(tmp_path / "w4" / "runs")
        assert a == b

    def test_full_grid_mode_behind_flag(self, tiny_layout_dir, tmp_path):
        spec = {
            "one_at_a_time": False,
            "axes": {"bootstrap": [1, 2], "noise_coupling": [True, False]},
            "base_config": {
                "pipeline": "mstd",
                "erp_width": 128,
                "erp_height": 64,
                "steps": 2,
                "stride": 4,
            },
            "layouts": [str(tiny_layout_dir / "layout.json")],
            "seeds": [0],
        }
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(spec))
        rc = main(["sweep", "--sweep", str(path), "--out", str(tmp_path / "out")])
        assert rc == 0
        manifest = json.loads((tmp_path / "out" / "sweep_manifest.json").read_text())
        assert len(manifest["runs"]) == 4  # 2 x 2 grid
        assert all(r["status"] == "ok" for r in manifest["runs"])

    def test_scene_source_with_mask_axis(self, tmp_path):
        spec = {
            "axis": "mask_size",
            "values": ["S", "L"],
            "base_config": {
                "pipeline": "mstd",
                "erp_width": 256,
                "erp_height": 128,
                "steps": 2,
                "bootstrap_steps": 1,
                "stride": 8,
            },
            "scenes": {"erp_width": 256, "erp_height": 128, "scene_ids": ["room-set1"], "mask_type": "regular"},
            "seeds": [0],
        }
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(spec))
        rc = main(["sweep", "--sweep", str(path), "--out", str(tmp_path / "out")])
        assert rc == 0
        manifest = json.loads((tmp_path / "out" / "sweep_manifest.json").read_text())
        assert len(manifest["runs"]) == 2
        assert all(r["status"] == "ok" for r in manifest["runs"])


class TestMakeDataset:
    def test_desk_scale_run(self, tmp_path):
        rc = main(
            [
                "make-dataset",
                "--out", str(tmp_path / "ds"),
                "--width", "256",
                "--height", "128",
                "--seeds", "2",
            ]
        )
        assert rc == 0
        lines = (tmp_path / "ds" / "manifest.jsonl").read_text().splitlines()
        records = [json.loads(l) for l in lines]
        assert sum(r["record"] == "panorama" for r in records) == 12
        assert sum(r["record"] == "perspective" for r in records) == 36
        assert sum(r["record"] == "reference" for r in records) == 216


class TestProjectMasks:
    def test_roundtrip_idempotent_on_second_application(self, tmp_path):
        # ERP mask -> perspective bbox -> ERP; doing it again is a no-op.
        # The ERP grid must outresolve the view so nearest-neighbor
        # sampling cannot flip box membership.
        mask = np.zeros((512, 1024), dtype=np.uint8)
        mask[200:320, 240:480] = 1
        save_mask_png(mask, tmp_path / "mask.png")
        pose = CameraPose(
            lon=2 * math.pi * (360.5 / 1024) - math.pi, lat=0.0, roll=0.0,
            fov=math.radians(90), image_size=64,
        )
        (tmp_path / "pose.json").write_text(json.dumps(pose_to_json(pose)))

        rc = main(
            [
                "project-masks",
                "--mask", str(tmp_path / "mask.png"),
                "--pose", str(tmp_path / "pose.json"),
                "--mode", "roundtrip",
                "--out", str(tmp_path / "once.png"),
            ]
        )
        assert rc == 0
        rc = main(
            [
                "project-masks",
                "--mask", str(tmp_path / "once.png"),
                "--pose", str(tmp_path / "pose.json"),
                "--mode", "roundtrip",
                "--out", str(tmp_path / "twice.png"),
            ]
        )
        assert rc == 0
        np.testing.assert_array_equal(
            load_mask_png(tmp_path / "once.png"), load_mask_png(tmp_path / "twice.png")
        )

    def test_to_persp_mode(self, tmp_path):
        mask = np.ones((64, 128), dtype=np.uint8)
        save_mask_png(mask, tmp_path / "mask.png")
        pose = CameraPose(lon=0, lat=0, roll=0, fov=math.radians(90), image_size=32)
        (tmp_path / "pose.json").write_text(json.dumps(pose_to_json(pose)))
        rc = main(
            [
                "project-masks",
                "--mask", str(tmp_path / "mask.png"),
                "--pose", str(tmp_path / "pose.json"),
                "--out", str(tmp_path / "persp.png"),
            ]
        )
        assert rc == 0
        assert load_mask_png(tmp_path / "persp.png").all()


class TestEvaluate:
    def _make_run(self, tiny_layout_dir, tmp_path, name="run0"):
        config = write_config(tmp_path / "config.json", steps=2, bootstrap_steps=1)
        main(
            [
                "generate",
                "--layout", str(tiny_layout_dir / "layout.json"),
                "--config", str(config),
                "--out", str(tmp_path / "runs" / name),
            ]
        )
        return tmp_path / "runs"

    def test_iou_only_csv_without_plugins(self, tiny_layout_dir, tmp_path):
        runs = self._make_run(tiny_layout_dir, tmp_path)
        detections = tmp_path / "dets.jsonl"
        detections.write_text(
            json.dumps({"run": "run0", "object_id": 0, "box": [20, 24, 50, 40], "score": 0.9}) + "\n"
        )
        rc = main(
            [
                "evaluate",
                "--runs", str(runs),
                "--detections", str(detections),
                "--out", str(tmp_path / "eval"),
            ]
        )
        assert rc == 0
        lines = (tmp_path / "eval" / "metrics.csv").read_text().splitlines()
        assert lines[0] == "run,iou,clip_score,image_reward,fid,cmmd"
        cells = lines[1].split(",")
        assert cells[0] == "run0"
        assert float(cells[1]) == pytest.approx(1.0)  # detection == gt bbox
        assert cells[2:] == ["", "", "", ""]

    def test_constant_stub_plugin_flows_into_csv(self, tiny_layout_dir, tmp_path):
        import stat

        runs = self._make_run(tiny_layout_dir, tmp_path)
        plugin_dir = tmp_path / "plugins"
        plugin_dir.mkdir()
        stub = plugin_dir / "fid"
        stub.write_text(
            "#!/usr/bin/env python3\nimport json, sys\n"
            "json.dump({'metric': 'fid', 'value': 7.5}, open(sys.argv[3], 'w'))\n"
        )
        stub.chmod(stub.stat().st_mode | stat.S_IEXEC)
        rc = main(
            [
                "evaluate",
                "--runs", str(runs),
                "--plugin-dir", str(plugin_dir),
                "--out", str(tmp_path / "eval"),
            ]
        )
        assert rc == 0
        lines = (tmp_path / "eval" / "metrics.csv").read_text().splitlines()
        assert lines[1].split(",")[4] == "7.5"

    def test_group_by_renders_figures_next_to_csv(self, tiny_layout_dir, tmp_path):
        import stat

        runs = self._make_run(tiny_layout_dir, tmp_path, name="run0")
        self._make_run(tiny_layout_dir, tmp_path, name="run1")
        plugin_dir = tmp_path / "plugins"
        plugin_dir.mkdir()
        stub = plugin_dir / "cmmd"
        stub.write_text(
            "#!/usr/bin/env python3\nimport json, sys\n"
            "json.dump({'metric': 'cmmd', 'value': 1.5}, open(sys.argv[3], 'w'))\n"
        )
        stub.chmod(stub.stat().st_mode | stat.S_IEXEC)
        rc = main(
            [
                "evaluate",
                "--runs", str(runs),
                "--plugin-dir", str(plugin_dir),
                "--group-by", "bootstrap_steps",
                "--out", str(tmp_path / "eval"),
            ]
        )
        assert rc == 0
        assert (tmp_path / "eval" / "aggregate.csv").exists()
        assert (tmp_path / "eval" / "aggregate.txt").exists()
        figures = list((tmp_path / "eval" / "figures").glob("*.png"))
        assert figures, "figures should be rendered alongside the CSV"
