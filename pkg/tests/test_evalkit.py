"""IoU oracle, aggregation algebra and the scorer plugin protocol."""

from __future__ import annotations

import stat

import numpy as np
import pytest

from spherefuse.evalkit import (
    DetectionRecord,
    MetricRow,
    ScorerError,
    aggregate,
    box_iou_cyclic,
    format_metrics_table,
    iou,
    layout_iou,
    mask_bbox_cyclic,
    scorer_plugin_run,
    write_metrics_csv,
)

W, H = 128, 64


def _mask_from_box(x0, y0, x1, y1) -> np.ndarray:
    """Rasterize an integer box with horizontal wrap onto (H, W)."""
    mask = np.zeros((H, W), dtype=np.uint8)
    for x in range(int(x0), int(x1)):
        mask[int(y0) : int(y1), x % W] = 1
    return mask


def _enumeration_iou(box_a, box_b) -> float:
    """Brute-force pixel-count IoU on the cyclic canvas."""
    inside = []
    for box in (box_a, box_b):
        x0, y0, x1, y1 = box
        grid = np.zeros((H, W), dtype=bool)
        for x in range(int(x0), int(x1)):
            grid[int(y0) : int(y1), x % W] = True
        inside.append(grid)
    inter = np.sum(inside[0] & inside[1])
    union = np.sum(inside[0] | inside[1])
    return inter / union if union else 0.0


class TestIou:
    def test_identical_box_is_one(self):
        mask = _mask_from_box(10, 10, 30, 25)
        assert iou((10, 10, 30, 25), mask) == 1.0

    def test_disjoint_is_zero(self):
        mask = _mask_from_box(10, 10, 20, 20)
        assert iou((40, 40, 50, 50), mask) == 0.0

    def test_hand_computed_third(self):
        # gt (0..10, 0..10), pred (5..15, 0..10): 50 / (100+100-50) = 1/3
        mask = _mask_from_box(0, 0, 10, 10)
        assert iou((5, 0, 15, 10), mask) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_seam_crossing_gt_mask(self):
        # mask occupying columns 120..127 and 0..7 is one wrapped box
        mask = _mask_from_box(120, 20, 136, 30)
        x0, y0, x1, y1 = mask_bbox_cyclic(mask)
        assert (x0, x1) == (120.0, 136.0)
        assert iou((120, 20, 136, 30), mask) == 1.0

    def test_50_randomized_pairs_match_enumeration_oracle(self):
        rng = np.random.default_rng(17)
        for trial in range(50):
            wrap_gt = trial % 2 == 0
            if wrap_gt:
                gx0 = int(rng.integers(W - 20, W - 1))
            else:
                gx0 = int(rng.integers(0, W - 30))
            gx1 = gx0 + int(rng.integers(4, 24))
            gy0 = int(rng.integers(0, H - 16))
            gy1 = gy0 + int(rng.integers(4, 14))
            px0 = int(rng.integers(0, W + 10))
            px1 = px0 + int(rng.integers(4, 30))
            py0 = int(rng.integers(0, H - 16))
            py1 = py0 + int(rng.integers(4, 14))
            if px0 >= W:
                px0, px1 = px0 - W, px1 - W
            gt_mask = _mask_from_box(gx0, gy0, gx1, gy1)
            got = iou((px0, py0, px1, py1), gt_mask)
            expected = _enumeration_iou((px0, py0, px1, py1), (gx0, gy0, gx1, gy1))
            assert got == pytest.approx(expected, abs=1e-12), (trial, got, expected)

    def test_symmetry_for_box_vs_box(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            ax0 = int(rng.integers(0, 140))
            bx0 = int(rng.integers(0, 140))
            a = (ax0, 5, ax0 + int(rng.integers(4, 60)), 20)
            b = (bx0, 8, bx0 + int(rng.integers(4, 60)), 25)
            assert box_iou_cyclic(a, b, W) == pytest.approx(box_iou_cyclic(b, a, W), abs=1e-15)

    def test_invariant_under_joint_cyclic_shift(self):
        gt = (100, 10, 140, 30)  # wraps
        pred = (110, 12, 150, 28)
        base = box_iou_cyclic(pred, gt, W)
        for shift in (7, 64, 100):
            gt_s = ((gt[0] + shift) % W, gt[1], (gt[0] + shift) % W + (gt[2] - gt[0]), gt[3])
            pr_s = ((pred[0] + shift) % W, pred[1], (pred[0] + shift) % W + (pred[2] - pred[0]), pred[3])
            assert box_iou_cyclic(pr_s, gt_s, W) == pytest.approx(base, abs=1e-12)

    def test_empty_gt_raises(self):
        with pytest.raises(ValueError):
            iou((0, 0, 5, 5), np.zeros((H, W), dtype=np.uint8))

    def test_degenerate_detection_box_rejected(self):
        with pytest.raises(ValueError):
            DetectionRecord(object_id=0, box=(10, 10, 10, 20))


class TestLayoutIou:
    def test_matched_and_missing_objects(self):
        from spherefuse.geometry import ErpGrid
        from spherefuse.layout import Layout, RegionSpec

        grid = ErpGrid(W, H)
        m0 = _mask_from_box(10, 10, 30, 25)
        m1 = _mask_from_box(60, 30, 90, 50)
        layout = Layout(
            grid=grid,
            background_prompt="bg",
            regions=[RegionSpec(m0, "a", object_id=0), RegionSpec(m1, "b", object_id=1)],
        )
        detections = [DetectionRecord(object_id=0, box=(10, 10, 30, 25))]
        assert layout_iou(detections, layout) == pytest.approx(0.5)  # (1.0 + 0.0) / 2


class TestAggregate:
    def test_single_row(self):
        rows = [MetricRow(config_id="a", iou=0.4, params={"bootstrap": 5})]
        table = aggregate(rows, "bootstrap")
        assert len(table) == 1
        assert table[0]["group"] == 5
        assert table[0]["iou"] == pytest.approx(0.4)
        assert table[0]["fid"] is None

    def test_two_rows_mean(self):
        rows = [
            MetricRow(config_id="a", iou=0.4, params={"bootstrap": 5}),
            MetricRow(config_id="b", iou=0.6, params={"bootstrap": 5}),
        ]
        assert aggregate(rows, "bootstrap")[0]["iou"] == pytest.approx(0.5)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        rows = [
            MetricRow(config_id=str(i), iou=float(rng.random()), fid=float(rng.random()),
                      params={"stride": int(rng.integers(0, 3))})
            for i in range(30)
        ]
        base = aggregate(rows, "stride")
        shuffled = list(rows)
        rng.shuffle(shuffled)
        assert aggregate(shuffled, "stride") == base

    def test_grouping_reproduces_injected_means(self):
        rows = []
        expected = {1: 0.2, 5: 0.5, 20: 0.8}
        for b, mean in expected.items():
            for delta in (-0.1, 0.0, 0.1):
                rows.append(MetricRow(config_id="x", iou=mean + delta, params={"bootstrap": b}))
        table = aggregate(rows, "bootstrap")
        got = {entry["group"]: entry["iou"] for entry in table}
        for b, mean in expected.items():
            assert got[b] == pytest.approx(mean, abs=1e-12)

    def test_csv_and_text_schema(self, tmp_path):
        rows = [MetricRow(config_id="a", iou=0.5, params={"bootstrap": 5})]
        table = aggregate(rows, "bootstrap")
        write_metrics_csv(table, "bootstrap", tmp_path / "t.csv")
        header = (tmp_path / "t.csv").read_text().splitlines()[0]
        assert header == "bootstrap,n,iou,clip_score,image_reward,fid,cmmd"
        text = format_metrics_table(table, "bootstrap")
        for col in ("IoU", "CS", "IR", "FID", "CMMD"):
            assert col in text.splitlines()[0]


def _write_plugin(path, body: str) -> None:
    path.write_text("#!/usr/bin/env python3\n" + body)
    path.chmod(path.stat().st_mode | stat.S_IEXEC)


class TestScorerPlugins:
    def _images(self, tmp_path, n=2):
        paths = []
        for i in range(n):
            p = tmp_path / f"img{i}.bin"
            p.write_bytes(bytes([i] * 16))
            paths.append(p)
        return paths

    def test_absent_plugin_returns_none(self, tmp_path):
        images = self._images(tmp_path)
        value = scorer_plugin_run(images, images, "missing_metric", tmp_path / "plugins")
        assert value is None

    def test_constant_stub_plugin(self, tmp_path):
        plugin_dir = tmp_path / "plugins"
        plugin_dir.mkdir()
        _write_plugin(
            plugin_dir / "fid",
            "import json, sys\n"
            "json.dump({'metric': 'fid', 'value': 42.5}, open(sys.argv[3], 'w'))\n",
        )
        images = self._images(tmp_path)
        value = scorer_plugin_run(images, images, "fid", plugin_dir, cache_dir=tmp_path / "cache")
        assert value == 42.5

    def test_cache_hit_skips_invocation(self, tmp_path):
        plugin_dir = tmp_path / "plugins"
        plugin_dir.mkdir()
        tally = tmp_path / "calls.txt"
        _write_plugin(
            plugin_dir / "cmmd",
            "import json, sys\n"
            f"open({str(tally)!r}, 'a').write('x')\n"
            "json.dump({'metric': 'cmmd', 'value': 1.25}, open(sys.argv[3], 'w'))\n",
        )
        images = self._images(tmp_path)
        cache = tmp_path / "cache"
        v1 = scorer_plugin_run(images, images, "cmmd", plugin_dir, cache_dir=cache)
        v2 = scorer_plugin_run(images, images, "cmmd", plugin_dir, cache_dir=cache)
        assert v1 == v2 == 1.25
        assert tally.read_text() == "x"  # invoked exactly once

    def test_failing_plugin_raises_scorer_error(self, tmp_path):
        plugin_dir = tmp_path / "plugins"
        plugin_dir.mkdir()
        _write_plugin(plugin_dir / "clip_score", "import sys\nsys.exit(3)\n")
        images = self._images(tmp_path)
        with pytest.raises(ScorerError):
            scorer_plugin_run(images, images, "clip_score", plugin_dir)

    def test_file_list_protocol(self, tmp_path):
        # plugin receives newline-separated path lists in argv[1] / argv[2]
        plugin_dir = tmp_path / "plugins"
        plugin_dir.mkdir()
        _write_plugin(
            plugin_dir / "image_reward",
            "import json, sys\n"
            "images = open(sys.argv[1]).read().splitlines()\n"
            "refs = open(sys.argv[2]).read().splitlines()\n"
            "json.dump({'metric': 'image_reward', 'value': float(len(images) * 100 + len(refs))},\n"
            "          open(sys.argv[3], 'w'))\n",
        )
        images = self._images(tmp_path, n=3)
        refs = self._images(tmp_path / ".", n=2)
        value = scorer_plugin_run(images, refs, "image_reward", plugin_dir)
        assert value == 302.0
