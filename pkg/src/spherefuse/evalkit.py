"""Metrics and aggregation: layout IoU, scorer plugins, tables.

IoU is geometric and built in (box against the tight bbox of the ground-
truth mask, cyclic in the horizontal direction so seam-crossing boxes
work). The neural scorers (CLIP-score, ImageReward, FID, CMMD) are
out-of-process plugins invoked through a file-list protocol; their values
are cached by content hash and simply omitted when no plugin is present.
"""

from __future__ import annotations

import csv
import hashlib
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_COLUMNS = ("iou", "clip_score", "image_reward", "fid", "cmmd")
METRIC_HEADERS = {"iou": "IoU", "clip_score": "CS", "image_reward": "IR", "fid": "FID", "cmmd": "CMMD"}


@dataclass
class DetectionRecord:
    object_id: int
    box: tuple  # (x0, y0, x1, y1) in ERP pixels; x1 may exceed the canvas
    score: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")


@dataclass
class MetricRow:
    config_id: str
    iou: float | None = None
    clip_score: float | None = None
    image_reward: float | None = None
    fid: float | None = None
    cmmd: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iou is not None and not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou must be in [0, 1], got {self.iou}")


def _cyclic_interval(x0: float, x1: float, width: int) -> tuple[float, float]:
    """Normalize a column interval to start in [0, width); length <= width."""
    if x1 - x0 > width:
        raise ValueError(f"box wider than the canvas: {(x0, x1)} for width {width}")
    start = x0 % width
    return start, start + (x1 - x0)


def _interval_segments(x0: float, x1: float, width: int) -> list[tuple[float, float]]:
    start, end = _cyclic_interval(x0, x1, width)
    if end <= width:
        return [(start, end)]
    return [(start, width), (0.0, end - width)]


def _cyclic_overlap(a0: float, a1: float, b0: float, b1: float, width: int) -> float:
    total = 0.0
    for s0, s1 in _interval_segments(a0, a1, width):
        for t0, t1 in _interval_segments(b0, b1, width):
            total += max(0.0, min(s1, t1) - max(s0, t0))
    return total


def mask_bbox_cyclic(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight box of a mask, allowing the columns to wrap across the seam.

    Finds the largest run of empty columns (cyclically) and spans the
    complement, so a mask split across the seam gets one narrow box with
    x1 > width instead of a full-width one.
    """
    if not mask.any():
        raise ValueError("mask is empty, no bounding box")
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    col_used = mask.any(axis=0)
    if col_used.all():
        return 0.0, float(y0), float(w), float(y1)
    used = np.flatnonzero(col_used)
    gaps = np.diff(used)
    wrap_gap = used[0] + w - used[-1]
    if gaps.size and gaps.max() > wrap_gap:
        k = int(np.argmax(gaps))
        x0 = float(used[k + 1])
        x1 = float(used[k] + 1 + w)
    else:
        x0 = float(used[0])
        x1 = float(used[-1] + 1)
    return x0, float(y0), x1, float(y1)


def box_iou_cyclic(box_a: tuple, box_b: tuple, width: int) -> float:
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    overlap_x = _cyclic_overlap(ax0, ax1, bx0, bx1, width)
    overlap_y = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = overlap_x * overlap_y
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou(pred_box: tuple, gt_mask: np.ndarray) -> float:
    """IoU of a predicted box against the tight bbox of a ground-truth
    mask, with horizontal wrap-around on the ERP cylinder."""
    width = gt_mask.shape[1]
    gt_box = mask_bbox_cyclic(gt_mask)
    return box_iou_cyclic(pred_box, gt_box, width)


def iou_perspective(pred_box: tuple, gt_mask_erp: np.ndarray, cam) -> float:
    """Perspective-mode IoU: the ERP ground-truth mask is projected into
    the camera view and boxed there; pred_box is in view pixels (no
    wrap-around in a perspective image)."""
    from .geometry import mask_bbox, project_mask_erp_to_persp

    persp = project_mask_erp_to_persp(gt_mask_erp, cam)
    if not persp.any():
        raise ValueError("ground-truth mask is not visible from the camera")
    x0, y0, x1, y1 = mask_bbox(persp)
    ax0, ay0, ax1, ay1 = pred_box
    bx0, by0, bx1, by1 = float(x0), float(y0), float(x1 + 1), float(y1 + 1)
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def layout_iou(detections: list[DetectionRecord], layout) -> float | None:
    """Mean per-object IoU of detections matched by object_id. Objects
    without a detection count as 0; returns None for empty layouts."""
    if not layout.regions:
        return None
    by_id = {}
    for det in detections:
        if det.object_id not in by_id or det.score > by_id[det.object_id].score:
            by_id[det.object_id] = det
    scores = []
    for region in layout.regions:
        det = by_id.get(region.object_id)
        scores.append(iou(det.box, region.mask) if det is not None else 0.0)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Scorer plugins
#
# A plugin is an executable file <plugin_dir>/<plugin_id>, invoked as
#   <plugin> images.txt refs.txt out.json
# where the txt files list one image path per line and out.json must be
# {"metric": <plugin_id>, "value": <float>}.


class ScorerError(RuntimeError):
    """A registered plugin was found but failed to produce a value."""


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def scorer_plugin_run(
    images: list,
    references: list,
    plugin_id: str,
    plugin_dir,
    cache_dir=None,
    timeout: float = 600.0,
) -> float | None:
    """Run one scorer plugin over image/reference file lists.

    Returns None when the plugin is absent (metric omitted, never zero).
    Results are cached under cache_dir keyed by the plugin id and the
    content hashes of all inputs; a cache hit skips the invocation.
    Raises ScorerError on plugin failure.
    """
    plugin = Path(plugin_dir) / plugin_id
    if not plugin.exists():
        return None
    key_parts = [plugin_id]
    key_parts += [_file_digest(p) for p in images]
    key_parts += ["--refs--"]
    key_parts += [_file_digest(p) for p in references]
    cache_key = hashlib.sha256("\n".join(key_parts).encode()).hexdigest()
    cache_path = Path(cache_dir) / f"{plugin_id}-{cache_key}.json" if cache_dir else None
    if cache_path is not None and cache_path.exists():
        return float(json.loads(cache_path.read_text())["value"])

    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        images_txt = tmp / "images.txt"
        refs_txt = tmp / "refs.txt"
        out_json = tmp / "out.json"
        images_txt.write_text("".join(f"{Path(p)}\n" for p in images))
        refs_txt.write_text("".join(f"{Path(p)}\n" for p in references))
        try:
            proc = subprocess.run(
                [str(plugin), str(images_txt), str(refs_txt), str(out_json)],
                capture_output=True,
                timeout=timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ScorerError(f"plugin {plugin_id} failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise ScorerError(
                f"plugin {plugin_id} exited {proc.returncode}: {proc.stderr.decode(errors='replace')}"
            )
        try:
            result = json.loads(out_json.read_text())
            value = float(result["value"])
        except (OSError, ValueError, KeyError) as exc:
            raise ScorerError(f"plugin {plugin_id} produced invalid output: {exc}") from exc
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(json.dumps({"metric": plugin_id, "value": value}))
    return value


# ---------------------------------------------------------------------------
# Aggregation


def aggregate(rows: list[MetricRow], group_by: str) -> list[dict]:
    """Mean of each metric per group value; row order does not matter.

    The group key is looked up in row.params (falling back to config_id
    when group_by == "config_id"). Missing metric values are skipped; a
    group where every row misses a metric gets None for it.
    """
    groups: dict = {}
    for row in rows:
        key = row.config_id if group_by == "config_id" else row.params.get(group_by)
        groups.setdefault(key, []).append(row)
    table = []
    for key in sorted(groups, key=lambda k: (str(type(k)), k if k is not None else "")):
        members = groups[key]
        entry = {"group": key, "n": len(members)}
        for metric in METRIC_COLUMNS:
            values = sorted(
                getattr(r, metric) for r in members if getattr(r, metric) is not None
            )
            # sorted summation makes the mean independent of row order
            entry[metric] = float(np.mean(values)) if values else None
        table.append(entry)
    return table


def write_metrics_csv(table: list[dict], parameter: str, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([parameter, "n", *METRIC_COLUMNS])
        for entry in table:
            writer.writerow(
                [entry["group"], entry["n"]]
                + [
                    "" if entry[m] is None else f"{entry[m]:.6g}"
                    for m in METRIC_COLUMNS
                ]
            )


def format_metrics_table(table: list[dict], parameter: str) -> str:
    """Fixed-width text table with the IoU / CS / IR / FID / CMMD columns."""
    headers = [parameter] + [METRIC_HEADERS[m] for m in METRIC_COLUMNS]
    rows = []
    for entry in table:
        rows.append(
            [str(entry["group"])]
            + ["-" if entry[m] is None else f"{entry[m]:.2f}" for m in METRIC_COLUMNS]
        )
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"
