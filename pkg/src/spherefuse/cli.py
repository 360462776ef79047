"""Command-line entry points.

Subcommands:
  generate       run one pipeline on a layout, write images + manifest
  sweep          run a one-parameter-at-a-time hyperparameter sweep
  make-dataset   write the synthetic benchmark (masks, layouts, manifest)
  project-masks  ERP <-> perspective mask projection utilities
  evaluate       compute metric rows + aggregate tables/figures

Exit codes: 0 ok, 2 bad input, 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import urllib.error
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import dsynview, evalkit, layout as layout_mod, plots
from .backend import MockCodec, MockDenoiser, RemoteDenoiser, Scheduler
from .config import PipelineConfig, config_hash
from .geometry import ErpGrid, load_mask_png, pose_from_json, save_mask_png
from .mpf import mpf_sample
from .mstd import mstd_sample

EXIT_BAD_INPUT = 2
EXIT_BACKEND_FAILURE = 3

PLUGIN_DIR_ENV = "SPHEREFUSE_PLUGIN_DIR"


class BackendFailure(RuntimeError):
    pass


def make_backend(spec: str):
    """Build (denoiser, codec) from a backend spec string."""
    if spec == "mock":
        return MockDenoiser(), MockCodec()
    if spec.startswith("adapter:"):
        return RemoteDenoiser(spec.split(":", 1)[1]), MockCodec()
    raise ValueError(f"unknown backend {spec!r} (use 'mock' or 'adapter:<endpoint>')")


def array_to_png(arr: np.ndarray, path) -> None:
    """Render a float latent-space image to PNG; first three channels
    become RGB, min/max-normalized per image (deterministic)."""
    if arr.ndim == 3:
        rgb = np.transpose(arr[:3], (1, 2, 0)).astype(np.float64)
    else:
        rgb = np.stack([arr] * 3, axis=-1).astype(np.float64)
    lo, hi = rgb.min(), rgb.max()
    if hi > lo:
        rgb = (rgb - lo) / (hi - lo)
    else:
        rgb = np.zeros_like(rgb)
    Image.fromarray(np.round(rgb * 255.0).astype(np.uint8), mode="RGB").save(path)


def run_pipeline(layout, config: PipelineConfig, backend_spec: str, seed: int):
    denoiser, codec = make_backend(backend_spec)
    scheduler = Scheduler(num_steps=config.steps)
    try:
        if config.pipeline == "mstd":
            return mstd_sample(layout, config, denoiser, scheduler, seed, codec=codec)
        return mpf_sample(layout, config, denoiser, scheduler, seed, codec=codec)
    except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
        raise BackendFailure(f"backend {backend_spec} failed: {exc}") from exc


def write_run_artifacts(result, layout_path, config: PipelineConfig, out_dir: Path, warnings: list[str]):
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = ["erp.png", "latent.npy"]
    array_to_png(result.image, out_dir / "erp.png")
    np.save(out_dir / "latent.npy", result.latent)
    views = getattr(result, "views", None)
    if views is not None:
        view_dir = out_dir / "views"
        view_dir.mkdir(exist_ok=True)
        for j, view in enumerate(views):
            name = f"views/view{j:02d}.png"
            array_to_png(view, out_dir / name)
            outputs.append(name)
    manifest = {
        "pipeline": config.pipeline,
        "seed": result.seed,
        "config_hash": result.config_digest,
        "config": config.to_json(),
        "layout": str(layout_path),
        "outputs": outputs,
        "counters": result.counters,
        "warnings": warnings,
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def cmd_generate(args) -> int:
    layout = layout_mod.load_layout(args.layout)
    config = PipelineConfig.load(args.config)
    warnings = layout_mod.validate(layout)
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    result = run_pipeline(layout, config, args.backend, args.seed)
    write_run_artifacts(result, args.layout, config, Path(args.out), warnings)
    print(f"wrote {args.out} (config {result.config_digest}, seed {args.seed})")
    return 0


# ---------------------------------------------------------------------------
# Sweep

AXIS_CONFIG_FIELDS = {
    "bootstrap": "bootstrap_steps",
    "stride": "stride",
    "lora": "lora_mode",
    "bootstrap_coupling": "bootstrap_coupling",
    "noise_coupling": "noise_coupling",
    "global_prompt": "include_objects_in_global",
    "fg_eppa": "fg_eppa",
}
AXIS_DATASET_FIELDS = {"mask_size", "mask_type", "mask_indices"}
SWEEP_AXES = sorted(AXIS_CONFIG_FIELDS) + sorted(AXIS_DATASET_FIELDS)


def _value_slug(value) -> str:
    if isinstance(value, (list, tuple)):
        return "".join(str(v) for v in value)
    return str(value)


def _axis_assignments(sweep: dict) -> list[dict]:
    """Per-run {axis: value} combinations.

    Default (one_at_a_time) varies the single "axis" over "values". With
    one_at_a_time false, "axes" maps several parameters to value lists
    and the full grid is enumerated.
    """
    if sweep.get("one_at_a_time", True) or "axes" not in sweep:
        axis = sweep["axis"]
        values = sweep["values"]
        if not values:
            raise ValueError("sweep values list is empty")
        return [{axis: value} for value in values]
    axes = sweep["axes"]
    if not axes or any(not values for values in axes.values()):
        raise ValueError("full-grid sweep needs nonempty value lists per axis")
    names = sorted(axes)
    combos = [{}]
    for name in names:
        combos = [{**combo, name: value} for combo in combos for value in axes[name]]
    return combos


def build_sweep_entries(sweep: dict, out_dir: Path) -> list[dict]:
    """Expand a sweep spec into per-run entry dicts (picklable)."""
    assignments = _axis_assignments(sweep)
    for assignment in assignments:
        for axis in assignment:
            if axis not in AXIS_CONFIG_FIELDS and axis not in AXIS_DATASET_FIELDS:
                raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    base_config = sweep.get("base_config", {})
    seeds = sweep.get("seeds", [0])
    scenes = sweep.get("scenes")
    layouts = sweep.get("layouts")
    dataset_axes = {a for assignment in assignments for a in assignment if a in AXIS_DATASET_FIELDS}
    if dataset_axes and not scenes:
        raise ValueError(f"axes {sorted(dataset_axes)} vary the dataset; the sweep needs a 'scenes' block")
    if not scenes and not layouts:
        raise ValueError("sweep needs 'layouts' (paths) or 'scenes' (dataset block)")

    entries = []
    for assignment in assignments:
        config_json = dict(base_config)
        dataset_json = dict(scenes) if scenes else None
        for axis, value in assignment.items():
            if axis in AXIS_CONFIG_FIELDS:
                config_json[AXIS_CONFIG_FIELDS[axis]] = value
            else:
                dataset_json[axis] = value
        slug = ",".join(f"{a}={_value_slug(v)}" for a, v in sorted(assignment.items()))
        sources = layouts if layouts else [f"scene:{sid}" for sid in dataset_json["scene_ids"]]
        for source in sources:
            for seed in seeds:
                name = Path(source).stem if not str(source).startswith("scene:") else str(source)[6:]
                run_id = f"{slug}/{name}/seed{seed:04d}"
                entries.append(
                    {
                        "run_id": run_id,
                        "axis": sorted(assignment)[0] if len(assignment) == 1 else "grid",
                        "value": next(iter(assignment.values())) if len(assignment) == 1 else slug,
                        "assignment": assignment,
                        "source": str(source),
                        "dataset": dataset_json,
                        "config": config_json,
                        "seed": int(seed),
                        "out_dir": str(out_dir / "runs" / run_id),
                    }
                )
    return entries


def _entry_layout(entry: dict):
    source = entry["source"]
    if source.startswith("scene:"):
        dataset = entry["dataset"]
        grid = ErpGrid(width=int(dataset.get("erp_width", 1024)), height=int(dataset.get("erp_height", 512)))
        scene = next(
            s
            for s in dsynview.default_scenes(
                mask_size=dataset.get("mask_size", "M"),
                mask_type=dataset.get("mask_type", "erp_reprojected"),
            )
            if s.scene_id == source[6:]
        )
        return dsynview.scene_layout(
            scene, grid, mask_indices=tuple(dataset.get("mask_indices", (0, 1, 2)))
        )
    return layout_mod.load_layout(source)


def execute_sweep_entry(entry: dict, backend_spec: str) -> dict:
    """Run one sweep entry; returns its summary record. Module-level so a
    process pool can pickle it."""
    layout = _entry_layout(entry)
    config = PipelineConfig.from_json(entry["config"])
    warnings = layout_mod.validate(layout)
    result = run_pipeline(layout, config, backend_spec, entry["seed"])
    write_run_artifacts(result, entry["source"], config, Path(entry["out_dir"]), warnings)
    return {
        "run_id": entry["run_id"],
        "status": "ok",
        "config_hash": result.config_digest,
        "axis": entry["axis"],
        "value": entry["value"],
        "seed": entry["seed"],
    }


def _entry_resume_state(entry: dict) -> str:
    """'missing', 'done' or raises on a config-hash mismatch."""
    run_json = Path(entry["out_dir"]) / "run.json"
    if not run_json.exists():
        return "missing"
    manifest = json.loads(run_json.read_text())
    expected = config_hash(PipelineConfig.from_json(entry["config"]))
    if manifest.get("config_hash") != expected:
        raise ValueError(
            f"resume mismatch at {entry['run_id']}: existing run has config "
            f"{manifest.get('config_hash')}, sweep expects {expected}"
        )
    return "done"


def cmd_sweep(args) -> int:
    sweep = json.loads(Path(args.sweep).read_text())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = build_sweep_entries(sweep, out_dir)
    axis = sweep.get("axis", "grid")
    print(f"sweep axis {axis!r}: {len(entries)} runs")

    todo = []
    for entry in entries:
        if args.resume and _entry_resume_state(entry) == "done":
            continue
        todo.append(entry)
    print(f"executing {len(todo)} runs ({len(entries) - len(todo)} already present)")

    records = {}
    failures = 0
    if args.workers > 1 and todo:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = {entry["run_id"]: pool.submit(execute_sweep_entry, entry, args.backend) for entry in todo}
            for run_id, future in futures.items():
                try:
                    records[run_id] = future.result()
                except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                    records[run_id] = {"run_id": run_id, "status": "failed", "error": str(exc)}
                    failures += 1
    else:
        for entry in todo:
            try:
                records[entry["run_id"]] = execute_sweep_entry(entry, args.backend)
            except Exception as exc:  # noqa: BLE001
                records[entry["run_id"]] = {"run_id": entry["run_id"], "status": "failed", "error": str(exc)}
                failures += 1

    rows = []
    for entry in entries:
        run_json = Path(entry["out_dir"]) / "run.json"
        if not run_json.exists():
            continue
        rows.append(
            evalkit.MetricRow(
                config_id=_value_slug(entry["value"]),
                params={entry["axis"]: entry["value"]},
            )
        )
    table = evalkit.aggregate(rows, axis)
    evalkit.write_metrics_csv(table, axis, out_dir / "aggregate.csv")
    (out_dir / "aggregate.txt").write_text(evalkit.format_metrics_table(table, axis))
    plots.render_parameter_plots(table, axis, out_dir / "figures")
    manifest = {
        "axis": axis,
        "values": sweep.get("values", sweep.get("axes")),
        "one_at_a_time": bool(sweep.get("one_at_a_time", True)),
        "runs": [records.get(e["run_id"], {"run_id": e["run_id"], "status": "skipped"}) for e in entries],
    }
    (out_dir / "sweep_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"sweep complete: {len(entries) - failures} ok, {failures} failed")
    return 0


# ---------------------------------------------------------------------------
# Dataset / mask utilities


def cmd_make_dataset(args) -> int:
    cfg = dsynview.DsynviewConfig(
        erp_width=args.width,
        erp_height=args.height,
        seeds=tuple(range(args.seeds)),
        mask_size=args.mask_size,
        mask_type=args.mask_type,
    )
    manifest_path = dsynview.write_dataset(cfg, args.out)
    manifest = dsynview.build_manifest(cfg)
    print(
        f"wrote {manifest_path}: {len(manifest.panorama_entries)} panoramas, "
        f"{len(manifest.perspective_entries)} perspective views, "
        f"{len(manifest.reference_jobs)} reference jobs"
    )
    return 0


def cmd_project_masks(args) -> int:
    mask = load_mask_png(args.mask)
    pose = pose_from_json(json.loads(Path(args.pose).read_text()))
    if args.mode == "to-persp":
        from .geometry import project_mask_erp_to_persp

        save_mask_png(project_mask_erp_to_persp(mask, pose), args.out)
    elif args.mode == "bbox-to-erp":
        from .geometry import reproject_bbox_to_erp

        grid = ErpGrid(width=args.width, height=args.height)
        save_mask_png(reproject_bbox_to_erp(mask, pose, grid), args.out)
    else:  # roundtrip: ERP mask -> view bbox -> ERP
        from .geometry import project_mask_erp_to_persp, reproject_bbox_to_erp

        grid = ErpGrid(width=mask.shape[1], height=mask.shape[0])
        persp = project_mask_erp_to_persp(mask, pose)
        if not persp.any():
            raise ValueError("mask is not visible from the given pose")
        save_mask_png(reproject_bbox_to_erp(persp, pose, grid), args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Evaluation


def _load_detections(path) -> dict:
    by_run: dict = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            by_run.setdefault(record["run"], []).append(
                evalkit.DetectionRecord(
                    object_id=int(record["object_id"]),
                    box=tuple(record["box"]),
                    score=float(record.get("score", 1.0)),
                )
            )
    return by_run


def cmd_evaluate(args) -> int:
    runs_dir = Path(args.runs)
    run_manifests = sorted(runs_dir.rglob("run.json"))
    if not run_manifests:
        raise FileNotFoundError(f"no run.json files under {runs_dir}")
    detections = _load_detections(args.detections) if args.detections else {}
    plugin_dir = args.plugin_dir or os.environ.get(PLUGIN_DIR_ENV)
    references = (
        [l for l in Path(args.references).read_text().splitlines() if l.strip()]
        if args.references
        else []
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "scorer_cache"

    rows = []
    failures = []
    for manifest_path in run_manifests:
        manifest = json.loads(manifest_path.read_text())
        run_dir = manifest_path.parent
        run_key = str(run_dir.relative_to(runs_dir))
        row = evalkit.MetricRow(config_id=run_key, params=manifest.get("config", {}))
        dets = detections.get(run_key)
        if dets is not None and manifest.get("layout", "").endswith(".json") and Path(manifest["layout"]).exists():
            layout = layout_mod.load_layout(manifest["layout"])
            row.iou = evalkit.layout_iou(dets, layout)
        if plugin_dir:
            images = [run_dir / "erp.png"]
            for metric, plugin_id in (
                ("clip_score", "clip_score"),
                ("image_reward", "image_reward"),
                ("fid", "fid"),
                ("cmmd", "cmmd"),
            ):
                try:
                    value = evalkit.scorer_plugin_run(
                        images, references, plugin_id, plugin_dir, cache_dir=cache_dir
                    )
                except evalkit.ScorerError as exc:
                    failures.append({"run": run_key, "metric": metric, "error": str(exc)})
                    continue
                if value is not None:
                    setattr(row, metric, value)
        rows.append(row)

    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        import csv

        writer = csv.writer(fh)
        writer.writerow(["run", *evalkit.METRIC_COLUMNS])
        for row in rows:
            writer.writerow(
                [row.config_id]
                + ["" if getattr(row, m) is None else f"{getattr(row, m):.6g}" for m in evalkit.METRIC_COLUMNS]
            )
    if failures:
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    if args.group_by:
        for row in rows:
            row.params = {args.group_by: row.params.get(args.group_by)}
        table = evalkit.aggregate(rows, args.group_by)
        evalkit.write_metrics_csv(table, args.group_by, out_dir / "aggregate.csv")
        (out_dir / "aggregate.txt").write_text(evalkit.format_metrics_table(table, args.group_by))
        plots.render_parameter_plots(table, args.group_by, out_dir / "figures")
    print(f"evaluated {len(rows)} runs ({len(failures)} scorer failures) -> {out_dir/'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spherefuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run one pipeline on a layout")
    p.add_argument("--layout", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--backend", default="mock")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sweep", help="one-parameter-at-a-time hyperparameter sweep")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", default="mock")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-dataset", help="write the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--seeds", type=int, default=168)
    p.add_argument("--mask-size", default="M", choices=list(dsynview.MASK_SIZES))
    p.add_argument("--mask-type", default="erp_reprojected", choices=list(dsynview.MASK_TYPES))
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("project-masks", help="mask projection utilities")
    p.add_argument("--mask", required=True)
    p.add_argument("--pose", required=True, help="JSON pose record")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="to-persp", choices=["to-persp", "bbox-to-erp", "roundtrip"])
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=512)
    p.set_defaults(func=cmd_project_masks)

    p = sub.add_parser("evaluate", help="compute metric rows and tables")
    p.add_argument("--runs", required=True)
    p.add_argument("--detections", default=None, help="JSONL detection records")
    p.add_argument("--plugin-dir", default=None)
    p.add_argument("--references", default=None, help="text file listing reference images")
    p.add_argument("--group-by", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BackendFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND_FAILURE
    except (FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
