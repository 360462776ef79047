"""Synthetic spherical-layout benchmark generator.

Six scenes (three background prompts, two object sets each) with three
rectangular object masks per scene in three sizes, a regular and an
ERP-reprojected mask style, and the reference-image job list used for
perspective quality metrics. Placements are canonical (thirds layout,
vertically centered) and written next to the dataset so the benchmark is
reproducible from the manifest alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    CameraPose,
    ErpGrid,
    erp_to_spherical,
    mask_bbox,
    pose_to_json,
    project_mask_erp_to_persp,
    reproject_bbox_to_erp,
    save_mask_png,
)
from .layout import Layout, RegionSpec

MASK_LAYOUT_VERSION = 1

BACKGROUNDS = ("an indoor room", "a green field", "a busy street")

# object_prompts[background][set][slot]; slots are the aspect classes
# 0 = long, 1 = square, 2 = tall
OBJECT_PROMPTS = {
    "an indoor room": (("table", "television", "wardrobe"), ("bed", "potted plant", "door")),
    "a green field": (("cow", "cat", "tree"), ("sheep", "pond", "windmill")),
    "a busy street": (("bus", "sign", "building"), ("car", "bicycle", "traffic light")),
}

MASK_SIZES = ("S", "M", "L")
MASK_TYPES = ("regular", "erp_reprojected")

_BG_SLUGS = {"an indoor room": "room", "a green field": "field", "a busy street": "street"}


@dataclass(frozen=True)
class SceneSpec:
    background_prompt: str
    object_prompts: tuple
    mask_size: str = "M"
    mask_type: str = "erp_reprojected"
    mask_set_id: int = 1

    @property
    def scene_id(self) -> str:
        return f"{_BG_SLUGS[self.background_prompt]}-set{self.mask_set_id}"


def default_scenes(mask_size: str = "M", mask_type: str = "erp_reprojected") -> list[SceneSpec]:
    """The six benchmark scenes (3 backgrounds x 2 object sets)."""
    if mask_size not in MASK_SIZES:
        raise ValueError(f"mask_size must be one of {MASK_SIZES}")
    if mask_type not in MASK_TYPES:
        raise ValueError(f"mask_type must be one of {MASK_TYPES}")
    scenes = []
    for background in BACKGROUNDS:
        for set_id in (1, 2):
            scenes.append(
                SceneSpec(
                    background_prompt=background,
                    object_prompts=OBJECT_PROMPTS[background][set_id - 1],
                    mask_size=mask_size,
                    mask_type=mask_type,
                    mask_set_id=set_id,
                )
            )
    return scenes


def base_mask_dims(slot: int, width: int) -> tuple[int, int]:
    """S-size (w, h) for an aspect slot, scaled to the canvas width."""
    if slot == 0:  # long, 2:1
        return width // 16, width // 32
    if slot == 1:  # square
        return 3 * width // 64, 3 * width // 64
    if slot == 2:  # tall, 1:2
        return width // 32, width // 16
    raise ValueError(f"slot must be 0..2, got {slot}")


def mask_dims(slot: int, size: str, width: int) -> tuple[int, int]:
    """Mask (w, h) for a size class. L doubles S linearly so the S:L area
    ratio is exactly 1:4; M targets 2x area via a sqrt(2) linear scale
    (rounded to whole pixels)."""
    w0, h0 = base_mask_dims(slot, width)
    if size == "S":
        return w0, h0
    if size == "L":
        return 2 * w0, 2 * h0
    if size == "M":
        return round(w0 * math.sqrt(2.0)), round(h0 * math.sqrt(2.0))
    raise ValueError(f"size must be one of {MASK_SIZES}, got {size}")


def slot_center(slot: int, grid: ErpGrid) -> tuple[int, int]:
    """Canonical placement: left/center/right thirds, vertically centered."""
    return round(grid.width * (2 * slot + 1) / 6), grid.height // 2


def rect_mask(grid: ErpGrid, center: tuple[int, int], dims: tuple[int, int]) -> np.ndarray:
    cu, cv = center
    w, h = dims
    x0 = cu - w // 2
    y0 = cv - h // 2
    mask = np.zeros((grid.height, grid.width), dtype=np.uint8)
    mask[y0 : y0 + h, x0 : x0 + w] = 1
    return mask


def build_masks(scene: SceneSpec, grid: ErpGrid) -> list[np.ndarray]:
    """The three regular (axis-aligned rectangle) masks of a scene."""
    return [
        rect_mask(grid, slot_center(slot, grid), mask_dims(slot, scene.mask_size, grid.width))
        for slot in range(3)
    ]


def mask_placements(grid: ErpGrid) -> dict:
    """Machine-readable record of the canonical mask geometry."""
    return {
        "version": MASK_LAYOUT_VERSION,
        "grid": {"width": grid.width, "height": grid.height},
        "slots": [
            {
                "slot": slot,
                "aspect": ("long", "square", "tall")[slot],
                "center": list(slot_center(slot, grid)),
                "dims": {size: list(mask_dims(slot, size, grid.width)) for size in MASK_SIZES},
            }
            for slot in range(3)
        ],
    }


def _mask_center_camera(mask: np.ndarray, grid: ErpGrid, fov_deg: float, view_size: int) -> CameraPose:
    x0, y0, x1, y1 = mask_bbox(mask)
    cu = (x0 + x1 + 1) / 2.0
    cv = (y0 + y1 + 1) / 2.0
    lon, lat = erp_to_spherical(cu, cv, grid)
    return CameraPose(
        lon=float(lon), lat=float(lat), roll=0.0, fov=math.radians(fov_deg), image_size=view_size
    )


def target_perspective_mask(
    mask: np.ndarray, grid: ErpGrid, fov_deg: float = 120.0, view_size: int = 512
) -> tuple[np.ndarray, CameraPose]:
    """Project a mask into the view centered on it (object centered and
    fully visible). Raises for masks too close to a pole to fit."""
    if mask[0, :].any() or mask[-1, :].any():
        raise ValueError(
            "mask touches a pole row; its planar center does not define a usable "
            "reprojection view. Move the mask toward the equator."
        )
    cam = _mask_center_camera(mask, grid, fov_deg, view_size)
    persp = project_mask_erp_to_persp(mask, cam)
    if not persp.any():
        raise ValueError(
            "mask projects to an empty perspective view; it is degenerate for reprojection"
        )
    x0, y0, x1, y1 = mask_bbox(persp)
    if x0 == 0 or y0 == 0 or x1 == view_size - 1 or y1 == view_size - 1:
        raise ValueError(
            "mask is too close to a pole (or too large) for the reprojection view; "
            "move it toward the equator or shrink it"
        )
    return persp, cam


def erp_reproject_masks(
    masks: list[np.ndarray], grid: ErpGrid, fov_deg: float = 120.0, view_size: int = 512
) -> list[np.ndarray]:
    """Replace each mask with the ERP rasterization of its perspective bbox.

    Per mask: center -> spherical -> camera at that axis -> project the
    mask into the view -> take the bbox -> rasterize the box back onto
    the ERP grid. This produces the ERP-distorted (curved-edge) style.
    """
    out = []
    for mask in masks:
        persp, cam = target_perspective_mask(mask, grid, fov_deg=fov_deg, view_size=view_size)
        box_mask = np.zeros_like(persp)
        x0, y0, x1, y1 = mask_bbox(persp)
        box_mask[y0 : y1 + 1, x0 : x1 + 1] = 1
        out.append(reproject_bbox_to_erp(box_mask, cam, grid))
    return out


def scene_masks(scene: SceneSpec, grid: ErpGrid, fov_deg: float = 120.0, view_size: int = 512) -> list[np.ndarray]:
    masks = build_masks(scene, grid)
    if scene.mask_type == "erp_reprojected":
        masks = erp_reproject_masks(masks, grid, fov_deg=fov_deg, view_size=view_size)
    return masks


def scene_layout(
    scene: SceneSpec,
    grid: ErpGrid,
    mask_indices: tuple[int, ...] = (0, 1, 2),
    include_objects_in_global: bool = False,
    lora_regions: bool = False,
    fov_deg: float = 120.0,
    view_size: int = 512,
) -> Layout:
    """Materialize a scene as a Layout (optionally a subset of its masks)."""
    masks = scene_masks(scene, grid, fov_deg=fov_deg, view_size=view_size)
    regions = [
        RegionSpec(
            mask=masks[slot],
            prompt=scene.object_prompts[slot],
            lora_enabled=lora_regions,
            object_id=slot,
        )
        for slot in mask_indices
    ]
    return Layout(
        grid=grid,
        background_prompt=scene.background_prompt,
        regions=regions,
        include_objects_in_global=include_objects_in_global,
    )


@dataclass
class DsynviewConfig:
    erp_width: int = 1024
    erp_height: int = 512
    seeds: tuple = tuple(range(168))
    mask_size: str = "M"
    mask_type: str = "erp_reprojected"
    mask_indices: tuple = (0, 1, 2)
    reproject_fov_deg: float = 120.0
    reproject_view_size: int = 512

    @property
    def grid(self) -> ErpGrid:
        return ErpGrid(width=self.erp_width, height=self.erp_height)

    def digest(self) -> str:
        import hashlib

        canonical = json.dumps(
            {
                "erp_width": self.erp_width,
                "erp_height": self.erp_height,
                "seeds": list(self.seeds),
                "mask_size": self.mask_size,
                "mask_type": self.mask_type,
                "mask_indices": list(self.mask_indices),
                "reproject_fov_deg": self.reproject_fov_deg,
                "reproject_view_size": self.reproject_view_size,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class BenchmarkManifest:
    scenes: list[SceneSpec]
    panorama_entries: list[dict]
    perspective_entries: list[dict]
    reference_jobs: list[dict]
    meta: dict = field(default_factory=dict)


def build_manifest(cfg: DsynviewConfig) -> BenchmarkManifest:
    """Enumerate the benchmark: scene x seed panoramas, their per-object
    perspective extractions, and the reference 2D-image jobs.

    Reference jobs cross all 18 object prompts with all 6 scenes and every
    seed (the per-scene expansion); the factorization used is recorded in
    the manifest meta.
    """
    grid = cfg.grid
    digest = cfg.digest()
    scenes = default_scenes(mask_size=cfg.mask_size, mask_type=cfg.mask_type)
    panorama_entries = []
    perspective_entries = []
    for scene in scenes:
        masks = scene_masks(
            scene, grid, fov_deg=cfg.reproject_fov_deg, view_size=cfg.reproject_view_size
        )
        cams = [
            _mask_center_camera(masks[slot], grid, cfg.reproject_fov_deg, cfg.reproject_view_size)
            for slot in cfg.mask_indices
        ]
        for seed in cfg.seeds:
            entry_id = f"{scene.scene_id}_seed{seed:04d}"
            panorama_entries.append(
                {
                    "entry_id": entry_id,
                    "scene_id": scene.scene_id,
                    "seed": int(seed),
                    "config_hash": digest,
                    "layout_path": f"layouts/{scene.scene_id}/layout.json",
                    "output_path": f"panoramas/{entry_id}.png",
                }
            )
            for slot, cam in zip(cfg.mask_indices, cams):
                perspective_entries.append(
                    {
                        "entry_id": f"{entry_id}_obj{slot}",
                        "scene_id": scene.scene_id,
                        "seed": int(seed),
                        "config_hash": digest,
                        "object_slot": int(slot),
                        "prompt": scene.object_prompts[slot],
                        "camera": pose_to_json(cam),
                        "panorama_path": f"panoramas/{entry_id}.png",
                        "output_path": f"perspectives/{entry_id}_obj{slot}.png",
                    }
                )

    all_prompts = []
    for scene in scenes:
        for slot in range(3):
            all_prompts.append((scene.object_prompts[slot], slot))
    reference_jobs = []
    for prompt, slot in all_prompts:
        for scene in scenes:
            for seed in cfg.seeds:
                job_id = f"ref_{prompt.replace(' ', '_')}_{scene.scene_id}_seed{seed:04d}"
                reference_jobs.append(
                    {
                        "job_id": job_id,
                        "prompt": prompt,
                        "config_hash": digest,
                        "background_prompt": scene.background_prompt,
                        "scene_id": scene.scene_id,
                        "object_slot": int(slot),
                        "seed": int(seed),
                        "target_mask_path": f"masks/reference/slot{slot}_{cfg.mask_size}.png",
                        "output_path": f"references/{job_id}.png",
                    }
                )

    meta = {
        "config_hash": digest,
        "erp_width": cfg.erp_width,
        "erp_height": cfg.erp_height,
        "mask_size": cfg.mask_size,
        "mask_type": cfg.mask_type,
        "seeds": len(cfg.seeds),
        "n_prompts": len(all_prompts),
        "n_scenes": len(scenes),
        "reference_factorization": {
            "rule": "prompts x scenes x seeds",
            "prompts": len(all_prompts),
            "scenes": len(scenes),
            "seeds": len(cfg.seeds),
            "also_equals": "3 * perspective_entries_per_scene_group * scenes",
        },
        "mask_layout_version": MASK_LAYOUT_VERSION,
    }
    return BenchmarkManifest(
        scenes=scenes,
        panorama_entries=panorama_entries,
        perspective_entries=perspective_entries,
        reference_jobs=reference_jobs,
        meta=meta,
    )


def render_reference_image(
    job: dict,
    target_mask: np.ndarray,
    denoiser,
    scheduler,
    codec=None,
    bootstrap_steps: int = 20,
):
    """Render one reference 2D image with the plain region-fusion baseline.

    A single centered region (the job's target perspective mask) plus the
    background path are denoised on a square canvas; no sliding windows
    or stitching are involved since the canvas is one window wide.
    Returns the decoded image array, deterministic in the job seed.
    """
    from .backend import DiffusionState, MockCodec, init_noise
    from .fusion import BootstrapPlan, PathSet, downsample_mask, md_step

    if codec is None:
        codec = MockCodec()
    size = target_mask.shape[0]
    if target_mask.shape != (size, size):
        raise ValueError("reference target mask must be square")
    shape = (codec.channels, size // codec.downscale, size // codec.downscale)
    seed = int(job["seed"])
    latent_mask = downsample_mask(target_mask, codec.downscale).astype(np.float32)
    noises = init_noise(shape, seed, True, 2)
    paths = PathSet(
        states=[
            DiffusionState(scheduler.init_sigma * noises[i], scheduler.num_steps - 1, i, seed + i)
            for i in range(2)
        ],
        masks=[np.ones(shape[-2:], dtype=np.float32), latent_mask],
        prompts=[job["background_prompt"], job["prompt"]],
        foreground=[False, True],
    )
    plan = BootstrapPlan(
        n_steps=min(bootstrap_steps, scheduler.num_steps), coupling_mode="none", color_seed=seed
    )
    for t_index in reversed(range(scheduler.num_steps)):
        paths = md_step(paths, denoiser, scheduler, t_index, plan, codec=codec)
    return codec.decode(paths.states[0].latent)


def write_dataset(cfg: DsynviewConfig, out_dir) -> Path:
    """Write masks, layouts, placements and the JSONL manifest.

    Deterministic: the same config yields byte-identical files.
    """
    out_dir = Path(out_dir)
    manifest = build_manifest(cfg)
    grid = cfg.grid

    (out_dir / "masks" / "reference").mkdir(parents=True, exist_ok=True)
    for scene in manifest.scenes:
        scene_dir = out_dir / "layouts" / scene.scene_id
        scene_dir.mkdir(parents=True, exist_ok=True)
        masks = scene_masks(
            scene, grid, fov_deg=cfg.reproject_fov_deg, view_size=cfg.reproject_view_size
        )
        mask_names = []
        for slot in cfg.mask_indices:
            name = f"mask{slot}.png"
            save_mask_png(masks[slot], scene_dir / name)
            mask_names.append(name)
        layout = scene_layout(
            scene,
            grid,
            mask_indices=cfg.mask_indices,
            fov_deg=cfg.reproject_fov_deg,
            view_size=cfg.reproject_view_size,
        )
        from .layout import save_layout

        save_layout(layout, scene_dir / "layout.json", mask_names)

    # shared centered target masks for the reference jobs (one per slot)
    first_set_scene = manifest.scenes[0]
    for slot in range(3):
        mask = scene_masks(
            first_set_scene, grid, fov_deg=cfg.reproject_fov_deg, view_size=cfg.reproject_view_size
        )[slot]
        persp, _ = target_perspective_mask(
            mask, grid, fov_deg=cfg.reproject_fov_deg, view_size=cfg.reproject_view_size
        )
        save_mask_png(persp, out_dir / "masks" / "reference" / f"slot{slot}_{cfg.mask_size}.png")

    (out_dir / "placements.json").write_text(
        json.dumps(mask_placements(grid), indent=2, sort_keys=True) + "\n"
    )
    manifest_path = out_dir / "manifest.jsonl"
    with manifest_path.open("w") as fh:
        fh.write(json.dumps({"record": "meta", **manifest.meta}, sort_keys=True) + "\n")
        for entry in manifest.panorama_entries:
            fh.write(json.dumps({"record": "panorama", **entry}, sort_keys=True) + "\n")
        for entry in manifest.perspective_entries:
            fh.write(json.dumps({"record": "perspective", **entry}, sort_keys=True) + "\n")
        for job in manifest.reference_jobs:
            fh.write(json.dumps({"record": "reference", **job}, sort_keys=True) + "\n")
    return manifest_path
