"""Dense-layout data model: global prompt plus per-object masks and prompts.

A Layout is the user-facing description of a scene: one background prompt
for the whole canvas and an ordered list of (mask, prompt) regions. The
implicit background denoising path is synthesized by background_region so
that every pixel is covered by at least one path at merge time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ErpGrid, load_mask_png


class LayoutError(ValueError):
    """Hard layout defect: wrong mask shape, non-binary values, bad ids."""


@dataclass
class RegionSpec:
    mask: np.ndarray
    prompt: str
    lora_enabled: bool = False
    object_id: int = 0


@dataclass
class Layout:
    grid: ErpGrid
    background_prompt: str
    regions: list[RegionSpec] = field(default_factory=list)
    include_objects_in_global: bool = False


BACKGROUND_OBJECT_ID = -1


def validate(layout: Layout, max_regions: int = 3) -> list[str]:
    """Check a layout, raising LayoutError on hard defects.

    Returns a list of warning strings for conditions that degrade output
    quality but are still merged correctly: overlapping masks (resolved by
    averaging) and masks touching the pole rows.
    """
    grid = layout.grid
    if len(layout.regions) > max_regions:
        raise LayoutError(f"layout has {len(layout.regions)} regions, max is {max_regions}")
    seen_ids = set()
    for region in layout.regions:
        if region.mask.shape != (grid.height, grid.width):
            raise LayoutError(
                f"region {region.object_id}: mask shape {region.mask.shape} does not match "
                f"grid {(grid.height, grid.width)}"
            )
        values = np.unique(region.mask)
        if not np.all(np.isin(values, (0, 1))):
            raise LayoutError(f"region {region.object_id}: mask values must be 0/1")
        if not region.mask.any():
            raise LayoutError(f"region {region.object_id}: mask is empty")
        if region.object_id in seen_ids:
            raise LayoutError(f"duplicate object_id {region.object_id}")
        seen_ids.add(region.object_id)

    warnings = []
    for i, a in enumerate(layout.regions):
        for b in layout.regions[i + 1 :]:
            if np.any(a.mask & b.mask):
                warnings.append(
                    f"masks {a.object_id} and {b.object_id} overlap; overlapping regions "
                    "are averaged and may show object neglect"
                )
    for region in layout.regions:
        if region.mask[0, :].any() or region.mask[-1, :].any():
            warnings.append(
                f"mask {region.object_id} touches a pole row; objects near the poles "
                "render poorly"
            )
    return warnings


def effective_global_prompt(layout: Layout, trigger: str | None = None) -> str:
    """Background prompt, optionally extended with the object prompts and
    prefixed with the panorama trigger phrase."""
    text = layout.background_prompt
    if layout.include_objects_in_global and layout.regions:
        text = text + ", " + ", ".join(r.prompt for r in layout.regions)
    if trigger:
        text = trigger + ", " + text
    return text


def background_region(layout: Layout, trigger: str | None = None, lora_enabled: bool = False) -> RegionSpec:
    """The implicit background path: all-ones mask over the full canvas."""
    mask = np.ones((layout.grid.height, layout.grid.width), dtype=np.uint8)
    return RegionSpec(
        mask=mask,
        prompt=effective_global_prompt(layout, trigger),
        lora_enabled=lora_enabled,
        object_id=BACKGROUND_OBJECT_ID,
    )


def load_layout(path) -> Layout:
    """Read a layout manifest.

    Format: {"width", "height", "background_prompt", "regions":
    [{"mask_png_path", "prompt", "lora"}], "include_objects_in_global"}.
    Mask paths are resolved relative to the manifest file.
    """
    path = Path(path)
    spec = json.loads(path.read_text())
    grid = ErpGrid(width=int(spec["width"]), height=int(spec["height"]))
    regions = []
    for idx, entry in enumerate(spec.get("regions", [])):
        mask = load_mask_png(path.parent / entry["mask_png_path"])
        regions.append(
            RegionSpec(
                mask=mask,
                prompt=entry["prompt"],
                lora_enabled=bool(entry.get("lora", False)),
                object_id=int(entry.get("object_id", idx)),
            )
        )
    return Layout(
        grid=grid,
        background_prompt=spec["background_prompt"],
        regions=regions,
        include_objects_in_global=bool(spec.get("include_objects_in_global", False)),
    )


def save_layout(layout: Layout, path, mask_paths: list[str]) -> None:
    """Write a layout manifest; masks must already be saved at mask_paths
    (relative to the manifest)."""
    spec = {
        "width": layout.grid.width,
        "height": layout.grid.height,
        "background_prompt": layout.background_prompt,
        "include_objects_in_global": layout.include_objects_in_global,
        "regions": [
            {
                "mask_png_path": mask_path,
                "prompt": region.prompt,
                "lora": region.lora_enabled,
                "object_id": region.object_id,
            }
            for region, mask_path in zip(layout.regions, mask_paths)
        ],
    }
    Path(path).write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
