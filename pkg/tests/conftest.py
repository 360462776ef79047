from __future__ import annotations

import json

import numpy as np
import pytest

from spherefuse.geometry import save_mask_png


@pytest.fixture
def tiny_layout_dir(tmp_path):
    """A 128x64 layout with one region, written as manifest + mask PNG."""
    mask = np.zeros((64, 128), dtype=np.uint8)
    mask[24:40, 20:50] = 1
    save_mask_png(mask, tmp_path / "mask0.png")
    (tmp_path / "layout.json").write_text(
        json.dumps(
            {
                "width": 128,
                "height": 64,
                "background_prompt": "a green field",
                "include_objects_in_global": False,
                "regions": [{"mask_png_path": "mask0.png", "prompt": "cow", "lora": False}],
            }
        )
    )
    return tmp_path


def write_config(path, **overrides):
    base = {
        "pipeline": "mstd",
        "erp_width": 128,
        "erp_height": 64,
        "steps": 3,
        "bootstrap_steps": 1,
        "stride": 4,
    }
    base.update(overrides)
    path.write_text(json.dumps(base))
    return path
