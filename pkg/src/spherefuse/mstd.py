"""Sliding-window panorama pipeline with cyclic stitch windows.

The ERP latent canvas is denoised window by window (windows span the full
latent height and slide horizontally). With stitching enabled the canvas
is first extended cyclically by half a window so that seam-spanning
windows exist; after each step the padded accumulation is folded back
modulo the canvas width, which merges the left and right edges and keeps
the output cyclically continuous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import DiffusionState, MockCodec, init_noise
from .config import PipelineConfig, config_hash
from .fusion import BootstrapPlan, PathSet, assign_bootstrap_colors, build_paths, merge_paths, step_paths
from .geometry import extend_cyclic, fold_cyclic
from .layout import Layout


@dataclass(frozen=True)
class WindowPlan:
    """Horizontal window tiling of the (padded) latent canvas."""

    window_size: int
    stride: int
    stitch_enabled: bool = True
    pad: int = 0

    def __post_init__(self):
        if self.stride <= 0 or self.window_size <= 0:
            raise ValueError("window_size and stride must be positive")
        if self.stride > self.window_size:
            raise ValueError(
                f"stride {self.stride} must not exceed window size {self.window_size}"
            )


def make_windows(plan: WindowPlan, canvas_width: int) -> list[int]:
    """Window start offsets over a canvas of `canvas_width` columns.

    Offsets advance by `stride`; a final window is added flush with the
    right edge if the stride pattern does not land there. With stitching,
    offsets whose cyclic phase ((offset - pad) mod unpadded width)
    duplicates an earlier window are dropped, so every canvas column is
    covered by the same number of windows.
    """
    win = plan.window_size
    if canvas_width < win:
        raise ValueError(f"canvas width {canvas_width} smaller than window {win}")
    offsets = list(range(0, canvas_width - win + 1, plan.stride))
    if offsets[-1] != canvas_width - win:
        offsets.append(canvas_width - win)
    if plan.stitch_enabled and plan.pad > 0:
        width = canvas_width - 2 * plan.pad
        seen = set()
        unique = []
        for offset in offsets:
            phase = (offset - plan.pad) % width
            if phase not in seen:
                seen.add(phase)
                unique.append(offset)
        offsets = unique
    return offsets


def stitch_fold(padded_canvas: np.ndarray, pad: int, weights: np.ndarray | None = None) -> np.ndarray:
    """Fold padded-coordinate accumulation back onto the cyclic canvas."""
    return fold_cyclic(padded_canvas, pad, weights=weights)


@dataclass
class MstdResult:
    image: np.ndarray
    latent: np.ndarray
    seed: int
    config_digest: str
    counters: dict = field(default_factory=dict)


def mstd_sample(
    layout: Layout,
    config: PipelineConfig,
    denoiser,
    scheduler,
    seed: int,
    codec=None,
    initial_noise: list[np.ndarray] | None = None,
) -> MstdResult:
    """Run the full windowed denoising loop and decode the ERP canvas.

    Deterministic in (layout, config, seed). `initial_noise` overrides the
    seeded per-path init latents (testing hook).
    """
    if codec is None:
        codec = MockCodec()
    latent_shape = codec.latent_shape(config.erp_height, config.erp_width)
    _, lat_h, lat_w = latent_shape

    prompts, masks, foreground, object_ids, lora_flags = build_paths(
        layout,
        latent_shape,
        codec.downscale,
        seed,
        trigger=config.trigger_phrase,
        lora_mode=config.lora_mode,
    )
    contexts = [{"branch": "pano", "lora": flag} for flag in lora_flags]
    n_paths = len(prompts)

    window = config.window if config.window is not None else lat_h
    if config.stitch:
        pad = config.pad if config.pad is not None else window // 2
    else:
        pad = config.pad if config.pad is not None else 0
    plan = WindowPlan(
        window_size=window, stride=config.stride, stitch_enabled=config.stitch, pad=pad
    )
    padded_width = lat_w + 2 * pad
    offsets = make_windows(plan, padded_width)
    padded_masks = [extend_cyclic(m, pad) for m in masks]

    bootstrap = BootstrapPlan(
        n_steps=config.bootstrap_steps,
        coupling_mode=config.bootstrap_coupling,
        color_seed=seed,
    )
    noises = initial_noise
    if noises is None:
        noises = init_noise(latent_shape, seed, config.noise_coupling, n_paths)
    elif len(noises) != n_paths:
        raise ValueError(f"initial_noise has {len(noises)} latents, expected {n_paths}")
    latents = [scheduler.init_sigma * n for n in noises]
    fg_indices = [i for i, fg in enumerate(foreground) if fg]
    bootstrap_path_steps = 0

    for t_index in reversed(range(scheduler.num_steps)):
        steps_done = scheduler.num_steps - 1 - t_index
        colors = assign_bootstrap_colors(bootstrap, len(fg_indices), 1, t_index, seed=seed)
        if steps_done < bootstrap.n_steps:
            bootstrap_path_steps += len(fg_indices)
        padded_latents = [extend_cyclic(z, pad) for z in latents]
        value = np.zeros((latent_shape[0], lat_h, padded_width), dtype=np.float32)
        count = np.zeros(padded_width, dtype=np.float32)
        for offset in offsets:
            lo, hi = offset, offset + window
            active = [
                i
                for i in range(n_paths)
                if not foreground[i] or padded_masks[i][:, lo:hi].any()
            ]
            window_set = PathSet(
                states=[
                    DiffusionState(
                        latent=padded_latents[i][:, :, lo:hi],
                        t_index=t_index,
                        path_id=i,
                        rng_seed=seed + i,
                    )
                    for i in active
                ],
                masks=[padded_masks[i][:, lo:hi] for i in active],
                prompts=[prompts[i] for i in active],
                foreground=[foreground[i] for i in active],
                contexts=[contexts[i] for i in active],
            )
            active_fg_slots = [fg_indices.index(i) for i in active if foreground[i]]
            window_colors = colors[active_fg_slots] if active_fg_slots else colors
            stepped = step_paths(
                window_set,
                denoiser,
                scheduler,
                t_index,
                bootstrap,
                colors=window_colors,
                codec=codec,
                noise_tag=offset,
            )
            fused = merge_paths(stepped, window_set.masks)
            value[:, :, lo:hi] += fused
            count[lo:hi] += 1.0
        canvas = stitch_fold(value, pad, weights=np.broadcast_to(count, value.shape))
        latents = [canvas.copy() for _ in range(n_paths)]

    final = latents[0]
    return MstdResult(
        image=codec.decode(final),
        latent=final,
        seed=seed,
        config_digest=config_hash(config),
        counters={"bootstrap_path_steps": bootstrap_path_steps, "windows_per_step": len(offsets)},
    )
