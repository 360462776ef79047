"""Region-fusion core: per-region denoising paths, bootstrapping, merging.

Each region of a layout (plus the implicit background) owns one denoising
path. Every timestep, each path optionally composites a constant-color
field over its off-mask area (bootstrapping), predicts a residual with its
own prompt, and steps the scheduler; the stepped latents are then merged
into one shared canvas by mask-weighted averaging. All paths continue from
the merged canvas, so the procedure emits a single image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import DiffusionState, MockCodec, _stable_seed
from .layout import BACKGROUND_OBJECT_ID, Layout, background_region


@dataclass
class BootstrapPlan:
    """First n_steps of denoising composite constant colors off-mask.

    coupling_mode controls which axes of the per-timestep color table are
    forced equal: "branches" couples the panorama / perspective branches,
    "objects" couples all objects within a branch, "all" couples both,
    "none" draws every entry independently.
    """

    n_steps: int = 20
    coupling_mode: str = "none"
    color_seed: int = 0

    COUPLING_MODES = ("none", "branches", "objects", "all")

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError(f"bootstrap steps must be >= 0, got {self.n_steps}")
        if self.coupling_mode not in self.COUPLING_MODES:
            raise ValueError(f"unknown coupling mode {self.coupling_mode!r}")


@dataclass
class Counters:
    """Instrumentation for tests: how often the bootstrap compositing and
    the cross-branch exchange gate actually fired."""

    composites: int = 0
    gated_off: int = 0
    exchanges: int = 0


@dataclass
class PathSet:
    """Parallel per-path arrays for one denoising branch.

    masks live at latent resolution as float32 0/1; the background path
    (all-ones mask) guarantees coverage >= 1 everywhere.
    """

    states: list[DiffusionState]
    masks: list[np.ndarray]
    prompts: list[str]
    foreground: list[bool]
    contexts: list[dict] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.masks) == len(self.prompts) == len(self.foreground) == n):
            raise ValueError("path arrays must have equal length")
        if not self.contexts:
            self.contexts = [{} for _ in range(n)]

    def __len__(self) -> int:
        return len(self.states)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-max pooling to latent resolution: any foreground pixel in an
    8x8 block marks the latent cell, so small objects survive."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask shape {mask.shape} not divisible by factor {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    return blocks.max(axis=(1, 3)).astype(np.uint8)


def build_paths(
    layout: Layout,
    latent_shape: tuple,
    downscale: int,
    seed: int,
    trigger: str | None = None,
    lora_mode: str = "bg-only",
) -> tuple[list[str], list[np.ndarray], list[bool], list[int], list[bool]]:
    """Expand a layout into per-path prompts, latent masks and flags.

    Path 0 is always the background. lora_mode in {"yes", "bg-only", "no"}
    decides which paths carry the trigger phrase (and the lora context
    tag). Returns (prompts, masks, foreground, object_ids, lora_flags).
    """
    if lora_mode not in ("yes", "bg-only", "no"):
        raise ValueError(f"unknown lora_mode {lora_mode!r}")
    bg_trigger = trigger if lora_mode in ("yes", "bg-only") else None
    fg_trigger = trigger if lora_mode == "yes" else None
    background = background_region(layout, trigger=bg_trigger, lora_enabled=bg_trigger is not None)

    prompts = [background.prompt]
    masks = [np.ones(latent_shape[-2:], dtype=np.float32)]
    foreground = [False]
    object_ids = [BACKGROUND_OBJECT_ID]
    lora_flags = [background.lora_enabled]
    for region in layout.regions:
        prompt = region.prompt
        use_lora = fg_trigger is not None and region.lora_enabled
        if use_lora:
            prompt = f"{fg_trigger}, {prompt}"
        prompts.append(prompt)
        masks.append(downsample_mask(region.mask, downscale).astype(np.float32))
        foreground.append(True)
        object_ids.append(region.object_id)
        lora_flags.append(use_lora)
    return prompts, masks, foreground, object_ids, lora_flags


def assign_bootstrap_colors(
    plan: BootstrapPlan, n_objects: int, n_branches: int, t_index: int, seed: int | None = None
) -> np.ndarray:
    """Per-timestep bootstrap color table, shape (n_objects, n_branches, 3).

    Entries are RGB in [0, 1). The coupling mode forces equality across
    branches, objects, or both; "none" draws all entries independently.
    Deterministic in (seed, t_index).
    """
    if seed is None:
        seed = plan.color_seed
    rng = np.random.default_rng([_stable_seed("bootstrap-color", seed), t_index])
    n_objects = max(n_objects, 1)
    if plan.coupling_mode == "all":
        table = np.broadcast_to(rng.random(3), (n_objects, n_branches, 3))
    elif plan.coupling_mode == "branches":
        table = np.broadcast_to(rng.random((n_objects, 1, 3)), (n_objects, n_branches, 3))
    elif plan.coupling_mode == "objects":
        table = np.broadcast_to(rng.random((1, n_branches, 3)), (n_objects, n_branches, 3))
    else:
        table = rng.random((n_objects, n_branches, 3))
    return np.ascontiguousarray(table, dtype=np.float64)


def bootstrap_composite(
    state: DiffusionState,
    mask: np.ndarray,
    color_latent: np.ndarray,
    steps_done: int,
    plan: BootstrapPlan,
    scheduler,
    is_foreground: bool,
    noise_tag: int = 0,
    counters: Counters | None = None,
) -> np.ndarray:
    """Replace a foreground path's off-mask area with a noised color field.

    Active only while steps_done < plan.n_steps and only for foreground
    paths; the color field is forward-noised to the current timestep so it
    matches the scheduler's variance at t. Background paths and finished
    phases return the latent unchanged.
    """
    if not is_foreground or steps_done >= plan.n_steps:
        return state.latent
    rng = np.random.default_rng(
        [_stable_seed("bootstrap-noise", state.rng_seed, noise_tag), state.t_index]
    )
    noise = rng.standard_normal(state.latent.shape).astype(np.float32)
    noised = scheduler.add_noise(color_latent.astype(np.float32), noise, state.t_index)
    if counters is not None:
        counters.composites += 1
    return (mask * state.latent + (1.0 - mask) * noised).astype(state.latent.dtype)


def merge_paths(latents: list[np.ndarray], masks: list[np.ndarray]) -> np.ndarray:
    """Mask-weighted average of path latents, in fixed path order.

    fused = sum_i(m_i * z_i) / sum_i(m_i). Requires coverage >= 1 at every
    cell (guaranteed when the background path is present).
    """
    if len(latents) != len(masks) or not latents:
        raise ValueError("latents and masks must be equal-length and nonempty")
    value = np.zeros(latents[0].shape, dtype=np.float32)
    weight = np.zeros(latents[0].shape[-2:], dtype=np.float32)
    for latent, mask in zip(latents, masks):
        m = mask.astype(np.float32)
        value = value + m * latent
        weight = weight + m
    if np.any(weight == 0.0):
        raise ValueError("merge has zero coverage cells; include the background path")
    return value / weight


def step_paths(
    path_set: PathSet,
    denoiser,
    scheduler,
    t_index: int,
    plan: BootstrapPlan,
    colors: np.ndarray | None = None,
    codec=None,
    branch_index: int = 0,
    n_branches: int = 1,
    noise_tag: int = 0,
    counters: Counters | None = None,
) -> list[np.ndarray]:
    """Composite + predict + scheduler-step every path; no merge.

    Returns the per-path stepped latents (the inputs to merging or to a
    cross-branch exchange). `colors` may be precomputed with
    assign_bootstrap_colors to share one table across windows/branches.
    """
    if codec is None:
        codec = MockCodec()
    steps_done = scheduler.num_steps - 1 - t_index
    n_fg = sum(path_set.foreground)
    if colors is None:
        colors = assign_bootstrap_colors(plan, n_fg, n_branches, t_index)
    stepped = []
    fg_slot = 0
    for i, state in enumerate(path_set.states):
        latent = state.latent
        if path_set.foreground[i]:
            color_latent = codec.color_to_latent(colors[fg_slot, branch_index], latent.shape)
            latent = bootstrap_composite(
                state,
                path_set.masks[i],
                color_latent,
                steps_done,
                plan,
                scheduler,
                is_foreground=True,
                noise_tag=noise_tag,
                counters=counters,
            )
            fg_slot += 1
        residual = denoiser.predict(latent, t_index, path_set.prompts[i], path_set.contexts[i])
        stepped.append(scheduler.step(latent, residual, t_index))
    return stepped


def md_step(
    path_set: PathSet,
    denoiser,
    scheduler,
    t_index: int,
    plan: BootstrapPlan,
    colors: np.ndarray | None = None,
    codec=None,
    noise_tag: int = 0,
    counters: Counters | None = None,
) -> PathSet:
    """One fused denoising step: step all paths, merge, share the canvas.

    Every path's state is replaced by the merged latent at t_index - 1.
    """
    stepped = step_paths(
        path_set,
        denoiser,
        scheduler,
        t_index,
        plan,
        colors=colors,
        codec=codec,
        noise_tag=noise_tag,
        counters=counters,
    )
    fused = merge_paths(stepped, path_set.masks)
    new_states = [
        DiffusionState(latent=fused.copy(), t_index=t_index - 1, path_id=s.path_id, rng_seed=s.rng_seed)
        for s in path_set.states
    ]
    return PathSet(
        states=new_states,
        masks=path_set.masks,
        prompts=path_set.prompts,
        foreground=path_set.foreground,
        contexts=path_set.contexts,
    )
