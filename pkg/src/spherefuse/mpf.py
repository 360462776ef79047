"""Dual-branch panorama pipeline: ERP canvas plus 20 perspective views.

One branch denoises the full ERP latent, the other denoises 20 gnomonic
views at the face centers of an icosahedron. The branches communicate
every step through a gated projection-resampling exchange (the learned
cross-branch attention of a real backend plugs in behind the same
interface). Region fusion can run in either branch or both; bootstrap
colors can be coupled across branches and objects, and the exchange can
be disabled for foreground paths during bootstrapping.

Per-step yaw rotations shift the ERP canvas, masks and camera poses
together (quantized to whole latent columns, so rotations are lossless);
the composed rotation is undone before returning the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .backend import DiffusionState, MockCodec, _stable_seed, init_noise
from .config import PipelineConfig, config_hash
from .fusion import (
    BootstrapPlan,
    Counters,
    PathSet,
    assign_bootstrap_colors,
    build_paths,
    merge_paths,
    step_paths,
)
from .geometry import (
    CameraPose,
    ErpGrid,
    columns_to_yaw,
    erp_projection_lookup,
    icosahedron_cameras,
    project_mask_erp_to_persp,
    sample_erp_to_persp,
    yaw_to_columns,
)
from .layout import Layout, effective_global_prompt

N_VIEWS = 20
PANO_BRANCH = 0
PERSP_BRANCH = 1


@dataclass
class MpfPaths:
    """Static per-path data shared by both branches over the whole run."""

    pano_prompts: list[str]
    persp_prompts: list[str]
    foreground: list[bool]
    object_ids: list[int]
    pano_contexts: list[dict]
    plan: BootstrapPlan
    seed: int

    def __len__(self) -> int:
        return len(self.foreground)


@dataclass
class BranchState:
    """Mutable per-step state of the dual-branch sampler."""

    pano: np.ndarray
    persp: list[np.ndarray]
    poses: list[CameraPose]
    erp_masks: list[np.ndarray]
    persp_masks: list[list[np.ndarray]]
    paths: MpfPaths
    t_index: int
    applied_yaw_cols: int = 0


def eppa_gate(path_is_foreground: bool, in_bootstrap: bool, config: PipelineConfig) -> bool:
    """Whether the cross-branch exchange runs for a path at this step.

    Background paths always exchange; foreground paths are muted during
    the bootstrapping phase when fg_eppa is off. eppa_enabled is a master
    switch for fully decoupled runs.
    """
    if not config.eppa_enabled:
        return False
    if path_is_foreground and in_bootstrap and not config.fg_eppa:
        return False
    return True


def _wrap_lon(lon: float) -> float:
    return (lon + math.pi) % (2.0 * math.pi) - math.pi


def eppa_exchange(
    pano_latent: np.ndarray,
    persp_latents: list[np.ndarray],
    poses: list[CameraPose],
    mask_gate=True,
    sigma_frac: float = 0.5,
):
    """Projection-resampling consensus between the two branches.

    Each enabled view is warped onto the ERP grid and blended into the
    panorama with Gaussian-feathered footprint weights (weight peaks at
    the view center and fades toward the view border); the blended
    panorama is then resampled back into each enabled view. Gated-off
    views pass through unchanged, and an all-off gate is the identity on
    both branches. Output values stay inside the per-cell range of the
    contributing inputs.
    """
    h, w = pano_latent.shape[-2:]
    grid = ErpGrid(width=w, height=h)
    if isinstance(mask_gate, (bool, np.bool_)):
        gates = [bool(mask_gate)] * len(persp_latents)
    else:
        gates = [bool(g) for g in mask_gate]
    if len(gates) != len(persp_latents) or len(poses) != len(persp_latents):
        raise ValueError("persp_latents, poses and mask_gate must align")
    if not any(gates):
        return pano_latent, list(persp_latents)

    value = pano_latent.astype(np.float64).copy()
    weight = np.ones((h, w), dtype=np.float64)
    for gate, latent, pose in zip(gates, persp_latents, poses):
        if not gate:
            continue
        x, y, inside = erp_projection_lookup(pose, grid)
        s = pose.image_size
        ix = np.clip(np.floor(np.where(inside, x, 0.0)).astype(np.int64), 0, s - 1)
        iy = np.clip(np.floor(np.where(inside, y, 0.0)).astype(np.int64), 0, s - 1)
        half = s / 2.0
        sigma = sigma_frac * s
        dist_sq = np.where(inside, (x - half) ** 2 + (y - half) ** 2, 0.0)
        feather = np.where(inside, np.exp(-dist_sq / (2.0 * sigma * sigma)), 0.0)
        value = value + feather * np.where(inside, latent[..., iy, ix], 0.0)
        weight = weight + feather
    pano_new = (value / weight).astype(pano_latent.dtype)
    persp_new = [
        sample_erp_to_persp(pano_new, pose) if gate else latent
        for gate, latent, pose in zip(gates, persp_latents, poses)
    ]
    return pano_new, persp_new


def _project_path_masks(erp_masks: list[np.ndarray], poses: list[CameraPose]) -> list[list[np.ndarray]]:
    """persp_masks[view][path], nearest-neighbor projected at latent scale."""
    out = []
    for pose in poses:
        out.append(
            [
                project_mask_erp_to_persp((m > 0).astype(np.uint8), pose).astype(np.float32)
                for m in erp_masks
            ]
        )
    return out


def rotate_state(state: BranchState, yaw: float) -> BranchState:
    """Roll the ERP canvas and masks by a column-quantized yaw and move the
    camera poses by the same angle; view latents travel with their poses.

    Perspective masks are re-projected from the rotated ERP masks so the
    mask/pose pairing stays exactly consistent.
    """
    width = state.pano.shape[-1]
    cols = yaw_to_columns(yaw, width)
    if cols % width == 0:
        return state
    exact_yaw = columns_to_yaw(cols, width)
    pano = np.roll(state.pano, cols, axis=-1)
    erp_masks = [np.roll(m, cols, axis=-1) for m in state.erp_masks]
    poses = [replace(p, lon=_wrap_lon(p.lon + exact_yaw)) for p in state.poses]
    persp_masks = _project_path_masks(erp_masks, poses)
    return replace(
        state,
        pano=pano,
        erp_masks=erp_masks,
        poses=poses,
        persp_masks=persp_masks,
        applied_yaw_cols=state.applied_yaw_cols + cols,
    )


def init_branch_state(
    layout: Layout,
    config: PipelineConfig,
    scheduler,
    seed: int,
    codec=None,
    initial_noise: dict | None = None,
) -> BranchState:
    """Build the initial latents, poses, masks and path metadata."""
    if codec is None:
        codec = MockCodec()
    pano_shape = codec.latent_shape(config.erp_height, config.erp_width)
    view_size = config.persp_image_size // codec.downscale
    if view_size * codec.downscale != config.persp_image_size:
        raise ValueError("persp_image_size must be divisible by the codec downscale")

    pano_prompts, erp_masks, foreground, object_ids, lora_flags = build_paths(
        layout,
        pano_shape,
        codec.downscale,
        seed,
        trigger=config.trigger_phrase,
        lora_mode=config.lora_mode,
    )
    persp_prompts = [effective_global_prompt(layout)] + [r.prompt for r in layout.regions]
    pano_contexts = [
        {"branch": "pano", "lora": flag, "circular_padding": config.circular_padding}
        for flag in lora_flags
    ]
    plan = BootstrapPlan(
        n_steps=config.bootstrap_steps,
        coupling_mode=config.bootstrap_coupling,
        color_seed=seed,
    )
    poses = icosahedron_cameras(math.radians(config.persp_fov_deg), image_size=view_size)

    if initial_noise is not None:
        pano_noise = initial_noise["pano"]
        view_noises = initial_noise["persp"]
    else:
        pano_noise = init_noise(pano_shape, _stable_seed("pano-init", seed), True, 1)[0]
        view_noises = init_noise(
            (pano_shape[0], view_size, view_size),
            _stable_seed("persp-init", seed),
            config.noise_coupling,
            N_VIEWS,
        )
    paths = MpfPaths(
        pano_prompts=pano_prompts,
        persp_prompts=persp_prompts,
        foreground=foreground,
        object_ids=object_ids,
        pano_contexts=pano_contexts,
        plan=plan,
        seed=seed,
    )
    return BranchState(
        pano=scheduler.init_sigma * pano_noise,
        persp=[scheduler.init_sigma * n for n in view_noises],
        poses=poses,
        erp_masks=erp_masks,
        persp_masks=_project_path_masks(erp_masks, poses),
        paths=paths,
        t_index=scheduler.num_steps - 1,
    )


def mpf_step(
    state: BranchState,
    config: PipelineConfig,
    denoiser,
    scheduler,
    t_index: int,
    yaw: float = 0.0,
    codec=None,
    counters: Counters | None = None,
) -> BranchState:
    """One dual-branch step: rotate, denoise each branch's paths, exchange
    between branches per the gate, merge each branch."""
    if codec is None:
        codec = MockCodec()
    if yaw:
        state = rotate_state(state, yaw)
    paths = state.paths
    steps_done = scheduler.num_steps - 1 - t_index
    in_bootstrap = steps_done < paths.plan.n_steps
    md_pano = config.md_mode in ("md_pano", "md_both")
    md_pers = config.md_mode in ("md_pers", "md_both")
    n_fg = sum(paths.foreground)
    colors = assign_bootstrap_colors(paths.plan, n_fg, 2, t_index, seed=paths.seed)

    def _path_states(latent: np.ndarray, indices) -> list[DiffusionState]:
        return [
            DiffusionState(latent=latent, t_index=t_index, path_id=i, rng_seed=paths.seed + i)
            for i in indices
        ]

    all_idx = range(len(paths))
    if md_pano:
        pano_set = PathSet(
            states=_path_states(state.pano, all_idx),
            masks=state.erp_masks,
            prompts=paths.pano_prompts,
            foreground=paths.foreground,
            contexts=paths.pano_contexts,
        )
    else:
        pano_set = PathSet(
            states=_path_states(state.pano, [0]),
            masks=[state.erp_masks[0]],
            prompts=[paths.pano_prompts[0]],
            foreground=[False],
            contexts=[paths.pano_contexts[0]],
        )
    stepped_pano = step_paths(
        pano_set,
        denoiser,
        scheduler,
        t_index,
        paths.plan,
        colors=colors,
        codec=codec,
        branch_index=PANO_BRANCH,
        n_branches=2,
        noise_tag="pano",
    )

    stepped_persp = []
    for j, pose in enumerate(state.poses):
        if md_pers:
            view_set = PathSet(
                states=_path_states(state.persp[j], all_idx),
                masks=state.persp_masks[j],
                prompts=paths.persp_prompts,
                foreground=paths.foreground,
                contexts=[{"branch": "persp", "view": j} for _ in all_idx],
            )
        else:
            view_set = PathSet(
                states=_path_states(state.persp[j], [0]),
                masks=[state.persp_masks[j][0]],
                prompts=[paths.persp_prompts[0]],
                foreground=[False],
                contexts=[{"branch": "persp", "view": j}],
            )
        stepped_persp.append(
            step_paths(
                view_set,
                denoiser,
                scheduler,
                t_index,
                paths.plan,
                colors=colors,
                codec=codec,
                branch_index=PERSP_BRANCH,
                n_branches=2,
                noise_tag=j,
            )
        )

    if counters is not None and in_bootstrap:
        counters.composites += n_fg * (int(md_pano) + int(md_pers))

    n_branches_md = int(md_pano) + int(md_pers)
    for i in all_idx:
        gate = eppa_gate(paths.foreground[i], in_bootstrap, config)
        if not gate:
            if counters is not None:
                counters.gated_off += n_branches_md
            continue
        pi = i if md_pano else 0
        vi = i if md_pers else 0
        view_latents = [stepped_persp[j][vi] for j in range(len(state.poses))]
        pano_new, persp_new = eppa_exchange(
            stepped_pano[pi],
            view_latents,
            state.poses,
            mask_gate=True,
            sigma_frac=config.eppa_sigma_frac,
        )
        stepped_pano[pi] = pano_new
        for j in range(len(state.poses)):
            stepped_persp[j][vi] = persp_new[j]
        if counters is not None:
            counters.exchanges += 1

    pano_canvas = merge_paths(stepped_pano, pano_set.masks)
    view_canvases = [
        merge_paths(stepped_persp[j], state.persp_masks[j] if md_pers else [state.persp_masks[j][0]])
        for j in range(len(state.poses))
    ]
    return replace(state, pano=pano_canvas, persp=view_canvases, t_index=t_index - 1)


def rotation_schedule(config: PipelineConfig, lat_width: int, num_steps: int, seed: int = 0) -> list[float]:
    """Per-step yaws, column-quantized. Uses the explicit schedule from the
    config when given, else whole-column yaws drawn pseudo-randomly per
    (rotation_seed, run seed)."""
    if not config.rotation:
        return [0.0] * num_steps
    if config.rotation_schedule is not None:
        return [
            columns_to_yaw(yaw_to_columns(y, lat_width), lat_width)
            for y in config.rotation_schedule
        ]
    rng = np.random.default_rng(_stable_seed("rotation", config.rotation_seed, seed))
    cols = rng.integers(0, lat_width, size=num_steps)
    return [columns_to_yaw(int(c), lat_width) for c in cols]


@dataclass
class MpfResult:
    image: np.ndarray
    latent: np.ndarray
    views: list[np.ndarray]
    view_latents: list[np.ndarray]
    poses: list[CameraPose]
    seed: int
    config_digest: str
    counters: dict = field(default_factory=dict)


def mpf_sample(
    layout: Layout,
    config: PipelineConfig,
    denoiser,
    scheduler,
    seed: int,
    codec=None,
    initial_noise: dict | None = None,
) -> MpfResult:
    """Full dual-branch run; the composed rotation is undone at the end so
    the output sits in the input frame. Deterministic in (inputs, seed)."""
    if codec is None:
        codec = MockCodec()
    state = init_branch_state(layout, config, scheduler, seed, codec=codec, initial_noise=initial_noise)
    schedule = rotation_schedule(config, state.pano.shape[-1], scheduler.num_steps, seed=seed)
    counters = Counters()
    for step_no, t_index in enumerate(reversed(range(scheduler.num_steps))):
        state = mpf_step(
            state,
            config,
            denoiser,
            scheduler,
            t_index,
            yaw=schedule[step_no],
            codec=codec,
            counters=counters,
        )

    unwound_cols = state.applied_yaw_cols
    width = state.pano.shape[-1]
    final_state = rotate_state(state, columns_to_yaw(-unwound_cols, width))
    return MpfResult(
        image=codec.decode(final_state.pano),
        latent=final_state.pano,
        views=[codec.decode(v) for v in final_state.persp],
        view_latents=list(final_state.persp),
        poses=final_state.poses,
        seed=seed,
        config_digest=config_hash(config),
        counters={
            "bootstrap_path_steps": counters.composites,
            "gated_off_exchanges": counters.gated_off,
            "exchanges": counters.exchanges,
            "applied_yaw_cols": state.applied_yaw_cols,
            "residual_yaw_cols": final_state.applied_yaw_cols,
        },
    )
