"""Pipeline configuration: every benchmark hyperparameter in one record.

Configs serialize to a flat JSON object and hash to a short hex digest
that is embedded in every artifact, so reruns and resumed sweeps can
verify they are extending the same experiment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

DEFAULT_TRIGGER = "360-degree panoramic image"


@dataclass
class PipelineConfig:
    pipeline: str = "mstd"  # "mstd" | "mpf"

    # canvas / latent geometry
    erp_width: int = 1024
    erp_height: int = 512

    # sampling
    steps: int = 50
    bootstrap_steps: int = 20
    bootstrap_coupling: str = "none"  # none | branches | objects | all
    noise_coupling: bool = True

    # prompting
    include_objects_in_global: bool = False
    lora_mode: str = "bg-only"  # yes | bg-only | no
    trigger_phrase: str = DEFAULT_TRIGGER

    # sliding-window pipeline
    stride: int = 8
    window: int | None = None  # None -> latent height
    stitch: bool = True
    pad: int | None = None  # None -> window // 2 when stitching

    # dual-branch pipeline
    md_mode: str = "md_both"  # md_pano | md_pers | md_both
    eppa_enabled: bool = True
    fg_eppa: bool = True
    eppa_sigma_frac: float = 0.5
    rotation: bool = True
    rotation_seed: int = 0
    rotation_schedule: list[float] | None = None
    circular_padding: bool = True
    persp_fov_deg: float = 90.0
    persp_image_size: int = 512

    def __post_init__(self):
        if self.pipeline not in ("mstd", "mpf"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.md_mode not in ("md_pano", "md_pers", "md_both"):
            raise ValueError(f"unknown md_mode {self.md_mode!r}")
        if self.lora_mode not in ("yes", "bg-only", "no"):
            raise ValueError(f"unknown lora_mode {self.lora_mode!r}")
        if self.bootstrap_steps > self.steps:
            raise ValueError(
                f"bootstrap_steps {self.bootstrap_steps} exceeds total steps {self.steps}"
            )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def config_hash(config: PipelineConfig) -> str:
    """Stable 16-hex-digit digest of the canonical config JSON."""
    canonical = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
