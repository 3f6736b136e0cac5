"""
Configuration models for every stage of the pipeline.

All values can be overridden from a JSON config file, from the ``config``
block of a scene manifest, or from command line flags (flags win).
"""

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FieldConfig(_Section):
    levels: int = Field(16, ge=1, description="Hash-grid resolution levels")
    log2_table_size: int = Field(19, ge=4, le=24, description="log2 of entries per level")
    features_per_level: int = Field(2, ge=1)
    base_resolution: int = Field(16, ge=2)
    max_resolution: int = Field(2048, ge=2)
    hidden_width: int = Field(64, ge=1)
    hidden_layers: int = Field(2, ge=1)
    bounds_padding: float = Field(0.1, ge=0.0, description="Relative padding of the canonical box")
    parameterization: Literal["hybrid", "explicit"] = "hybrid"


class SurfelInitConfig(_Section):
    subdivisions: int = Field(2, ge=0, le=3)
    pretrain_steps: int = Field(1000, ge=0)
    pretrain_lr: float = Field(5e-3, gt=0)
    bind_neighbors: int = Field(30, ge=1)
    curvature_neighbors: int = Field(5, ge=1)
    field: FieldConfig = Field(default_factory=FieldConfig)


class LbfgsConfig(_Section):
    history_size: int = Field(10, ge=1)
    lr: float = Field(1.0, gt=0)
    epochs: int = Field(40, ge=0)
    iterations_per_epoch: int = Field(20, ge=1)
    tolerance_grad: float = Field(1e-6, ge=0)
    tolerance_change: float = Field(1e-12, ge=0)
    c1: float = Field(1e-4, gt=0, lt=1)
    c2: float = Field(0.9, gt=0, lt=1)
    max_line_search: int = Field(25, ge=1)


class PoseRefinementConfig(_Section):
    data_weight: float = Field(100.0, gt=0)
    smooth_weight: float = Field(10000.0, gt=0)
    preserve_weight: float = Field(60.0, gt=0)
    robust_sigma: float | None = Field(
        None, gt=0, description="Geman-McClure width in pixels; scaled from 50px@512 when unset"
    )
    lbfgs: LbfgsConfig = Field(default_factory=LbfgsConfig)


class LossWeights(_Section):
    mask: float = Field(1.0, ge=0)
    normal: float = Field(1.0, ge=0)
    normal_depth: float = Field(0.05, ge=0)
    curvature: float = Field(0.01, ge=0)
    offset: float = Field(0.1, ge=0)
    scale: float = Field(1.0, ge=0)
    region_dilation: int = Field(8, ge=0, description="Pixels added around the mask union")


class AdamConfig(_Section):
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class LearningRates(_Section):
    positions: float = Field(1.6e-4, ge=0, description="Multiplied by the canonical extent")
    rotations: float = Field(1e-3, ge=0)
    field: float = Field(1e-3, ge=0)


class OcclusionConfig(_Section):
    interleaved: bool = True
    learning_rate: float = Field(0.02, gt=0)
    steps: int = Field(200, ge=0, description="Steps of the post-hoc mode")


class ReconstructionConfig(_Section):
    steps: int = Field(500, gt=0)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    learning_rates: LearningRates = Field(default_factory=LearningRates)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    occlusion: OcclusionConfig = Field(default_factory=OcclusionConfig)
    perceptual_weights: str | None = Field(
        None, description="Feature-network archive (.npz); pyramid fallback when unset"
    )
    log_every: int = Field(50, ge=1)


class SdsPhaseConfig(_Section):
    name: Literal["shape", "texture"]
    steps: int = Field(ge=0)
    rgb_weight: float = Field(ge=0)
    normal_weight: float = Field(ge=0)


def _default_phases() -> list[SdsPhaseConfig]:
    return [
        SdsPhaseConfig(name="shape", steps=500, rgb_weight=0.0, normal_weight=1e-4),
        SdsPhaseConfig(name="texture", steps=1000, rgb_weight=1e-4, normal_weight=0.0),
    ]


class SdsConfig(_Section):
    phases: list[SdsPhaseConfig] = Field(default_factory=_default_phases)
    views_per_step: int = Field(4, ge=1)
    timestep_min: float = Field(0.02, ge=0, le=1)
    timestep_max: float = Field(0.98, ge=0, le=1)
    timestep_floor: float = Field(0.5, ge=0, le=1, description="Annealed upper bound at phase end")
    elevation_min: float = Field(-10.0, description="Degrees")
    elevation_max: float = Field(30.0, description="Degrees")
    occlusion_masking: bool = False
    prompt: str | None = Field(None, description="Overrides the manifest prompt")
    reconstruction: ReconstructionConfig = Field(default_factory=ReconstructionConfig)

    @model_validator(mode="after")
    def _two_phases_in_order(self) -> "SdsConfig":
        names = [phase.name for phase in self.phases]
        if names != ["shape", "texture"]:
            raise ValueError(f"SDS schedule must be exactly [shape, texture], got {names}")
        if self.timestep_min > self.timestep_max:
            raise ValueError("timestep_min must not exceed timestep_max")
        return self


class MetricsConfig(_Section):
    occlusion_threshold: float = Field(0.5, ge=0, le=1)
    full_region: Literal["frame", "subject"] = "frame"


class DenoiserConfig(_Section):
    kind: Literal["identity", "remote"] = "identity"
    url: str | None = None
    timeout: float = Field(120.0, gt=0)

    @model_validator(mode="after")
    def _remote_needs_url(self) -> "DenoiserConfig":
        if self.kind == "remote" and not self.url:
            raise ValueError("remote denoiser requires 'url'")
        return self


class RenderSettings(_Section):
    rest_pose: bool = False
    orbit_views: int = Field(0, ge=0)
    channels: list[Literal["rgb", "mask", "depth", "normal", "back_normal", "occlusion"]] = Field(
        default_factory=lambda: ["rgb", "mask", "normal"]
    )
    checkpoint: Literal["init", "reconstruct", "sds-refine"] | None = None


class PipelineConfig(_Section):
    seed: int = 0
    out_dir: str = "soar_out"
    manifest: str | None = None
    threads: int | None = Field(None, ge=1)
    pose_refinement: PoseRefinementConfig = Field(default_factory=PoseRefinementConfig)
    surfels: SurfelInitConfig = Field(default_factory=SurfelInitConfig)
    reconstruction: ReconstructionConfig = Field(default_factory=ReconstructionConfig)
    sds: SdsConfig = Field(default_factory=SdsConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    render: RenderSettings = Field(default_factory=RenderSettings)


def merge_overrides(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge ``overrides`` into a copy of ``base``."""
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(
    path: str | Path | None = None,
    *layers: dict[str, Any],
) -> PipelineConfig:
    """
    Build a pipeline config.

    Layers are applied left to right on top of the defaults; the config
    file (if any) is applied after them, so callers pass lower-priority
    layers (manifest overrides) here and apply flags afterwards.
    """
    data: dict[str, Any] = {}
    for layer in layers:
        data = merge_overrides(data, layer)
    if path is not None:
        file_data = json.loads(Path(path).read_text(encoding="utf-8"))
        data = merge_overrides(data, file_data)
    return PipelineConfig.model_validate(data)
