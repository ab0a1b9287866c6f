"""Run configuration: a nested YAML file, strictly validated.

Unknown keys are rejected by name. Every leaf can be overridden on the
command line with ``--set section.key=value``; values are parsed as YAML
scalars and coerced to the field's existing type. The resolved
configuration echoed into the output directory reproduces the run when
fed back in.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import yaml

from .data import SyntheticSceneSpec, TexturedBox
from .errors import ConfigError
from .field import SceneBounds
from .geometry import CameraIntrinsics
from .objective import LossWeights
from .pipeline import OptimSettings, SamplerSettings, ScheduleConfig

__all__ = ["RunConfig", "load_config", "parse_scene_spec", "load_scene_spec"]


@dataclass
class FieldConfig:
    res: int = 128
    density_channels: int = 16
    appearance_channels: int = 24
    hidden: int = 48
    init_std: float = 0.1
    bounds_min: list | None = None
    bounds_max: list | None = None

    def bounds(self) -> SceneBounds | None:
        if self.bounds_min is None or self.bounds_max is None:
            return None
        return SceneBounds(np.asarray(self.bounds_min), np.asarray(self.bounds_max))


@dataclass
class RenderSettings:
    mode: str = "occupancy"  # or "alpha" for the exp-compositing ablation
    opacity_floor: float = 0.1


@dataclass
class SamplerConfig:
    score_blend: float = 0.5
    quantile: float = 0.8
    gap_factor: float = 2.0
    pad_factor: float = 1.0

    def settings(self) -> SamplerSettings:
        return SamplerSettings(self.score_blend, self.quantile, self.gap_factor, self.pad_factor)


@dataclass
class ScheduleSection:
    init_frames: int = 15
    sampler_iters: int = 4
    sample_counts: list = dc_field(default_factory=lambda: [32, 64, 64, 64])
    window_kernels: list = dc_field(default_factory=lambda: [3, 4, 5])
    mix_ratio: float = 0.4
    active_window: int = 20
    iters_per_update: int = 20
    frames_per_update: int = 5
    rays_per_iter: int = 1024
    init_steps: int = 200
    init_rays_per_frame: int = 512
    keyframe_stride: int = 10
    coarse_samples: int = 32
    fine_samples: int = 32

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            init_frames=self.init_frames,
            sampler_iters=self.sampler_iters,
            sample_counts=tuple(self.sample_counts),
            window_kernels=tuple(self.window_kernels),
            mix_ratio=self.mix_ratio,
            active_window=self.active_window,
            iters_per_update=self.iters_per_update,
            frames_per_update=self.frames_per_update,
            rays_per_iter=self.rays_per_iter,
            init_steps=self.init_steps,
            init_rays_per_frame=self.init_rays_per_frame,
            keyframe_stride=self.keyframe_stride,
            coarse_samples=self.coarse_samples,
            fine_samples=self.fine_samples,
        )


@dataclass
class LossConfig:
    color_weight: float = 1.0
    warp_weight: float = 0.5
    noise_variance: float = 1.0

    def weights(self) -> LossWeights:
        return LossWeights(self.color_weight, self.warp_weight)


@dataclass
class OptimConfig:
    grid_lr: float = 0.02
    decoder_lr: float = 0.001
    pose_lr: float = 0.001

    def settings(self) -> OptimSettings:
        return OptimSettings(self.grid_lr, self.decoder_lr, self.pose_lr)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | simple | tum
    path: str | None = None
    scene: dict | None = None  # inline synthetic scene spec
    use_poses: bool = True  # false: estimate init poses from scratch


@dataclass
class OutputConfig:
    dir: str = "out/run"
    snapshot_every: int = 0


@dataclass
class ExtractionConfig:
    pixel_stride: int = 4
    view_stride: int = 10
    opacity_floor: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0: leave torch's default
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderSettings = dc_field(default_factory=RenderSettings)
    sampler: SamplerConfig = dc_field(default_factory=SamplerConfig)
    schedule: ScheduleSection = dc_field(default_factory=ScheduleSection)
    loss: LossConfig = dc_field(default_factory=LossConfig)
    optim: OptimConfig = dc_field(default_factory=OptimConfig)
    dataset: DatasetConfig = dc_field(default_factory=DatasetConfig)
    output: OutputConfig = dc_field(default_factory=OutputConfig)
    extraction: ExtractionConfig = dc_field(default_factory=ExtractionConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _from_dict(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section '{path or cls.__name__}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{path + key}'")
        sub = _SECTION_TYPES.get((cls, key))
        if sub is not None and value is not None:
            kwargs[key] = _from_dict(sub, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config section '{path.rstrip('.')}': {e}") from e


_SECTION_TYPES = {
    (RunConfig, "field"): FieldConfig,
    (RunConfig, "render"): RenderSettings,
    (RunConfig, "sampler"): SamplerConfig,
    (RunConfig, "schedule"): ScheduleSection,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "optim"): OptimConfig,
    (RunConfig, "dataset"): DatasetConfig,
    (RunConfig, "output"): OutputConfig,
    (RunConfig, "extraction"): ExtractionConfig,
}


def _coerce(old, new, dotted: str):
    if old is None or new is None:
        return new
    if isinstance(old, bool):
        if isinstance(new, bool):
            return new
        raise ConfigError(f"--set {dotted}: expected a boolean")
    if isinstance(old, int) and not isinstance(old, bool):
        if isinstance(new, int):
            return new
        raise ConfigError(f"--set {dotted}: expected an integer")
    if isinstance(old, float):
        if isinstance(new, (int, float)):
            return float(new)
        raise ConfigError(f"--set {dotted}: expected a number")
    if isinstance(old, list):
        if isinstance(new, list):
            return new
        raise ConfigError(f"--set {dotted}: expected a list, e.g. [1,2,3]")
    return new


def apply_overrides(payload: dict, overrides) -> dict:
    """Apply repeatable --set key=value pairs onto a raw config dict."""
    defaults = RunConfig().to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            parsed = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"--set {dotted}: cannot parse value: {e}") from e

        node = payload
        ref = defaults
        for k in keys[:-1]:
            if not isinstance(ref, dict) or k not in ref:
                raise ConfigError(f"unknown config key '{dotted.strip()}'")
            ref = ref[k]
            node = node.setdefault(k, {})
        leaf = keys[-1]
        if not isinstance(ref, dict) or leaf not in ref:
            raise ConfigError(f"unknown config key '{dotted.strip()}'")
        node[leaf] = _coerce(ref[leaf], parsed, dotted.strip())
    return payload


def load_config(path=None, overrides=None) -> RunConfig:
    """Load a YAML config file (defaults when omitted) plus overrides."""
    payload: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            payload = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: invalid YAML: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    payload = apply_overrides(payload, overrides)
    return _from_dict(RunConfig, payload, "")


# --- synthetic scene specs ------------------------------------------------------

_SCENE_KEYS = {
    "room_min", "room_max", "boxes", "checker_period", "orbit_radius",
    "orbit_height", "height_amplitude", "orbit_turns", "frame_count", "intrinsics",
}


def parse_scene_spec(payload: dict) -> SyntheticSceneSpec:
    if not isinstance(payload, dict):
        raise ConfigError("scene spec must be a mapping")
    unknown = set(payload) - _SCENE_KEYS
    if unknown:
        raise ConfigError(f"unknown scene key '{sorted(unknown)[0]}'")
    kwargs = dict(payload)
    if "boxes" in kwargs and kwargs["boxes"] is not None:
        kwargs["boxes"] = tuple(
            TexturedBox(tuple(b["min"]), tuple(b["max"])) for b in kwargs["boxes"]
        )
    if "room_min" in kwargs:
        kwargs["room_min"] = tuple(kwargs["room_min"])
    if "room_max" in kwargs:
        kwargs["room_max"] = tuple(kwargs["room_max"])
    if "intrinsics" in kwargs and kwargs["intrinsics"] is not None:
        kwargs["intrinsics"] = CameraIntrinsics(**kwargs["intrinsics"])
    try:
        return SyntheticSceneSpec(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid scene spec: {e}") from e


def load_scene_spec(path) -> SyntheticSceneSpec:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"scene spec not found: {p}")
    try:
        payload = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: invalid YAML: {e}") from e
    return parse_scene_spec(payload)
