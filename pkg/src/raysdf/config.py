"""Pipeline configuration: nested dataclasses, YAML files, env overrides.

Any key can be overridden from the environment with the ``RAYSDF_``
prefix and ``__`` as the nesting separator, e.g.
``RAYSDF_DIFFUSION__TRAIN_STEPS=500``.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .errors import ConfigError

ENV_PREFIX = "RAYSDF_"

ABLATIONS = ("full", "no_sdf_conditioning", "no_ray_diffuser")


@dataclass
class DataConfig:
    n_scenes: int = 200
    n_eval_scenes: int = 50
    n_views: int = 0  # 0 = uniform in [2, 6] per scene
    rays_per_image: int = 64
    feature_dim: int = 16
    shape_mix: dict = field(
        default_factory=lambda: {"sphere": 1.0, "box": 1.0, "torus": 1.0, "union": 1.0}
    )


@dataclass
class TriplaneConfig:
    resolution: int = 32
    channels: int = 16
    fit_steps: int = 600
    n_supervision: int = 40000
    lr_planes: float = 2e-2
    lr_decoder: float = 2e-3


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2
    hidden: int = 128
    head_hidden: list = field(default_factory=lambda: [128])
    train_steps: int = 20000
    lr: float = 1e-3
    coarse_frac: float = 0.625
    fine_lr_scale: float = 0.1
    deterministic_sampling: bool = False


@dataclass
class JointConfig:
    alternation_period: int = 10  # reverse steps between refinements (T/10)
    refinement_steps: int = 20
    lambda_surf: float = 0.1


@dataclass
class EvalConfig:
    rotation_threshold_deg: float = 15.0
    translation_threshold: float = 0.1
    surface_samples: int = 10000
    mesh_resolution: int = 64


@dataclass
class PipelineConfig:
    seed: int = 0
    ablation: str = "full"
    data: DataConfig = field(default_factory=DataConfig)
    triplane: TriplaneConfig = field(default_factory=TriplaneConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(
                f"ablation must be one of {ABLATIONS}, got {self.ablation!r}"
            )
        for name, value in (
            ("data.n_scenes", self.data.n_scenes),
            ("data.rays_per_image", self.data.rays_per_image),
            ("triplane.resolution", self.triplane.resolution),
            ("triplane.channels", self.triplane.channels),
            ("diffusion.T", self.diffusion.T),
            ("diffusion.hidden", self.diffusion.hidden),
            ("joint.alternation_period", self.joint.alternation_period),
        ):
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.data.n_views and not 2 <= self.data.n_views <= 6:
            raise ConfigError("data.n_views must be 0 (mixed) or in [2, 6]")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}{key}")
        ftype = known[key].type
        sub = _SECTION_TYPES.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    (PipelineConfig, "data"): DataConfig,
    (PipelineConfig, "triplane"): TriplaneConfig,
    (PipelineConfig, "diffusion"): DiffusionConfig,
    (PipelineConfig, "joint"): JointConfig,
    (PipelineConfig, "eval"): EvalConfig,
}


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (dict, list)):
        parsed = yaml.safe_load(raw)
        if not isinstance(parsed, type(current)):
            raise ConfigError(f"cannot parse {type(current).__name__} from {raw!r}")
        return parsed
    return raw


def apply_env_overrides(cfg: PipelineConfig, environ=None) -> PipelineConfig:
    """Return a config with ``RAYSDF_*`` environment overrides applied."""
    environ = os.environ if environ is None else environ
    data = cfg.to_dict()
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        node = data

        def find(mapping, name):
            # env var names are case-insensitive against config keys
            for k in mapping:
                if k.lower() == name:
                    return k
            return None

        for p in parts[:-1]:
            k = find(node, p)
            if k is None or not isinstance(node[k], dict):
                raise ConfigError(f"env override {key}: no section {p!r}")
            node = node[k]
        leaf = find(node, parts[-1])
        if leaf is None:
            raise ConfigError(f"env override {key}: unknown key {parts[-1]!r}")
        node[leaf] = _coerce(raw, node[leaf])
    return _build(PipelineConfig, data, "")


def load_config(path=None, environ=None) -> PipelineConfig:
    """Load a YAML config (defaults if ``path`` is None), then env overrides."""
    if path is None:
        cfg = PipelineConfig()
    else:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        cfg = _build(PipelineConfig, data, "")
    return apply_env_overrides(cfg, environ=environ)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(
        yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)
    )
