"""Run configuration: typed sections, a flat ``section.key = value`` file format.

The file format is the dotted-key subset of TOML (``#`` comments, UTF-8)::

    scene.seed = 3
    optim.iterations = 500
    model.mlp_widths = [128, 128]
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .losses import LossConfig


def _meta(note: str) -> dict:
    return {"note": note}


@dataclass
class SceneConfig:
    seed: int = field(default=0, metadata=_meta("scene + oracle RNG seed"))
    resolution: int = field(default=64, metadata=_meta("square image size in px (full-scale setting: 512)"))
    mesh_lat: int = field(default=24, metadata=_meta("head mesh rows (V-resolution)"))
    mesh_lon: int = field(default=32, metadata=_meta("head mesh columns (V-resolution)"))
    n_blendshapes: int = field(default=8, metadata=_meta("K smooth blendshapes"))
    psi_dim: int = field(default=16, metadata=_meta("D = K weights + 1 jaw + zero padding"))
    n_tokens: int = field(default=4, metadata=_meta("L_tok chunks of psi used as attention keys/values"))
    n_frames: int = field(default=250, metadata=_meta("frames generated; last ceil(20%) are test"))
    test_fraction: float = field(default=0.2, metadata=_meta("held-out tail fraction"))
    oracle_gaussians: int = field(default=2500, metadata=_meta("N_target of the fixed ground-truth field"))
    focal: float = field(default=100.0, metadata=_meta("focal length in px at resolution 64 (scaled with resolution)"))
    camera_distance: float = field(default=4.0, metadata=_meta("camera distance from the head center"))
    blendshape_amplitude: float = field(default=0.08, metadata=_meta("peak blendshape displacement"))
    jaw_max: float = field(default=0.3, metadata=_meta("max jaw opening angle in radians"))
    fine_amplitude: float = field(default=0.012, metadata=_meta("oracle-only skin ripple offsets (unseen by the mesh)"))
    jaw_extra: float = field(default=0.4, metadata=_meta("oracle teeth rotate by (1 + jaw_extra) x tracked jaw angle"))


@dataclass
class ModelConfig:
    n_gaussians: int = field(default=2500, metadata=_meta("N_target for UV anchor sampling"))
    d_k: int = field(default=32, metadata=_meta("attention key/query width"))
    d_v: int = field(default=32, metadata=_meta("attention value width"))
    pe_freqs: int = field(default=6, metadata=_meta("positional-encoding frequencies L_pe"))
    mlp_widths: tuple = field(default=(128, 128), metadata=_meta("offset MLP hidden widths"))
    sh_degree: int = field(default=0, metadata=_meta("0 or 1"))
    init_opacity: float = field(default=0.1, metadata=_meta("initial opacity (3D-GS convention)"))
    init_color_from_data: bool = field(default=True, metadata=_meta("seed SH base colors from the first training frame"))


@dataclass
class OptimConfig:
    iterations: int = field(default=2000, metadata=_meta("training steps (full-scale setting: 15000)"))
    eval_every: int = field(default=250, metadata=_meta("test-split evaluation period"))
    lr_opacity: float = field(default=0.05, metadata=_meta("3D-GS default"))
    lr_sh: float = field(default=0.0025, metadata=_meta("3D-GS default"))
    lr_rotation: float = field(default=0.001, metadata=_meta("3D-GS default"))
    lr_scale: float = field(default=0.005, metadata=_meta("3D-GS default"))
    lr_fusion: float = field(default=1e-4, metadata=_meta("fusion module and offset MLP"))
    beta1: float = field(default=0.9, metadata=_meta("Adam first-moment decay"))
    beta2: float = field(default=0.999, metadata=_meta("Adam second-moment decay"))
    eps: float = field(default=1e-8, metadata=_meta("Adam epsilon"))


@dataclass
class IOConfig:
    output_dir: str = field(default="runs/default", metadata=_meta("where checkpoints and metrics go"))
    checkpoint_every: int = field(default=0, metadata=_meta("0 = initial and final checkpoints only"))


_LOSS_NOTES = {
    "huber_delta": "Huber transition point",
    "lambda_mouth": "weight of the masked teeth term",
    "lambda_perceptual": "weight of the gradient-difference perceptual proxy",
    "perceptual_start_iter": "first iteration using the perceptual term (full-scale setting: 15000)",
    "use_perceptual": "disable the perceptual proxy entirely",
}


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    io: IOConfig = field(default_factory=IOConfig)

    SECTIONS = ("scene", "model", "loss", "optim", "io")

    def validate(self) -> "RunConfig":
        s, m = self.scene, self.model
        if s.resolution < 4 or s.mesh_lat < 3 or s.mesh_lon < 3:
            raise ConfigError("scene resolution / mesh resolution too small")
        if s.n_blendshapes < 0 or s.psi_dim < s.n_blendshapes + 1:
            raise ConfigError(f"scene.psi_dim={s.psi_dim} must hold {s.n_blendshapes} blendshape weights + 1 jaw")
        if s.n_tokens <= 0 or s.psi_dim % s.n_tokens:
            raise ConfigError(f"scene.psi_dim={s.psi_dim} is not divisible by scene.n_tokens={s.n_tokens}")
        if not 0 <= s.test_fraction < 1 or s.n_frames < 2:
            raise ConfigError("scene.n_frames must be >= 2 and test_fraction in [0, 1)")
        if m.sh_degree not in (0, 1):
            raise ConfigError(f"model.sh_degree must be 0 or 1, got {m.sh_degree}")
        if not 0 < m.init_opacity < 1:
            raise ConfigError("model.init_opacity must be in (0, 1)")
        if self.optim.iterations < 0 or self.optim.eval_every <= 0:
            raise ConfigError("optim.iterations must be >= 0 and optim.eval_every > 0")
        return self

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in self.SECTIONS}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for section, values in data.items():
            if section not in cls.SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config key {section!r} must be written as {section}.<key> = value")
            for key, value in values.items():
                set_key(cfg, f"{section}.{key}", value)
        return cfg.validate()

    def replace(self, **overrides) -> "RunConfig":
        """Copy with ``section__key=value`` overrides."""
        cfg = RunConfig.from_dict(self.to_dict())
        for k, v in overrides.items():
            set_key(cfg, k.replace("__", "."), v)
        return cfg.validate()


def _coerce(value: Any, default: Any, key: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.strip("[]() ").split(",") if v.strip()]
        if isinstance(value, (list, tuple)):
            try:
                return tuple(int(v) for v in value)
            except (TypeError, ValueError):
                pass
    elif isinstance(default, str):
        return str(value)
    raise ConfigError(f"config key {key!r}: cannot use value {value!r} (expected {type(default).__name__})")


def set_key(cfg: RunConfig, dotted: str, value: Any) -> None:
    section, _, key = dotted.partition(".")
    if section not in RunConfig.SECTIONS or not key:
        raise ConfigError(f"unknown config key {dotted!r}")
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, key, _coerce(value, getattr(obj, key), dotted))
    if section == "loss":
        obj.__post_init__()


def parse_config_text(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    return RunConfig.from_dict(data)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def iter_keys(cfg: RunConfig | None = None):
    """Yield (dotted key, value, provenance note) for every config field."""
    cfg = cfg or RunConfig()
    for section in RunConfig.SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            note = f.metadata.get("note") if f.metadata else None
            if section == "loss":
                note = _LOSS_NOTES.get(f.name)
            yield f"{section}.{f.name}", getattr(obj, f.name), note or ""


def dump_config(cfg: RunConfig, with_notes: bool = True) -> str:
    lines = []
    current = None
    for key, value, note in iter_keys(cfg):
        section = key.split(".")[0]
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"# [{section}]")
            current = section
        line = f"{key} = {_format(value)}"
        if with_notes and note:
            line += f"  # {note}"
        lines.append(line)
    return "\n".join(lines) + "\n"
