"""Pipeline configuration: one JSON document, one dataclass per section.

Angles are given in degrees and lengths in millimeters in the file; code
converts at the point of use.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ParseError


@dataclass
class CameraConfig:
    focal_length: float = 1733.0
    width: int = 1024
    height: int = 1024


@dataclass
class ModelConfig:
    n_points: int = 8192
    seed: int = 20220523
    unit_scale: float = 1.0


@dataclass
class PinsegConfig:
    k: int = 15
    lambda_ratio: float = 4.0
    r_max_mm: float = 0.6
    min_instance_vertices: int = 8
    shell_fraction: float | None = 0.5


@dataclass
class ViewselConfig:
    distance_m: float = 0.15
    sweep_deg: float = 20.0
    step_deg: float = 5.0
    v_min: float = 0.95
    o_max: float = 0.05
    plane_view_min: float = 0.5
    candidates: list | None = None


@dataclass
class MatchConfig:
    levels: int = 4
    coarse_step_deg: float = 4.0
    range_deg: float = 20.0
    s_min_coarse: float = 0.55
    s_min_fine: float = 0.6
    g_min: float = 10.0
    max_points: int = 400
    min_points: int = 32
    min_coarse_points: int = 64
    finger_margin_mm: float = 1.0
    search_radius_mm: float | None = None
    beam: int = 8
    climb: bool = True
    refine: bool = True
    plateau_delta: float = 0.02


@dataclass
class PincheckConfig:
    method: str = "gradient"
    canny_low: float = 50.0
    canny_high: float = 100.0
    distance_px: float = 2.0
    edge_tolerance_px: float = 1.0
    g_min: float = 10.0
    exclude_px: int = 2
    background_level: float = 230.0
    background_threshold: float | None = 25.0


@dataclass
class SynthConfig:
    background: float = 230.0
    noise_sigma: float = 5.0
    supersample: int = 2


@dataclass
class Config:
    camera: CameraConfig = field(default_factory=CameraConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pinseg: PinsegConfig = field(default_factory=PinsegConfig)
    viewsel: ViewselConfig = field(default_factory=ViewselConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    pincheck: PincheckConfig = field(default_factory=PincheckConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Config:
        cfg = cls()
        for name, section in (d or {}).items():
            if not hasattr(cfg, name):
                raise ParseError(f"unknown config section {name!r}")
            target = getattr(cfg, name)
            known = {f.name for f in fields(target)}
            for k, v in section.items():
                if k not in known:
                    raise ParseError(f"unknown config key {name}.{k}")
                setattr(target, k, v)
        return cfg

    def override(self, assignments) -> Config:
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        for a in assignments or []:
            if "=" not in a or "." not in a.split("=", 1)[0]:
                raise ParseError(f"bad override {a!r}, expected section.key=value")
            key, raw = a.split("=", 1)
            section, name = key.split(".", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self.__class__.from_dict({section: {name: value}})  # validates the key
            setattr(getattr(self, section), name, value)
        return self

    def camera_model(self):
        from .geometry import PinholeCamera

        c = self.camera
        return PinholeCamera(c.focal_length, c.width, c.height)


def load_config(path=None, overrides=None) -> Config:
    if path is None:
        cfg = Config()
    else:
        try:
            cfg = Config.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read config {path}: {exc}") from exc
    return cfg.override(overrides)


def save_config(path, cfg: Config) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
