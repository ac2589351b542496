"""Engine configuration: desk-scale defaults and the full-scale reference.

A single EngineConfig carries every tunable the modules read. The desk
profile (32x32x8 volume, 32 channels) is the default everywhere; the
reference profile mirrors the full-scale deployment numbers (512x512x40
volume at 0.2 m, 200x200 BEV queries, 3 decoder layers of 256 channels)
and exists for documentation and scaling experiments, not for tests.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .grid import GridConfig


@dataclass(frozen=True)
class PlannerConfig:
    speeds: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0)
    curvatures: tuple[float, ...] = (0.0, -0.02, 0.02, -0.05, 0.05, -0.1, 0.1)
    kappa_straight: float = 0.01
    plan_horizon: int = 3
    lateral_margin: float = 1.0
    longitudinal_margin: float = 2.0
    sigma: float = 0.5
    w_agent: float = 10.0
    w_road: float = 5.0
    w_volume: float = 1.0
    hard_penalty: float = 1e3
    ego_footprint: tuple[float, float] = (4.0, 1.8)
    v_max: float = 4.0


@dataclass(frozen=True)
class EvalConfig:
    categories: tuple[int, ...] = (3, 4)
    tp_iou_threshold: float = 0.2
    nms_radius: float = 1.5
    cluster_merge_distance: float = 2.0
    protocol: str = "TemAvg"

    def __post_init__(self):
        if not (0.0 < self.tp_iou_threshold < 1.0):
            raise ValueError(f"tp_iou_threshold must be in (0,1), got {self.tp_iou_threshold}")
        if self.nms_radius <= 0 or self.cluster_merge_distance <= 0:
            raise ValueError("radii must be positive")
        if self.protocol not in ("NoAvg", "TemAvg"):
            raise ValueError(f"unknown protocol {self.protocol!r}")

    @property
    def gating_distance(self) -> float:
        # instance association gate: twice the NMS radius
        return 2.0 * self.nms_radius


@dataclass(frozen=True)
class EngineConfig:
    grid: GridConfig = field(
        default_factory=lambda: GridConfig(
            x_range=(-8.0, 8.0), y_range=(-8.0, 8.0), z_range=(-1.0, 3.0), resolution=0.5
        )
    )
    channels: int = 32
    num_heads: int = 2
    num_points: int = 4
    num_frequencies: int = 4
    fourier_base: float = 2.0
    fourier_include_input: bool = True
    num_layers: int = 3
    ffn_hidden: int = 64
    memory_capacity: int = 3
    horizon: int = 4
    dt: float = 0.5
    num_categories: int = 5
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.num_layers < 1 or self.horizon < 1:
            raise ValueError("num_layers and horizon must be >= 1")
        if self.channels % self.num_heads != 0:
            raise ValueError("channels must be divisible by num_heads")


def desk_config() -> EngineConfig:
    return EngineConfig()


def reference_config() -> EngineConfig:
    """Full-scale reference profile: 512x512x40 voxels at 0.2 m within
    [-51.2, 51.2] x [-51.2, 51.2] x [-5, 3], three 256-channel decoder
    layers. Too large for desk-scale tests; kept as documented defaults."""
    return EngineConfig(
        grid=GridConfig(
            x_range=(-51.2, 51.2), y_range=(-51.2, 51.2), z_range=(-5.0, 3.0), resolution=0.2
        ),
        channels=256,
        num_heads=8,
        num_points=4,
        num_layers=3,
        ffn_hidden=512,
        memory_capacity=3,
        horizon=4,
        dt=0.5,
    )


def _coerce_field(v):
    if isinstance(v, list):
        return tuple(_coerce_field(x) for x in v)
    return v


def _coerce(cls, data: dict):
    return cls(**{k: _coerce_field(v) for k, v in data.items()})


def config_to_dict(cfg: EngineConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> EngineConfig:
    """Build an EngineConfig from a (possibly partial) dict of overrides."""
    base = config_to_dict(desk_config())
    for key, val in data.items():
        if key in ("grid", "planner", "eval"):
            base[key].update(val)
        else:
            base[key] = val
    grid = _coerce(GridConfig, base.pop("grid"))
    planner = _coerce(PlannerConfig, base.pop("planner"))
    eval_cfg = _coerce(EvalConfig, base.pop("eval"))
    return EngineConfig(grid=grid, planner=planner, eval=eval_cfg,
                        **{k: _coerce_field(v) for k, v in base.items()})


def load_config(path) -> EngineConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))
