"""Ego action conditions: the tagged values a world model can be driven by.

Four kinds are supported: velocity (vx, vy) in m/s, curvature in 1/m
(reciprocal turning radius), trajectory_step (dx, dy) in meters, and a
high-level command (forward / left / right).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

VELOCITY = "velocity"
CURVATURE = "curvature"
TRAJECTORY_STEP = "trajectory_step"
COMMAND = "command"
ACTION_KINDS = (VELOCITY, CURVATURE, TRAJECTORY_STEP, COMMAND)
COMMANDS = ("forward", "left", "right")


@dataclass(frozen=True)
class ActionCondition:
    kind: str
    values: tuple = ()
    command: str | None = None

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind == COMMAND:
            if self.command not in COMMANDS:
                raise ValueError(f"unknown command {self.command!r}, expected one of {COMMANDS}")
        else:
            expected = 1 if self.kind == CURVATURE else 2
            if len(self.values) != expected:
                raise ValueError(f"{self.kind} takes {expected} scalars, got {len(self.values)}")
            if not all(math.isfinite(v) for v in self.values):
                raise ValueError(f"{self.kind} scalars must be finite: {self.values}")
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def velocity(cls, vx: float, vy: float) -> "ActionCondition":
        return cls(VELOCITY, (vx, vy))

    @classmethod
    def curvature(cls, kappa: float) -> "ActionCondition":
        return cls(CURVATURE, (kappa,))

    @classmethod
    def trajectory_step(cls, dx: float, dy: float) -> "ActionCondition":
        return cls(TRAJECTORY_STEP, (dx, dy))

    @classmethod
    def command(cls, name: str) -> "ActionCondition":
        return cls(COMMAND, (), name)

    def scalars(self) -> tuple[float, ...]:
        """Canonical scalar list fed to the Fourier embedding (commands
        are categorical and have no scalars)."""
        if self.kind == COMMAND:
            raise ValueError("command conditions are categorical, not scalar")
        return self.values

    def to_json(self) -> dict:
        if self.kind == VELOCITY:
            return {"kind": VELOCITY, "vx": self.values[0], "vy": self.values[1]}
        if self.kind == CURVATURE:
            return {"kind": CURVATURE, "value": self.values[0]}
        if self.kind == TRAJECTORY_STEP:
            return {"kind": TRAJECTORY_STEP, "dx": self.values[0], "dy": self.values[1]}
        return {"kind": COMMAND, "value": self.command}

    @classmethod
    def from_json(cls, data: dict) -> "ActionCondition":
        if not isinstance(data, dict) or "kind" not in data:
            raise ValueError(f"action record must be an object with a 'kind': {data!r}")
        kind = data["kind"]
        try:
            if kind == VELOCITY:
                return cls.velocity(data["vx"], data["vy"])
            if kind == CURVATURE:
                return cls.curvature(data["value"])
            if kind == TRAJECTORY_STEP:
                return cls.trajectory_step(data["dx"], data["dy"])
            if kind == COMMAND:
                return cls.command(data["value"])
        except KeyError as e:
            raise ValueError(f"action record missing field {e} for kind {kind!r}") from e
        raise ValueError(f"unknown action kind {kind!r}")
