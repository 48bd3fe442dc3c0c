"""Reference waypoint controller for the evasion task.

The controller is consumed by the rest of the system as an opaque callable
from the joint state to a control, so everything downstream treats it as a
black box.  Internally it switches between two behaviors:

* track: steer toward a point a short distance ahead on the straight
  start-goal segment at cruise speed, with proportional heading correction;
* evade: when a conflict is detected (obstacle ahead and projected gap at or
  below the danger radius), head for the waypoint perpendicular to the path
  on the side selected by the encounter geometry.  Concretely the commanded
  turn rate carries the required sign at a fixed magnitude strictly inside
  the admissible bound, and drops to zero once the perpendicular orientation
  has been reached, so the emitted command satisfies the evade predicate at
  every triggered step by construction.

The evade mode is sticky: it disengages only once the projected gap exceeds
the danger radius plus a margin (or the obstacle is behind), which prevents
mode chattering near the trigger boundary.  The monitor itself always uses
the exact danger radius; the margin shapes control only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .evasion import (
    TaskConfig,
    classify_encounter,
    closest_point_on_segment,
    delta_theta,
    heading_vector,
    infront,
    mindistance,
    path_heading,
    wrap_angle,
)

__all__ = ["ControllerConfig", "SafeController"]


@dataclass(frozen=True)
class ControllerConfig:
    """Gains and speeds; defaults keep the unperturbed robot comfortably
    inside actuator limits and inside the episode step budget."""

    heading_gain: float = 2.0  # 1/s, proportional heading correction
    cruise_speed: float = 0.12  # m/s
    evade_turn_rate: float = 1.2  # rad/s, strictly inside the 1.5 rad/s bound
    exit_margin: float = 0.05  # m, added to danger_radius for mode exit
    track_turn_cap: float = 2.0  # rad/s
    target_lookahead: float = 0.3  # m, advance along the path when tracking

    def to_dict(self) -> dict:
        return {
            "heading_gain": self.heading_gain,
            "cruise_speed": self.cruise_speed,
            "evade_turn_rate": self.evade_turn_rate,
            "exit_margin": self.exit_margin,
            "track_turn_cap": self.track_turn_cap,
            "target_lookahead": self.target_lookahead,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ControllerConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown controller config keys: {sorted(unknown)}")
        return cls(**data)


class SafeController:
    """Stateful evade/track controller; call with (robot, obstacle)."""

    def __init__(self, task: TaskConfig, cfg: ControllerConfig | None = None):
        self.task = task
        self.cfg = cfg or ControllerConfig()
        self.theta_path = path_heading(task.start, task.goal)
        self._evading = False
        if self.cfg.evade_turn_rate > task.evade_rate_bound:
            raise ValueError("evade turn rate exceeds the admissible bound")

    def reset(self) -> None:
        self._evading = False

    def clone(self) -> "SafeController":
        return SafeController(self.task, self.cfg)

    @property
    def evading(self) -> bool:
        return self._evading

    def __call__(self, robot, obstacle) -> tuple[float, float]:
        task, cfg = self.task, self.cfg
        gap = mindistance(robot, obstacle, task.dt, task.lookahead)
        ahead = infront(robot, obstacle)
        if ahead and gap <= task.danger_radius:
            self._evading = True
        elif self._evading and not (ahead and gap <= task.danger_radius + cfg.exit_margin):
            self._evading = False

        if self._evading:
            _, sign = classify_encounter(robot, obstacle)
            dth = delta_theta(robot.theta, sign, self.theta_path)
            if dth >= 0.0 or abs(dth) <= task.evade_angle_tol:
                omega = 0.0
            else:
                omega = sign * cfg.evade_turn_rate
            v = cfg.cruise_speed
        else:
            target = self._track_target(robot)
            to_target = target - robot.position()
            dist = float(np.hypot(*to_target))
            theta_des = (
                math.atan2(to_target[1], to_target[0]) if dist > 1e-9 else self.theta_path
            )
            err = wrap_angle(theta_des - robot.theta)
            omega = min(max(cfg.heading_gain * err, -cfg.track_turn_cap), cfg.track_turn_cap)
            v = cfg.cruise_speed

        v = min(max(v, task.v_min), task.v_max)
        omega = min(max(omega, -task.omega_max), task.omega_max)
        return v, omega

    def _track_target(self, robot) -> np.ndarray:
        start = np.asarray(self.task.start)
        goal = np.asarray(self.task.goal)
        proj = closest_point_on_segment(robot.position(), start, goal)
        direction = heading_vector(self.theta_path)
        advanced = proj + self.cfg.target_lookahead * direction
        # Do not aim past the goal.
        span = goal - start
        overshoot = float((advanced - goal) @ span)
        return goal if overshoot > 0 else advanced
