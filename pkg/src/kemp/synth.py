"""Deterministic synthetic driving scenarios with labeled target maneuvers.

Each scenario draws from its own generator keyed by ``(seed, index)``, so a
scenario's content does not depend on how many others are generated or in
which order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .scene import (
    MANEUVERS,
    AgentTrack,
    HorizonSpec,
    PredictedTrajectory,
    PredictionSet,
    RoadPolyline,
    Scenario,
    wrap_angle,
)

LANE_WIDTH = 3.5
ROAD_POINT_SPACING = 4.0
NEIGHBOR_KINDS = ("vehicle", "pedestrian", "cyclist")
NEIGHBOR_KIND_WEIGHTS = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    scenario_count: int = 100
    horizon: HorizonSpec = field(default_factory=lambda: HorizonSpec(11, 80, 0.1, 4))
    maneuver_mix: dict = field(
        default_factory=lambda: {"straight": 0.35, "left_turn": 0.25, "right_turn": 0.25, "stop": 0.15}
    )
    speed_range: tuple[float, float] = (4.0, 14.0)
    turn_radius_range: tuple[float, float] = (8.0, 25.0)
    neighbor_agent_range: tuple[int, int] = (0, 4)
    noise_std: float = 0.05
    random_frame: bool = True

    def __post_init__(self):
        if self.scenario_count < 1:
            raise ValueError("scenario_count must be >= 1")
        unknown = set(self.maneuver_mix) - set(MANEUVERS)
        if unknown:
            raise ValueError(f"unknown maneuvers in mix: {sorted(unknown)}")
        probs = list(self.maneuver_mix.values())
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"maneuver_mix must be non-negative and sum to 1, got {self.maneuver_mix}")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi or hi <= 0:
            raise ValueError(f"bad speed_range {self.speed_range}")
        lo, hi = self.turn_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad turn_radius_range {self.turn_radius_range}")
        lo, hi = self.neighbor_agent_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad neighbor_agent_range {self.neighbor_agent_range}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "GeneratorConfig":
        """Build from flat string values, e.g. a parsed key=value file.

        Horizon keys are ``past_steps``, ``future_steps``, ``step_period``,
        ``keyframes``; the mix is ``mix.<maneuver>=<prob>``; ranges are
        ``lo,hi``.
        """
        kw: dict = {}
        base = cls()
        h = base.horizon
        horizon = dict(
            past_steps=h.past_steps, future_steps=h.future_steps, step_period=h.step_period, keyframe_count=h.keyframe_count
        )
        mix = {}
        for key, raw in values.items():
            raw = str(raw).strip()
            if key in ("past_steps", "future_steps"):
                horizon[key] = int(raw)
            elif key == "step_period":
                horizon[key] = float(raw)
            elif key == "keyframes":
                horizon["keyframe_count"] = int(raw)
            elif key.startswith("mix."):
                mix[key[4:]] = float(raw)
            elif key in ("seed", "scenario_count"):
                kw[key] = int(raw)
            elif key == "noise_std":
                kw[key] = float(raw)
            elif key == "random_frame":
                kw[key] = raw.lower() in ("1", "true", "yes")
            elif key in ("speed_range", "turn_radius_range"):
                kw[key] = tuple(float(v) for v in raw.split(","))
            elif key == "neighbor_agent_range":
                kw[key] = tuple(int(v) for v in raw.split(","))
            else:
                raise ValueError(f"unknown generator config key {key!r}")
        if mix:
            kw["maneuver_mix"] = mix
        kw["horizon"] = HorizonSpec(**horizon)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        values = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"expected key=value, got {line!r}")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, HorizonSpec):
                v = {
                    "past_steps": v.past_steps,
                    "future_steps": v.future_steps,
                    "step_period": v.step_period,
                    "keyframe_count": v.keyframe_count,
                }
            elif isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, dict):
                v = dict(v)
            out[f.name] = v
        return out


@dataclass(frozen=True)
class TargetMotion:
    """Kinematic parameters of the target; positions are in the target's local frame."""

    label: str
    speed: float
    origin: tuple[float, float]
    heading: float
    radius: float = 0.0
    lead_in: float = 0.0
    stop_time: float = 0.0

    @property
    def turn_sign(self) -> float:
        return {"left_turn": 1.0, "right_turn": -1.0}.get(self.label, 0.0)

    def arc_length(self, t):
        """Distance travelled along the path at time ``t`` seconds (negative = past)."""
        t = np.asarray(t, dtype=np.float64)
        if self.label == "stop":
            decel = self.speed / self.stop_time
            tc = np.clip(t, None, self.stop_time)
            moving = self.speed * tc - 0.5 * decel * np.clip(tc, 0.0, None) ** 2
            return moving
        return self.speed * t

    def speed_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.label == "stop":
            return np.where(t <= 0, self.speed, np.clip(self.speed * (1.0 - t / self.stop_time), 0.0, None))
        return np.full_like(t, self.speed)

    def pose_at_arc(self, s):
        """Local-frame (x, y, heading) at arc length ``s``."""
        s = np.asarray(s, dtype=np.float64)
        x, y, h = s.copy(), np.zeros_like(s), np.zeros_like(s)
        sign = self.turn_sign
        if sign != 0.0:
            r, l0 = self.radius, self.lead_in
            quarter = r * math.pi / 2.0
            on_arc = (s > l0) & (s <= l0 + quarter)
            phi = (s - l0) / r
            x = np.where(on_arc, l0 + r * np.sin(phi), x)
            y = np.where(on_arc, sign * r * (1.0 - np.cos(phi)), y)
            h = np.where(on_arc, sign * phi, h)
            after = s > l0 + quarter
            x = np.where(after, l0 + r, x)
            y = np.where(after, sign * (r + (s - l0 - quarter)), y)
            h = np.where(after, sign * math.pi / 2.0, h)
        return x, y, h


def _scenario_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _pick(rng: np.random.Generator, labels, probs):
    return labels[int(rng.choice(len(labels), p=np.asarray(probs) / np.sum(probs)))]


def sample_motion(config: GeneratorConfig, index: int) -> TargetMotion:
    """Target kinematics for scenario ``index`` (the first draws of that scenario's stream)."""
    return _sample_motion(_scenario_rng(config.seed, index), config)


def _sample_motion(rng: np.random.Generator, config: GeneratorConfig) -> TargetMotion:
    labels = [m for m in MANEUVERS if m in config.maneuver_mix]
    label = _pick(rng, labels, [config.maneuver_mix[m] for m in labels])
    origin = (float(rng.uniform(-100, 100)), float(rng.uniform(-100, 100)))
    heading = wrap_angle(rng.uniform(-math.pi, math.pi))
    if not config.random_frame:
        origin, heading = (0.0, 0.0), 0.0
    speed = float(rng.uniform(*config.speed_range))
    radius_draw = float(rng.uniform(*config.turn_radius_range))
    lead_draw = float(rng.uniform())
    stop_draw = float(rng.uniform(0.3, 0.7))
    h = config.horizon
    duration = h.future_steps * h.step_period
    if label == "stationary":
        return TargetMotion(label, 0.0, origin, heading)
    if label == "stop":
        return TargetMotion(label, speed, origin, heading, stop_time=stop_draw * duration)
    if label in ("left_turn", "right_turn"):
        # quarter arc must finish at least one step before the horizon ends
        budget = speed * (duration - h.step_period)
        radius = min(radius_draw, 0.9 * budget * 2.0 / math.pi)
        lead_in = lead_draw * (budget - radius * math.pi / 2.0)
        return TargetMotion(label, speed, origin, heading, radius=radius, lead_in=lead_in)
    return TargetMotion(label, speed, origin, heading)


def _to_world(motion: TargetMotion, x, y):
    c, s = math.cos(motion.heading), math.sin(motion.heading)
    return motion.origin[0] + c * x - s * y, motion.origin[1] + s * x + c * y


def _offset_polyline(x, y, h, offset: float):
    return x - offset * np.sin(h), y + offset * np.cos(h)


def _dedupe(points: np.ndarray) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(points[1:] != points[:-1], axis=1)
    return points[keep]


def _generate_one(config: GeneratorConfig, index: int) -> Scenario:
    rng = _scenario_rng(config.seed, index)
    motion = _sample_motion(rng, config)
    h = config.horizon
    dt = h.step_period
    past_t = -dt * np.arange(h.past_steps - 1, -1, -1, dtype=np.float64)
    future_t = dt * np.arange(1, h.future_steps + 1, dtype=np.float64)

    def states_at(t):
        x, y, hd = motion.pose_at_arc(motion.arc_length(t))
        v = motion.speed_at(t)
        wx, wy = _to_world(motion, x, y)
        whd = np.asarray(wrap_angle(hd + motion.heading))
        return wx, wy, v * np.cos(whd), v * np.sin(whd), whd

    px, py, pvx, pvy, ph = states_at(past_t)
    noise = rng.normal(0.0, 1.0, size=(2, h.past_steps)) * config.noise_std
    target_past = np.column_stack([px + noise[0], py + noise[1], pvx, pvy, ph, np.ones(h.past_steps)])
    fx, fy, _, _, _ = states_at(future_t)
    target_future = np.column_stack([fx, fy, np.ones(h.future_steps)])
    agents = [AgentTrack("target", "vehicle", target_past, target_future)]

    # road along the intended path, plus boundaries
    duration = h.future_steps * dt
    travel = float(motion.arc_length(duration))
    behind = motion.speed * (h.past_steps - 1) * dt + 10.0
    ahead = max(travel, 30.0) + 10.0
    s = np.arange(-behind, ahead + 1e-9, ROAD_POINT_SPACING)
    lx, ly, lh = motion.pose_at_arc(s)
    roads = []
    for pid, (kind, offset) in enumerate((("lane_center", 0.0), ("boundary", LANE_WIDTH / 2), ("boundary", -LANE_WIDTH / 2))):
        ox, oy = _offset_polyline(lx, ly, lh, offset)
        wx, wy = _to_world(motion, ox, oy)
        roads.append(RoadPolyline(f"r{pid}", kind, _dedupe(np.column_stack([wx, wy]))))
    if motion.label in ("stop", "stationary"):
        s_stop = travel + 1.0
        line_x = np.array([s_stop, s_stop])
        line_y = np.array([-LANE_WIDTH / 2, LANE_WIDTH / 2])
        wx, wy = _to_world(motion, line_x, line_y)
        roads.append(RoadPolyline(f"r{len(roads)}", "stop_region", np.column_stack([wx, wy])))
        wx, wy = _to_world(motion, line_x + 3.0, line_y * 2.0)
        roads.append(RoadPolyline(f"r{len(roads)}", "crosswalk", np.column_stack([wx, wy])))

    # neighbors on straight offset lanes
    n_lo, n_hi = config.neighbor_agent_range
    n_neighbors = int(rng.integers(n_lo, n_hi + 1))
    lanes_used = {}
    for j in range(n_neighbors):
        lateral = float(rng.choice([-2.0, -1.0, 1.0, 2.0])) * LANE_WIDTH
        direction = 1.0 if rng.uniform() < 0.5 else -1.0
        start = float(rng.uniform(-30.0, 30.0))
        speed = float(rng.uniform(*config.speed_range))
        kind = _pick(rng, NEIGHBOR_KINDS, NEIGHBOR_KIND_WEIGHTS)
        nnoise = rng.normal(0.0, 1.0, size=(2, h.past_steps)) * config.noise_std
        nx_past = start + direction * speed * past_t
        nx_future = start + direction * speed * future_t
        wx, wy = _to_world(motion, nx_past, np.full_like(nx_past, lateral))
        nh = wrap_angle(motion.heading + (0.0 if direction > 0 else math.pi))
        past = np.column_stack(
            [
                wx + nnoise[0],
                wy + nnoise[1],
                np.full_like(wx, speed * math.cos(nh)),
                np.full_like(wx, speed * math.sin(nh)),
                np.full_like(wx, nh),
                np.ones_like(wx),
            ]
        )
        fwx, fwy = _to_world(motion, nx_future, np.full_like(nx_future, lateral))
        future = np.column_stack([fwx, fwy, np.ones_like(fwx)])
        agents.append(AgentTrack(f"n{j}", kind, past, future))
        lanes_used.setdefault((lateral, direction), None)
    for lateral, direction in lanes_used:
        xs = np.arange(-60.0, 60.0 + 1e-9, ROAD_POINT_SPACING * 2) * direction
        wx, wy = _to_world(motion, xs, np.full_like(xs, lateral))
        roads.append(RoadPolyline(f"r{len(roads)}", "lane_center", np.column_stack([wx, wy])))

    return Scenario(
        scenario_id=f"synth-{config.seed}-{index:05d}",
        horizon=h,
        target_agent_id="target",
        agents=tuple(agents),
        roads=tuple(roads),
        maneuver_label=motion.label,
    )


def generate(config: GeneratorConfig) -> list[Scenario]:
    return [_generate_one(config, i) for i in range(config.scenario_count)]


def constant_velocity_baseline(s: Scenario) -> PredictionSet:
    """Extrapolate the last observed velocity; single mode, isotropic sigma of 1 m."""
    target = s.target
    valid = np.flatnonzero(target.past_states[:, 5] > 0)
    if valid.size < 2:
        raise ValueError(f"{s.scenario_id}: constant-velocity baseline needs >= 2 valid past states")
    last = target.past_states[valid[-1]]
    h = s.horizon
    steps = np.arange(1, h.future_steps + 1, dtype=np.float64)[:, None] * h.step_period
    mu = last[None, :2] + steps * last[None, 2:4]
    mode = PredictedTrajectory(mu=mu, sigma=np.zeros((h.future_steps, 3)), logit=0.0, probability=1.0)
    return PredictionSet(s.scenario_id, (mode,))
