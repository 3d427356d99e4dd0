"""Scenario and prediction types plus the ``kemp_scenario_v1`` / ``kemp_pred_v1`` JSONL formats.

Coordinates are meters in a scenario-local frame, headings radians in
(-pi, pi], future step indices 1-based (step ``i`` is ``i * step_period``
seconds after the last observed state).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCENARIO_SCHEMA = "kemp_scenario_v1"
PREDICTION_SCHEMA = "kemp_pred_v1"

AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")
ROAD_KINDS = ("lane_center", "boundary", "crosswalk", "stop_region")
MANEUVERS = ("stationary", "straight", "left_turn", "right_turn", "stop")

SIGMA_FLOOR = 1e-3
RHO_MAX = 0.99

PAST_FIELDS = ("x", "y", "vx", "vy", "heading", "valid")
FUTURE_FIELDS = ("x", "y", "valid")


class ValidationError(ValueError):
    """Invariant violation; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = path
        self.message = message
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{path}: {message}" if path else f"{where}{message}")

    def at(self, prefix: str = "", line: int | None = None) -> "ValidationError":
        path = f"{prefix}.{self.path}" if prefix and self.path else (prefix or self.path)
        return ValidationError(path, self.message, line if line is not None else self.line)


def _frozen_array(values, shape_tail: tuple[int, ...], path: str) -> np.ndarray:
    try:
        arr = np.array(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(path, f"not a numeric array ({exc})") from None
    if arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise ValidationError(path, f"expected shape (n, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(path, "non-finite value")
    arr.flags.writeable = False
    return arr


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2.0 * np.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


# ----------------------------------------------------------------------
# scenario types


@dataclass(frozen=True)
class HorizonSpec:
    past_steps: int
    future_steps: int
    step_period: float
    keyframe_count: int = 0

    def __post_init__(self):
        if self.past_steps < 1:
            raise ValidationError("past_steps", "must be >= 1")
        if self.future_steps < 1:
            raise ValidationError("future_steps", "must be >= 1")
        if not self.step_period > 0:
            raise ValidationError("step_period_s", "must be > 0")
        if self.keyframe_count < 0:
            raise ValidationError("keyframes", "must be >= 0")
        if self.keyframe_count and self.future_steps % self.keyframe_count:
            raise ValidationError(
                "keyframes",
                f"future_steps={self.future_steps} is not divisible by keyframe count {self.keyframe_count}",
            )

    @property
    def segment_length(self) -> int:
        """Steps between consecutive keyframes (``t`` in T = k t)."""
        if self.keyframe_count == 0:
            raise ValueError("no keyframes configured")
        return self.future_steps // self.keyframe_count

    def with_keyframes(self, k: int) -> "HorizonSpec":
        return HorizonSpec(self.past_steps, self.future_steps, self.step_period, k)

    def steps_for_seconds(self, seconds: float) -> int:
        return int(math.ceil(seconds / self.step_period - 1e-9))


def keyframe_indices(horizon: HorizonSpec) -> list[int]:
    """1-based future step indices of the evenly spaced keyframes ``[t, 2t, ..., T]``."""
    if horizon.keyframe_count == 0:
        raise ValueError("keyframe_indices requires keyframe_count >= 1")
    t = horizon.segment_length
    return [t * (i + 1) for i in range(horizon.keyframe_count)]


@dataclass(frozen=True, eq=False)
class AgentTrack:
    agent_id: str
    agent_kind: str
    past_states: np.ndarray  # (past_steps, 6): x, y, vx, vy, heading, valid
    future_states: np.ndarray  # (T, 3): x, y, valid

    def __post_init__(self):
        if self.agent_kind not in AGENT_KINDS:
            raise ValidationError("kind", f"unknown agent kind {self.agent_kind!r}")
        past = _frozen_array(self.past_states, (6,), "past")
        future = _frozen_array(self.future_states, (3,), "future")
        if not np.all(np.isin(past[:, 5], (0.0, 1.0))) or not np.all(np.isin(future[:, 2], (0.0, 1.0))):
            raise ValidationError("past", "valid flags must be 0 or 1")
        heading = past[:, 4]
        if np.any(heading <= -np.pi) or np.any(heading > np.pi):
            raise ValidationError("past", "heading outside (-pi, pi]")
        object.__setattr__(self, "past_states", past)
        object.__setattr__(self, "future_states", future)

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.agent_kind == other.agent_kind
            and np.array_equal(self.past_states, other.past_states)
            and np.array_equal(self.future_states, other.future_states)
        )

    @property
    def last_valid_index(self) -> int | None:
        valid = np.flatnonzero(self.past_states[:, 5] > 0)
        return int(valid[-1]) if valid.size else None


@dataclass(frozen=True, eq=False)
class RoadPolyline:
    polyline_id: str
    kind: str
    points: np.ndarray  # (n, 2)

    def __post_init__(self):
        if self.kind not in ROAD_KINDS:
            raise ValidationError("kind", f"unknown road kind {self.kind!r}")
        pts = _frozen_array(self.points, (2,), "points")
        if len(pts) < 2:
            raise ValidationError("points", "a polyline needs at least 2 points")
        if np.any(np.all(pts[1:] == pts[:-1], axis=1)):
            raise ValidationError("points", "consecutive points must be distinct")
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        if not isinstance(other, RoadPolyline):
            return NotImplemented
        return (
            self.polyline_id == other.polyline_id
            and self.kind == other.kind
            and np.array_equal(self.points, other.points)
        )


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    horizon: HorizonSpec
    target_agent_id: str
    agents: tuple[AgentTrack, ...]
    roads: tuple[RoadPolyline, ...] = ()
    maneuver_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "roads", tuple(self.roads))
        if not self.agents:
            raise ValidationError("agents", "at least one agent required")
        h = self.horizon
        for i, a in enumerate(self.agents):
            if len(a.past_states) != h.past_steps:
                raise ValidationError(f"agents[{i}].past", f"expected {h.past_steps} states, got {len(a.past_states)}")
            if len(a.future_states) != h.future_steps:
                raise ValidationError(
                    f"agents[{i}].future", f"expected {h.future_steps} states, got {len(a.future_states)}"
                )
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValidationError("agents", "duplicate agent ids")
        if self.target_agent_id not in ids:
            raise ValidationError("target_agent_id", f"{self.target_agent_id!r} not among agents")
        if not np.all(self.target.future_states[:, 2] > 0):
            raise ValidationError("target_agent_id", "target future must be fully valid")
        if self.maneuver_label is not None and self.maneuver_label not in MANEUVERS:
            raise ValidationError("maneuver_label", f"unknown maneuver {self.maneuver_label!r}")

    @property
    def target(self) -> AgentTrack:
        for a in self.agents:
            if a.agent_id == self.target_agent_id:
                return a
        raise KeyError(self.target_agent_id)

    @property
    def neighbors(self) -> list[AgentTrack]:
        return [a for a in self.agents if a.agent_id != self.target_agent_id]

    @property
    def ground_truth(self) -> np.ndarray:
        """Target future positions, shape (T, 2)."""
        return np.array(self.target.future_states[:, :2])


# ----------------------------------------------------------------------
# predicted Gaussians


@dataclass(frozen=True)
class GaussianState:
    """Bivariate Gaussian with Sigma = [[sx^2, r sx sy], [r sx sy, sy^2]], r = 0.99 tanh(rho_raw)."""

    mu: tuple[float, float]
    log_sx: float = 0.0
    log_sy: float = 0.0
    rho_raw: float = 0.0

    @property
    def sx(self) -> float:
        return max(math.exp(self.log_sx), SIGMA_FLOOR)

    @property
    def sy(self) -> float:
        return max(math.exp(self.log_sy), SIGMA_FLOOR)

    @property
    def rho(self) -> float:
        return RHO_MAX * math.tanh(self.rho_raw)

    def covariance(self) -> np.ndarray:
        sx, sy, r = self.sx, self.sy, self.rho
        return np.array([[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]])

    @classmethod
    def from_covariance(cls, mu, cov) -> "GaussianState":
        """Inverse of :meth:`covariance`; |rho| is clipped to the representable range."""
        cov = np.asarray(cov, dtype=np.float64)
        sx = max(math.sqrt(cov[0, 0]), SIGMA_FLOOR)
        sy = max(math.sqrt(cov[1, 1]), SIGMA_FLOOR)
        r = float(np.clip(cov[0, 1] / (sx * sy), -RHO_MAX + 1e-12, RHO_MAX - 1e-12))
        return cls((float(mu[0]), float(mu[1])), math.log(sx), math.log(sy), math.atanh(r / RHO_MAX))


def sigma_params_to_cov(sigma: np.ndarray) -> np.ndarray:
    """(..., 3) raw sigma parameters -> (..., 2, 2) covariances."""
    sx = np.maximum(np.exp(sigma[..., 0]), SIGMA_FLOOR)
    sy = np.maximum(np.exp(sigma[..., 1]), SIGMA_FLOOR)
    r = RHO_MAX * np.tanh(sigma[..., 2])
    cov = np.empty(sigma.shape[:-1] + (2, 2))
    cov[..., 0, 0] = sx * sx
    cov[..., 1, 1] = sy * sy
    cov[..., 0, 1] = cov[..., 1, 0] = r * sx * sy
    return cov


def cov_to_sigma_params(cov: np.ndarray) -> np.ndarray:
    sx = np.maximum(np.sqrt(cov[..., 0, 0]), SIGMA_FLOOR)
    sy = np.maximum(np.sqrt(cov[..., 1, 1]), SIGMA_FLOOR)
    r = np.clip(cov[..., 0, 1] / (sx * sy), -RHO_MAX + 1e-12, RHO_MAX - 1e-12)
    return np.stack([np.log(sx), np.log(sy), np.arctanh(r / RHO_MAX)], axis=-1)


@dataclass(frozen=True, eq=False)
class PredictedTrajectory:
    """One mixture component: T Gaussian states plus the mode's logit and probability."""

    mu: np.ndarray  # (T, 2)
    sigma: np.ndarray  # (T, 3) log_sx, log_sy, rho_raw
    logit: float
    probability: float
    keyframe_mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    keyframe_sigma: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        for name, tail in (("mu", (2,)), ("sigma", (3,)), ("keyframe_mu", (2,)), ("keyframe_sigma", (3,))):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), tail, name))
        if len(self.mu) != len(self.sigma) or len(self.keyframe_mu) != len(self.keyframe_sigma):
            raise ValidationError("states", "mu/sigma length mismatch")
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError("probability", f"{self.probability} outside [0, 1]")

    @property
    def states(self) -> list[GaussianState]:
        return [GaussianState((m[0], m[1]), *s) for m, s in zip(self.mu.tolist(), self.sigma.tolist())]

    @property
    def keyframe_states(self) -> list[GaussianState]:
        return [GaussianState((m[0], m[1]), *s) for m, s in zip(self.keyframe_mu.tolist(), self.keyframe_sigma.tolist())]

    def replace(self, **changes) -> "PredictedTrajectory":
        fields = dict(
            mu=self.mu,
            sigma=self.sigma,
            logit=self.logit,
            probability=self.probability,
            keyframe_mu=self.keyframe_mu,
            keyframe_sigma=self.keyframe_sigma,
        )
        fields.update(changes)
        return PredictedTrajectory(**fields)

    def __eq__(self, other):
        if not isinstance(other, PredictedTrajectory):
            return NotImplemented
        return (
            self.logit == other.logit
            and self.probability == other.probability
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("mu", "sigma", "keyframe_mu", "keyframe_sigma")
            )
        )


@dataclass(frozen=True)
class PredictionSet:
    scenario_id: str
    modes: tuple[PredictedTrajectory, ...]

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if not self.modes:
            raise ValidationError("modes", "at least one mode required")

    @property
    def means(self) -> np.ndarray:
        """(N, T, 2) stacked mode means."""
        return np.stack([m.mu for m in self.modes])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([m.probability for m in self.modes])


# ----------------------------------------------------------------------
# kemp_scenario_v1


def _bool_or_flag(v) -> float:
    return 1.0 if v else 0.0


def scenario_to_dict(s: Scenario) -> dict:
    h = s.horizon
    return {
        "schema": SCENARIO_SCHEMA,
        "scenario_id": s.scenario_id,
        "horizon": {
            "past_steps": h.past_steps,
            "future_steps": h.future_steps,
            "step_period_s": h.step_period,
            "keyframes": h.keyframe_count,
        },
        "target_agent_id": s.target_agent_id,
        "agents": [
            {
                "agent_id": a.agent_id,
                "kind": a.agent_kind,
                "past": [[*row[:5], bool(row[5])] for row in a.past_states.tolist()],
                "future": [[row[0], row[1], bool(row[2])] for row in a.future_states.tolist()],
            }
            for a in s.agents
        ],
        "roads": [{"polyline_id": r.polyline_id, "kind": r.kind, "points": r.points.tolist()} for r in s.roads],
        "maneuver_label": s.maneuver_label,
    }


def serialize_scenario(s: Scenario) -> str:
    """One JSON line; key order is fixed and floats round-trip exactly."""
    return json.dumps(scenario_to_dict(s), separators=(",", ":"), allow_nan=False)


def _require(obj: dict, key: str, path: str):
    if not isinstance(obj, dict):
        raise ValidationError(path, "expected an object")
    if key not in obj:
        raise ValidationError(f"{path}.{key}" if path else key, "missing field")
    return obj[key]


def scenario_from_dict(d: dict) -> Scenario:
    schema = _require(d, "schema", "")
    if schema != SCENARIO_SCHEMA:
        raise ValidationError("schema", f"expected {SCENARIO_SCHEMA!r}, got {schema!r}")
    hd = _require(d, "horizon", "")
    try:
        horizon = HorizonSpec(
            int(_require(hd, "past_steps", "horizon")),
            int(_require(hd, "future_steps", "horizon")),
            float(_require(hd, "step_period_s", "horizon")),
            int(_require(hd, "keyframes", "horizon")),
        )
    except ValidationError as exc:
        raise exc.at("horizon") from None
    agents = []
    for i, ad_ in enumerate(_require(d, "agents", "")):
        path = f"agents[{i}]"
        try:
            past = [[*row[:5], _bool_or_flag(row[5])] for row in _require(ad_, "past", path)]
            future = [[row[0], row[1], _bool_or_flag(row[2])] for row in _require(ad_, "future", path)]
            agents.append(
                AgentTrack(str(_require(ad_, "agent_id", path)), _require(ad_, "kind", path), past, future)
            )
        except ValidationError as exc:
            raise (exc if exc.path.startswith(path) else exc.at(path)) from None
        except (TypeError, IndexError) as exc:
            raise ValidationError(path, f"malformed state row ({exc})") from None
    roads = []
    for i, rd in enumerate(_require(d, "roads", "")):
        path = f"roads[{i}]"
        try:
            roads.append(
                RoadPolyline(str(_require(rd, "polyline_id", path)), _require(rd, "kind", path), _require(rd, "points", path))
            )
        except ValidationError as exc:
            raise (exc if exc.path.startswith(path) else exc.at(path)) from None
    return Scenario(
        scenario_id=str(_require(d, "scenario_id", "")),
        horizon=horizon,
        target_agent_id=str(_require(d, "target_agent_id", "")),
        agents=tuple(agents),
        roads=tuple(roads),
        maneuver_label=d.get("maneuver_label"),
    )


def parse_scenario_line(line: str, line_no: int | None = None) -> Scenario:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError("", f"malformed JSON ({exc.msg})", line_no) from None
    try:
        return scenario_from_dict(obj)
    except ValidationError as exc:
        raise exc.at(line=line_no) from None


def _iter_lines(path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                yield n, line


def parse_scenario_file(path) -> list[Scenario]:
    return [parse_scenario_line(line, n) for n, line in _iter_lines(path)]


def write_jsonl(path, lines: Iterable[str]) -> None:
    """Write lines atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
        tmp.replace(path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_scenario_file(path, scenarios: Sequence[Scenario]) -> None:
    write_jsonl(path, (serialize_scenario(s) for s in scenarios))


# ----------------------------------------------------------------------
# kemp_pred_v1


def _state_dicts(mu: np.ndarray, sigma: np.ndarray) -> list[dict]:
    return [{"mu": m, "sigma": s} for m, s in zip(mu.tolist(), sigma.tolist())]


def serialize_prediction(p: PredictionSet) -> str:
    modes = []
    for m in p.modes:
        modes.append(
            {
                "probability": m.probability,
                "logit": m.logit,
                "states": _state_dicts(m.mu, m.sigma),
                "keyframes": _state_dicts(m.keyframe_mu, m.keyframe_sigma),
            }
        )
    return json.dumps(
        {"schema": PREDICTION_SCHEMA, "scenario_id": p.scenario_id, "modes": modes},
        separators=(",", ":"),
        allow_nan=False,
    )


def parse_prediction_line(line: str, line_no: int | None = None) -> PredictionSet:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError("", f"malformed JSON ({exc.msg})", line_no) from None
    try:
        schema = _require(d, "schema", "")
        if schema != PREDICTION_SCHEMA:
            raise ValidationError("schema", f"expected {PREDICTION_SCHEMA!r}, got {schema!r}")
        modes = []
        for i, md in enumerate(_require(d, "modes", "")):
            path = f"modes[{i}]"
            states = _require(md, "states", path)
            kfs = md.get("keyframes", [])
            try:
                modes.append(
                    PredictedTrajectory(
                        mu=[s["mu"] for s in states],
                        sigma=[s["sigma"] for s in states],
                        logit=float(md.get("logit", 0.0)),
                        probability=float(_require(md, "probability", path)),
                        keyframe_mu=[s["mu"] for s in kfs],
                        keyframe_sigma=[s["sigma"] for s in kfs],
                    )
                )
            except ValidationError as exc:
                raise exc.at(path) from None
            except (KeyError, TypeError) as exc:
                raise ValidationError(path, f"malformed state ({exc})") from None
        return PredictionSet(str(_require(d, "scenario_id", "")), tuple(modes))
    except ValidationError as exc:
        raise exc.at(line=line_no) from None


def parse_prediction_file(path) -> list[PredictionSet]:
    return [parse_prediction_line(line, n) for n, line in _iter_lines(path)]


def write_prediction_file(path, predictions: Sequence[PredictionSet]) -> None:
    write_jsonl(path, (serialize_prediction(p) for p in predictions))
