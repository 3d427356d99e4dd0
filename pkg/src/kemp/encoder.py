"""Target-centric scene encoding: roads (PointNet), target history (MLP),
agent interactions (MLP + max pool), fused by multiplicative context gates.

Feature extraction is plain numpy and runs once per scenario; the
differentiable part consumes padded, masked batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Linear, Module, init_uniform
from .scene import AGENT_KINDS, ROAD_KINDS, AgentTrack, RoadPolyline, Scenario, cov_to_sigma_params, sigma_params_to_cov, wrap_angle

# feature scaling keeps network inputs O(1)
POSITION_SCALE = 10.0
ARC_SCALE = 50.0

ROAD_FEATURES = 2 + len(ROAD_KINDS) + 1
NEIGHBOR_FEATURES = 4 + len(AGENT_KINDS)
HISTORY_FEATURES = 6


@dataclass(frozen=True)
class Frame:
    """Rigid map between scenario coordinates and the target-centric frame."""

    origin: tuple[float, float]
    heading: float

    @property
    def _rot(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, -s], [s, c]])

    # elementwise so each row maps identically whatever the array shape
    def _rotate(self, v: np.ndarray, angle_sign: float) -> np.ndarray:
        c, s = math.cos(self.heading), angle_sign * math.sin(self.heading)
        out = np.empty_like(v)
        out[..., 0] = c * v[..., 0] - s * v[..., 1]
        out[..., 1] = s * v[..., 0] + c * v[..., 1]
        return out

    def to_local(self, points) -> np.ndarray:
        p = np.array(points, dtype=np.float64)
        p[..., 0] -= self.origin[0]
        p[..., 1] -= self.origin[1]
        return self._rotate(p, -1.0)

    def to_world(self, points) -> np.ndarray:
        out = self._rotate(np.asarray(points, dtype=np.float64), 1.0)
        out[..., 0] += self.origin[0]
        out[..., 1] += self.origin[1]
        return out

    def vectors_to_local(self, v) -> np.ndarray:
        return self._rotate(np.asarray(v, dtype=np.float64), -1.0)

    def vectors_to_world(self, v) -> np.ndarray:
        return self._rotate(np.asarray(v, dtype=np.float64), 1.0)

    def sigma_to_world(self, sigma: np.ndarray) -> np.ndarray:
        cov = sigma_params_to_cov(sigma)
        rot = self._rot
        return cov_to_sigma_params(rot @ cov @ rot.T)


def target_frame(s: Scenario) -> Frame:
    target = s.target
    idx = target.last_valid_index
    if idx is None or idx != len(target.past_states) - 1:
        raise ValueError(f"{s.scenario_id}: target has no valid last observed state")
    last = target.past_states[idx]
    return Frame((float(last[0]), float(last[1])), float(last[4]))


def normalize_frame(s: Scenario) -> tuple[Scenario, Frame]:
    """Translate/rotate so the target's last observed pose is the origin facing +x."""
    frame = target_frame(s)

    def track(a: AgentTrack) -> AgentTrack:
        past = np.array(a.past_states)
        past[:, :2] = frame.to_local(past[:, :2])
        past[:, 2:4] = frame.vectors_to_local(past[:, 2:4])
        past[:, 4] = wrap_angle(past[:, 4] - frame.heading)
        future = np.array(a.future_states)
        future[:, :2] = frame.to_local(future[:, :2])
        return AgentTrack(a.agent_id, a.agent_kind, past, future)

    roads = tuple(RoadPolyline(r.polyline_id, r.kind, frame.to_local(r.points)) for r in s.roads)
    return replace(s, agents=tuple(track(a) for a in s.agents), roads=roads), frame


def transform_scenario(s: Scenario, rotation: float, translation) -> Scenario:
    """Apply a rigid motion (rotate about the origin, then translate) to every coordinate."""
    frame = Frame((float(translation[0]), float(translation[1])), rotation)

    def track(a: AgentTrack) -> AgentTrack:
        past = np.array(a.past_states)
        past[:, :2] = frame.to_world(past[:, :2])
        past[:, 2:4] = frame.vectors_to_world(past[:, 2:4])
        past[:, 4] = wrap_angle(past[:, 4] + rotation)
        future = np.array(a.future_states)
        future[:, :2] = frame.to_world(future[:, :2])
        return AgentTrack(a.agent_id, a.agent_kind, past, future)

    roads = tuple(RoadPolyline(r.polyline_id, r.kind, frame.to_world(r.points)) for r in s.roads)
    return replace(s, agents=tuple(track(a) for a in s.agents), roads=roads)


# ----------------------------------------------------------------------
# numpy feature extraction


@dataclass(frozen=True)
class SceneFeatures:
    scenario_id: str
    frame: Frame
    history: np.ndarray  # (past_steps * 6,)
    road_points: np.ndarray  # (M, ROAD_FEATURES)
    neighbors: np.ndarray  # (Q, NEIGHBOR_FEATURES)
    ground_truth: np.ndarray  # (T, 2) in the target frame


def _road_point_features(roads: Sequence[RoadPolyline], radius: float) -> np.ndarray:
    rows = []
    for r in roads:
        pts = r.points
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        onehot = np.zeros((len(pts), len(ROAD_KINDS)))
        onehot[:, ROAD_KINDS.index(r.kind)] = 1.0
        feats = np.column_stack([pts / POSITION_SCALE, onehot, arc / ARC_SCALE])
        rows.append(feats[np.linalg.norm(pts, axis=1) <= radius])
    if not rows:
        return np.zeros((0, ROAD_FEATURES))
    return np.concatenate(rows, axis=0)


def _history_features(target: AgentTrack) -> np.ndarray:
    past = np.array(target.past_states)
    valid = past[:, 5:6]
    feats = np.column_stack(
        [past[:, :2] / POSITION_SCALE, past[:, 2:4] / POSITION_SCALE, past[:, 4:5], np.ones_like(valid)]
    )
    feats = feats * valid
    return feats.reshape(-1)


def _neighbor_features(s: Scenario) -> np.ndarray:
    target = s.target
    last = target.past_states[-1]
    rows = []
    for a in s.neighbors:
        idx = a.last_valid_index
        if idx is None:
            continue
        st = a.past_states[idx]
        onehot = np.zeros(len(AGENT_KINDS))
        onehot[AGENT_KINDS.index(a.agent_kind)] = 1.0
        rows.append(np.concatenate([(st[:2] - last[:2]) / POSITION_SCALE, (st[2:4] - last[2:4]) / POSITION_SCALE, onehot]))
    if not rows:
        return np.zeros((0, NEIGHBOR_FEATURES))
    return np.array(rows)


def extract_features(s: Scenario, road_radius: float = 50.0) -> SceneFeatures:
    local, frame = normalize_frame(s)
    target = local.target
    return SceneFeatures(
        scenario_id=s.scenario_id,
        frame=frame,
        history=_history_features(target),
        road_points=_road_point_features(local.roads, road_radius),
        neighbors=_neighbor_features(local),
        ground_truth=np.array(target.future_states[:, :2]),
    )


@dataclass
class Batch:
    scenario_ids: list[str]
    frames: list[Frame]
    history: np.ndarray  # (B, P*6)
    roads: np.ndarray  # (B, M, F)
    road_mask: np.ndarray  # (B, M)
    neighbors: np.ndarray  # (B, Q, F)
    neighbor_mask: np.ndarray  # (B, Q)
    ground_truth: np.ndarray  # (B, T, 2)

    def __len__(self) -> int:
        return len(self.scenario_ids)


def _pad(arrays: Sequence[np.ndarray], width: int) -> tuple[np.ndarray, np.ndarray]:
    m = max(1, max(len(a) for a in arrays))
    out = np.zeros((len(arrays), m, width))
    mask = np.zeros((len(arrays), m), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
        mask[i, : len(a)] = True
    return out, mask


def collate(features: Sequence[SceneFeatures]) -> Batch:
    roads, road_mask = _pad([f.road_points for f in features], ROAD_FEATURES)
    nbrs, nbr_mask = _pad([f.neighbors for f in features], NEIGHBOR_FEATURES)
    return Batch(
        scenario_ids=[f.scenario_id for f in features],
        frames=[f.frame for f in features],
        history=np.stack([f.history for f in features]),
        roads=roads,
        road_mask=road_mask,
        neighbors=nbrs,
        neighbor_mask=nbr_mask,
        ground_truth=np.stack([f.ground_truth for f in features]),
    )


# ----------------------------------------------------------------------
# differentiable encoder


@dataclass(frozen=True)
class EncoderConfig:
    past_steps: int = 11
    embedding_dim: int = 128
    hidden: int = 64
    component_dim: int = 64
    gate_blocks: int = 3
    road_radius: float = 50.0


class ContextEncoder(Module):
    def __init__(self, rng: np.random.Generator, config: EncoderConfig):
        self.config = config
        h, d = config.hidden, config.component_dim
        self.road_mlp = MLP(rng, [ROAD_FEATURES, h, h, d])
        self.road_empty = init_uniform(rng, (d,), d)
        self.history_mlp = MLP(rng, [config.past_steps * HISTORY_FEATURES, h, h, d])
        self.interaction_mlp = MLP(rng, [NEIGHBOR_FEATURES, h, h, d])
        self.interaction_empty = init_uniform(rng, (d,), d)
        fused = 3 * d
        self.block_mlps = [MLP(rng, [fused, h, d]) for _ in range(config.gate_blocks)]
        self.block_gates = [Linear(rng, fused, d) for _ in range(config.gate_blocks)]
        self.projection = Linear(rng, config.gate_blocks * d, config.embedding_dim)

    def _pooled_or_default(self, per_item: Tensor, mask: np.ndarray, default: Tensor) -> Tensor:
        pooled = ad.maxpool_rows(per_item, mask)
        has = np.broadcast_to(mask.any(axis=1)[:, None], pooled.shape).astype(np.float64)
        return pooled * has + default * (1.0 - has)

    def encode_roads(self, batch: Batch) -> Tensor:
        return self._pooled_or_default(self.road_mlp(Tensor(batch.roads)), batch.road_mask, self.road_empty)

    def encode_history(self, batch: Batch) -> Tensor:
        return self.history_mlp(Tensor(batch.history))

    def encode_interactions(self, batch: Batch) -> Tensor:
        per = self.interaction_mlp(Tensor(batch.neighbors))
        return self._pooled_or_default(per, batch.neighbor_mask, self.interaction_empty)

    def fuse(self, road: Tensor, history: Tensor, interaction: Tensor) -> Tensor:
        x = ad.concat([road, history, interaction], axis=-1)
        blocks = [mlp(x) * ad.sigmoid(gate(x)) for mlp, gate in zip(self.block_mlps, self.block_gates)]
        return self.projection(ad.concat(blocks, axis=-1))

    def __call__(self, batch: Batch) -> Tensor:
        return self.fuse(self.encode_roads(batch), self.encode_history(batch), self.encode_interactions(batch))

    def encode(self, s: Scenario) -> np.ndarray:
        """Context embedding of a single scenario, shape (embedding_dim,)."""
        batch = collate([extract_features(s, self.config.road_radius)])
        return self(batch).data[0]
