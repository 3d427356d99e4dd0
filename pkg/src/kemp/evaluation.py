"""Motion-prediction metrics, maneuver buckets, NMS selection and ensemble merging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scene import MANEUVERS, HorizonSpec, PredictionSet, Scenario, wrap_angle


@dataclass(frozen=True)
class MetricConfig:
    miss_threshold_m: float = 2.0
    nms_radius_m: float = 2.0
    top_k: int = 6
    map_horizons: tuple[int, ...] | None = None  # future step indices; None -> 3 s, 5 s, T

    def __post_init__(self):
        if self.miss_threshold_m <= 0 or self.nms_radius_m <= 0:
            raise ValueError("thresholds must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.map_horizons is not None:
            hs = tuple(int(h) for h in self.map_horizons)
            if not hs or any(h < 1 for h in hs) or any(b <= a for a, b in zip(hs, hs[1:])):
                raise ValueError(f"map_horizons must be positive and increasing, got {self.map_horizons}")
            object.__setattr__(self, "map_horizons", hs)

    def resolved_horizons(self, horizon: HorizonSpec) -> tuple[int, ...]:
        if self.map_horizons is not None:
            if self.map_horizons[-1] > horizon.future_steps:
                raise ValueError(f"map horizon {self.map_horizons[-1]} exceeds T={horizon.future_steps}")
            return self.map_horizons
        steps = [horizon.steps_for_seconds(3.0), horizon.steps_for_seconds(5.0), horizon.future_steps]
        out: list[int] = []
        for s in steps:
            s = min(s, horizon.future_steps)
            if not out or s > out[-1]:
                out.append(s)
        return tuple(out)


def horizon_label(step: int, step_period: float) -> str:
    return f"{step * step_period:g}s"


def _check_lengths(pred: PredictionSet, gt: np.ndarray) -> np.ndarray:
    means = pred.means
    gt = np.asarray(gt, dtype=np.float64)
    if means.shape[1:] != gt.shape:
        raise ValueError(f"{pred.scenario_id}: prediction shape {means.shape[1:]} != ground truth {gt.shape}")
    return means


def min_ade(pred: PredictionSet, gt) -> float:
    means = _check_lengths(pred, gt)
    return float(np.min(np.linalg.norm(means - gt, axis=-1).mean(axis=1)))


def min_fde(pred: PredictionSet, gt) -> float:
    means = _check_lengths(pred, gt)
    return float(np.min(np.linalg.norm(means[:, -1] - np.asarray(gt)[-1], axis=-1)))


def miss_rate(preds: Sequence[PredictionSet], gts: Sequence[np.ndarray], config: MetricConfig) -> float:
    """Fraction of scenarios whose best endpoint error exceeds the threshold (equality is a hit)."""
    if len(preds) == 0:
        raise ValueError("miss_rate: empty dataset")
    if len(preds) != len(gts):
        raise ValueError("miss_rate: predictions and ground truths are not aligned")
    misses = sum(min_fde(p, g) > config.miss_threshold_m for p, g in zip(preds, gts))
    return misses / len(preds)


def classify_maneuver(gt, heading0: float, step_period: float, origin=None) -> str:
    """Bucket a ground-truth future into one of the maneuver labels.

    ``origin`` is the last observed position; when given, the first step's
    displacement counts toward path length and speed.
    """
    pts = np.asarray(gt, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError("classify_maneuver needs T >= 2")
    if origin is not None:
        pts = np.vstack([np.asarray(origin, dtype=np.float64)[None], pts])
    steps = np.diff(pts, axis=0)
    dist = np.linalg.norm(steps, axis=1)
    path_length = float(dist.sum())
    if path_length < 2.0:
        return "stationary"
    quarter = max(1, len(dist) // 4)
    if dist[-quarter:].mean() / step_period < 0.5:
        return "stop"
    moving = np.flatnonzero(dist > 1e-6)
    last = steps[moving[-1]]
    change = wrap_angle(math.atan2(last[1], last[0]) - heading0)
    if change > math.pi / 6:
        return "left_turn"
    if change < -math.pi / 6:
        return "right_turn"
    return "straight"


def scenario_bucket(s: Scenario) -> str:
    target = s.target
    idx = target.last_valid_index
    last = target.past_states[idx]
    return classify_maneuver(s.ground_truth, float(last[4]), s.horizon.step_period, origin=last[:2])


def _ranked_hits(pred: PredictionSet, gt: np.ndarray, cutoff: int, threshold: float) -> list[tuple[float, bool]]:
    """(probability, is_true_positive) per mode, one TP at most (highest-ranked hit)."""
    probs = pred.probabilities
    order = np.argsort(-probs, kind="stable")
    err = np.linalg.norm(pred.means[:, cutoff - 1] - np.asarray(gt)[cutoff - 1], axis=-1)
    out = []
    found = False
    for i in order:
        tp = (not found) and bool(err[i] <= threshold)
        found = found or tp
        out.append((float(probs[i]), tp))
    return out


def average_precision(pairs: Sequence[tuple[float, bool]], positives: int) -> float:
    """11-point interpolated AP; ``positives`` is the number of scenarios in the bucket."""
    if positives == 0:
        return 0.0
    probs = np.array([p for p, _ in pairs], dtype=np.float64)
    tps = np.array([t for _, t in pairs], dtype=bool)
    order = np.argsort(-probs, kind="stable")
    tps = tps[order]
    tp_cum = np.cumsum(tps)
    ranks = np.arange(1, len(tps) + 1)
    precision = tp_cum / ranks
    total = 0.0
    for i in range(11):
        ok = tp_cum * 10 >= i * positives
        if ok.any():
            total += float(precision[ok].max())
    return total / 11.0


def mean_ap(
    preds: Sequence[PredictionSet],
    gts: Sequence[np.ndarray],
    buckets: Sequence[str],
    config: MetricConfig,
    horizon_cutoff: int,
) -> tuple[float, dict[str, float]]:
    """mAP at a horizon cutoff plus per-bucket AP; mAP averages non-empty buckets."""
    if len(preds) == 0:
        raise ValueError("mean_ap: empty dataset")
    if not len(preds) == len(gts) == len(buckets):
        raise ValueError("mean_ap: predictions, ground truths and buckets are not aligned")
    pooled: dict[str, list[tuple[float, bool]]] = {}
    counts: dict[str, int] = {}
    for p, g, b in zip(preds, gts, buckets):
        pooled.setdefault(b, []).extend(_ranked_hits(p, g, horizon_cutoff, config.miss_threshold_m))
        counts[b] = counts.get(b, 0) + 1
    per_bucket = {b: average_precision(pooled[b], counts[b]) for b in _bucket_order(pooled)}
    return float(np.mean(list(per_bucket.values()))), per_bucket


def _bucket_order(keys) -> list[str]:
    known = [m for m in MANEUVERS if m in keys]
    return known + sorted(k for k in keys if k not in MANEUVERS)


# ----------------------------------------------------------------------
# selection


def nms_select(pred: PredictionSet, config: MetricConfig) -> PredictionSet:
    """Greedy endpoint NMS down to ``top_k`` modes, padded with the best rejected modes."""
    probs = pred.probabilities
    order = [int(i) for i in np.argsort(-probs, kind="stable")]
    endpoints = pred.means[:, -1]
    kept: list[int] = []
    rejected: list[int] = []
    for i in order:
        if len(kept) == config.top_k:
            break
        if all(np.linalg.norm(endpoints[i] - endpoints[j]) > config.nms_radius_m for j in kept):
            kept.append(i)
        else:
            rejected.append(i)
    if len(kept) < config.top_k:
        remaining = [i for i in order if i not in kept]
        kept.extend(remaining[: config.top_k - len(kept)])
    total = float(sum(probs[i] for i in kept))
    modes = []
    for i in kept:
        m = pred.modes[i]
        p = m.probability / total if total > 0 else 1.0 / len(kept)
        modes.append(m.replace(probability=min(max(p, 0.0), 1.0)))
    return PredictionSet(pred.scenario_id, tuple(modes))


def ensemble_merge(sets: Sequence[PredictionSet], config: MetricConfig) -> PredictionSet:
    """Pool all models' modes (probabilities scaled by 1/n) and select with NMS."""
    if not sets:
        raise ValueError("ensemble_merge: no prediction sets")
    ids = {s.scenario_id for s in sets}
    if len(ids) != 1:
        raise ValueError(f"ensemble_merge: mismatched scenario ids {sorted(ids)}")
    n = len(sets)
    modes = [m.replace(probability=m.probability / n) for s in sets for m in s.modes]
    return nms_select(PredictionSet(sets[0].scenario_id, tuple(modes)), config)


# ----------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    minADE: float
    minFDE: float
    MR: float
    mAP: float
    mAP_per_horizon: dict[str, float] = field(default_factory=dict)
    per_bucket_ap: dict[str, dict[str, float]] = field(default_factory=dict)
    scenario_count: int = 0

    def to_dict(self) -> dict:
        return {
            "minADE": self.minADE,
            "minFDE": self.minFDE,
            "MR": self.MR,
            "mAP": self.mAP,
            "mAP_per_horizon": dict(self.mAP_per_horizon),
            "per_bucket_ap": {k: dict(v) for k, v in self.per_bucket_ap.items()},
            "scenario_count": self.scenario_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def columns(self) -> list[tuple[str, float]]:
        cols = [("minADE", self.minADE), ("minFDE", self.minFDE), ("MR", self.MR), ("mAP", self.mAP)]
        cols += [(f"mAP({label})", v) for label, v in self.mAP_per_horizon.items()]
        return cols

    def to_table(self, name: str = "model") -> str:
        cols = self.columns()
        widths = [max(len(c), 8) for c, _ in cols]
        name_w = max(len(name), len("Model"))
        header = "Model".ljust(name_w) + " | " + " | ".join(c.rjust(w) for (c, _), w in zip(cols, widths))
        row = name.ljust(name_w) + " | " + " | ".join(f"{v:.4f}".rjust(w) for (_, v), w in zip(cols, widths))
        return "\n".join([header, "-" * len(header), row])


def align_predictions(scenarios: Sequence[Scenario], predictions: Sequence[PredictionSet]) -> list[PredictionSet]:
    by_id = {p.scenario_id: p for p in predictions}
    missing = [s.scenario_id for s in scenarios if s.scenario_id not in by_id]
    known = {s.scenario_id for s in scenarios}
    extra = [p.scenario_id for p in predictions if p.scenario_id not in known]
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"no predictions for {missing}")
        if extra:
            parts.append(f"predictions without scenarios {extra}")
        raise ValueError("orphaned scenario ids: " + "; ".join(parts))
    return [by_id[s.scenario_id] for s in scenarios]


def evaluate(
    scenarios: Sequence[Scenario], predictions: Sequence[PredictionSet], config: MetricConfig | None = None
) -> MetricReport:
    """NMS-select every prediction set, then compute all metrics."""
    config = config or MetricConfig()
    if not scenarios:
        raise ValueError("evaluate: empty dataset")
    preds = [nms_select(p, config) for p in align_predictions(scenarios, predictions)]
    gts = [s.ground_truth for s in scenarios]
    buckets = [scenario_bucket(s) for s in scenarios]
    horizon = scenarios[0].horizon
    ade = float(np.mean([min_ade(p, g) for p, g in zip(preds, gts)]))
    fde = float(np.mean([min_fde(p, g) for p, g in zip(preds, gts)]))
    mr = miss_rate(preds, gts, config)
    per_h: dict[str, float] = {}
    per_bucket: dict[str, dict[str, float]] = {}
    for cutoff in config.resolved_horizons(horizon):
        label = horizon_label(cutoff, horizon.step_period)
        per_h[label], per_bucket[label] = mean_ap(preds, gts, buckets, config, cutoff)
    return MetricReport(
        minADE=ade,
        minFDE=fde,
        MR=mr,
        mAP=float(np.mean(list(per_h.values()))),
        mAP_per_horizon=per_h,
        per_bucket_ap=per_bucket,
        scenario_count=len(scenarios),
    )
