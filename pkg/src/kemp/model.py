"""Encoder + predictor bundle and conversion of raw outputs to :class:`PredictionSet`."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import Batch, ContextEncoder, EncoderConfig, collate, extract_features
from .nn import Module
from .objective import LossReport, LossWeights, total_loss
from .predictor import DecodedModes, KempPredictor, PredictorConfig
from .scene import HorizonSpec, PredictedTrajectory, PredictionSet, Scenario


@dataclass(frozen=True)
class ModelConfig:
    horizon: HorizonSpec
    variant: str = "kemp-i-lstm"
    mode_count: int = 12
    embedding_dim: int = 128
    encoder_hidden: int = 64
    component_dim: int = 64
    hidden: int = 64
    lstm_hidden: int = 128
    query_dim: int = 16
    position_scale: float = 10.0
    road_radius: float = 50.0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            past_steps=self.horizon.past_steps,
            embedding_dim=self.embedding_dim,
            hidden=self.encoder_hidden,
            component_dim=self.component_dim,
            road_radius=self.road_radius,
        )

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(
            horizon=self.horizon,
            variant=self.variant,
            mode_count=self.mode_count,
            hidden=self.hidden,
            lstm_hidden=self.lstm_hidden,
            query_dim=self.query_dim,
            position_scale=self.position_scale,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        h = d.pop("horizon")
        d["horizon"] = {
            "past_steps": h["past_steps"],
            "future_steps": h["future_steps"],
            "step_period": h["step_period"],
            "keyframe_count": h["keyframe_count"],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["horizon"] = HorizonSpec(**d["horizon"])
        return cls(**d)


class KempModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([int(seed), 0x4B454D50])
        self.encoder = ContextEncoder(rng, config.encoder_config())
        self.predictor = KempPredictor(rng, config.predictor_config(), config.embedding_dim)

    def features(self, scenarios: Sequence[Scenario]):
        return [extract_features(s, self.config.road_radius) for s in scenarios]

    def forward(self, batch: Batch) -> DecodedModes:
        return self.predictor(self.encoder(batch))

    __call__ = forward

    def loss(self, batch: Batch, weights: LossWeights) -> LossReport:
        out = self.forward(batch)
        return total_loss(out, batch.ground_truth, weights, self.config.horizon, self.config.variant == "kemp-s")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def predict_batch(self, batch: Batch) -> list[PredictionSet]:
        return decoded_to_predictions(self.forward(batch), batch)

    def predict(self, scenarios: Sequence[Scenario], batch_size: int = 64) -> list[PredictionSet]:
        """Predictions for each scenario, in scenario coordinates."""
        feats = self.features(scenarios)
        out: list[PredictionSet] = []
        for i in range(0, len(feats), batch_size):
            out.extend(self.predict_batch(collate(feats[i : i + batch_size])))
        return out


def decoded_to_predictions(out: DecodedModes, batch: Batch) -> list[PredictionSet]:
    probs = ad.softmax(ad.Tensor(out.logits.data), axis=-1).data
    results = []
    for b, (sid, frame) in enumerate(zip(batch.scenario_ids, batch.frames)):
        modes = []
        for n in range(out.mu.shape[1]):
            kf_mu = np.zeros((0, 2))
            kf_sigma = np.zeros((0, 3))
            if out.keyframe_mu is not None:
                kf_mu = frame.to_world(out.keyframe_mu.data[b, n])
                kf_sigma = frame.sigma_to_world(out.keyframe_sigma.data[b, n])
            modes.append(
                PredictedTrajectory(
                    mu=frame.to_world(out.mu.data[b, n]),
                    sigma=frame.sigma_to_world(out.sigma.data[b, n]),
                    logit=float(out.logits.data[b, n]),
                    probability=float(probs[b, n]),
                    keyframe_mu=kf_mu,
                    keyframe_sigma=kf_sigma,
                )
            )
        results.append(PredictionSet(sid, tuple(modes)))
    return results


def predict(s: Scenario, model: KempModel) -> PredictionSet:
    return model.predict([s])[0]
