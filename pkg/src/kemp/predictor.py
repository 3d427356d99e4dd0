"""Keyframe-based hierarchical trajectory decoder.

Every mode ``n`` is seeded by a learned query vector concatenated to the
context embedding.  Depending on the variant:

* ``kemp-i-mlp`` / ``kemp-i-lstm``: a one-shot MLP or autoregressive LSTM
  predicts ``k`` keyframes; a shared per-segment MLP fills the ``t - 1``
  states between consecutive keyframes (the first segment is anchored at
  the frame origin).  Keyframes are inserted verbatim.
* ``kemp-s``: an LSTM re-predicts all ``T`` states, steered at each step by
  the displacement to the active segment's keyframe.
* ``baseline-mlp`` / ``baseline-lstm``: no keyframes (``k = 0``).

Gaussian states are 5 raw numbers per step: ``(mu_x, mu_y, log_sx, log_sy,
rho_raw)``.  Means are in the target-centric frame, meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Linear, LSTMCell, Module, init_uniform
from .scene import HorizonSpec, keyframe_indices

VARIANTS = ("kemp-i-mlp", "kemp-i-lstm", "kemp-s", "baseline-mlp", "baseline-lstm")
KEYFRAME_HEADS = {
    "kemp-i-mlp": "one_shot_mlp",
    "kemp-i-lstm": "autoregressive_lstm",
    "kemp-s": "autoregressive_lstm",
}


@dataclass(frozen=True)
class PredictorConfig:
    horizon: HorizonSpec
    variant: str = "kemp-i-lstm"
    mode_count: int = 12
    hidden: int = 64
    lstm_hidden: int = 128
    query_dim: int = 16
    position_scale: float = 10.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.mode_count < 1:
            raise ValueError("mode_count must be >= 1")
        k = self.horizon.keyframe_count
        if self.variant.startswith("baseline") and k != 0:
            raise ValueError(f"{self.variant} requires keyframe_count 0, got {k}")
        if not self.variant.startswith("baseline") and k == 0:
            raise ValueError(f"{self.variant} requires keyframe_count >= 1")

    @property
    def keyframe_count(self) -> int:
        return self.horizon.keyframe_count

    @property
    def keyframe_head(self) -> str | None:
        return KEYFRAME_HEADS.get(self.variant)

    @property
    def is_interpolation(self) -> bool:
        return self.variant in ("kemp-i-mlp", "kemp-i-lstm")

    @property
    def step_scale(self) -> float:
        """Per-step displacement scale for recurrent decoders (meters)."""
        return self.position_scale * self.horizon.step_period


@dataclass
class DecodedModes:
    """Raw decoder output for a batch, all in the target frame."""

    mu: Tensor  # (B, N, T, 2)
    sigma: Tensor  # (B, N, T, 3)
    keyframe_mu: Tensor | None  # (B, N, k, 2)
    keyframe_sigma: Tensor | None  # (B, N, k, 3)
    logits: Tensor  # (B, N)


def separable_subgoal_index(step: int, segment_length: int) -> int:
    """1-based keyframe steering step ``step`` (1-based): the upcoming keyframe of its segment."""
    return -(-step // segment_length)


class KempPredictor(Module):
    def __init__(self, rng: np.random.Generator, config: PredictorConfig, context_dim: int):
        self.config = config
        self.context_dim = context_dim
        cfg = config
        T, k, H, L = cfg.horizon.future_steps, cfg.keyframe_count, cfg.hidden, cfg.lstm_hidden
        z_dim = context_dim + cfg.query_dim
        self.mode_queries = init_uniform(rng, (cfg.mode_count, cfg.query_dim), 1)

        head = cfg.keyframe_head
        if head == "one_shot_mlp":
            self.keyframe_mlp = MLP(rng, [z_dim, H, H, k * 5])
        elif head == "autoregressive_lstm":
            self.keyframe_init = Linear(rng, z_dim, L)
            self.keyframe_cell = LSTMCell(rng, z_dim, 2, L)
            self.keyframe_out = Linear(rng, L, 5)

        if cfg.is_interpolation:
            t = cfg.horizon.segment_length
            if t > 1:
                self.segment_mlp = MLP(rng, [context_dim + 4, H, H, (t - 1) * 5])
        elif cfg.variant == "kemp-s":
            self.whole_init = Linear(rng, z_dim, L)
            self.whole_cell = LSTMCell(rng, context_dim, 4, L)
            self.whole_out = Linear(rng, L, 5)
        elif cfg.variant == "baseline-mlp":
            self.baseline_mlp = MLP(rng, [z_dim, H, H, T * 5])
        elif cfg.variant == "baseline-lstm":
            self.whole_init = Linear(rng, z_dim, L)
            self.whole_cell = LSTMCell(rng, context_dim, 2, L)
            self.whole_out = Linear(rng, L, 5)

        self.likelihood_mlp = MLP(rng, [context_dim + 2 * T, H, 1])

    # ------------------------------------------------------------------
    def _rows(self, c: Tensor) -> tuple[Tensor, Tensor]:
        """Per-(scenario, mode) context rows and [context; query] rows, each (B*N, .)."""
        B, N = c.shape[0], self.config.mode_count
        c_rows = ad.repeat(c, N, axis=1).reshape(B * N, self.context_dim)
        q_rows = ad.repeat(self.mode_queries, B, axis=0).reshape(B * N, self.config.query_dim)
        return c_rows, ad.concat([c_rows, q_rows], axis=-1)

    def predict_keyframes(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Keyframe means (R, k, 2) and raw sigmas (R, k, 3) from [context; query] rows."""
        cfg = self.config
        k = cfg.keyframe_count
        if k == 0:
            raise ValueError("predict_keyframes requires keyframe_count >= 1")
        R = z.shape[0]
        scale = cfg.position_scale
        if cfg.keyframe_head == "one_shot_mlp":
            out = self.keyframe_mlp(z).reshape(R, k, 5)
            return out[..., :2] * scale, out[..., 2:]
        h = ad.tanh(self.keyframe_init(z))
        state = (h, Tensor(np.zeros(h.shape)))
        prev = Tensor(np.zeros((R, 2)))
        static = self.keyframe_cell.project_static(z)
        mus, sigmas = [], []
        for _ in range(k):
            state = self.keyframe_cell(prev * (1.0 / scale), state, static)
            out = self.keyframe_out(state[0])
            prev = prev + out[:, :2] * scale
            mus.append(prev)
            sigmas.append(out[:, 2:])
        return ad.stack(mus, axis=1), ad.stack(sigmas, axis=1)

    def decode_segments(self, c_rows: Tensor, kf_mu: Tensor, kf_sigma: Tensor) -> tuple[Tensor, Tensor]:
        """Interpolation model: fill each segment and splice keyframes in at indices i*t."""
        cfg = self.config
        R, k = kf_mu.shape[0], cfg.keyframe_count
        t = cfg.horizon.segment_length
        T = cfg.horizon.future_steps
        if t == 1:
            return kf_mu, kf_sigma
        scale = cfg.position_scale
        prev = ad.concat([Tensor(np.zeros((R, 1, 2))), kf_mu[:, :-1]], axis=1)
        inputs = ad.concat([ad.repeat(c_rows, k, axis=1), prev * (1.0 / scale), kf_mu * (1.0 / scale)], axis=-1)
        out = self.segment_mlp(inputs).reshape(R, k, t - 1, 5)
        frac = np.repeat((np.arange(1, t, dtype=np.float64) / t)[:, None], 2, axis=1)
        base = ad.repeat(prev, t - 1, axis=2) + ad.repeat(kf_mu - prev, t - 1, axis=2) * frac
        seg_mu = base + out[..., :2] * scale
        mu = ad.concat([seg_mu, kf_mu.reshape(R, k, 1, 2)], axis=2).reshape(R, T, 2)
        sigma = ad.concat([out[..., 2:], kf_sigma.reshape(R, k, 1, 3)], axis=2).reshape(R, T, 3)
        return mu, sigma

    def _recurrent_decode(self, c_rows: Tensor, z: Tensor, kf_mu: Tensor | None) -> tuple[Tensor, Tensor]:
        cfg = self.config
        R = z.shape[0]
        T = cfg.horizon.future_steps
        inv = 1.0 / cfg.position_scale
        h = ad.tanh(self.whole_init(z))
        state = (h, Tensor(np.zeros(h.shape)))
        prev = Tensor(np.zeros((R, 2)))
        t = cfg.horizon.segment_length if kf_mu is not None else 0
        static = self.whole_cell.project_static(c_rows)
        mus, sigmas = [], []
        for step in range(1, T + 1):
            parts = [prev * inv]
            if kf_mu is not None:
                j = separable_subgoal_index(step, t)
                parts.append((kf_mu[:, j - 1] - prev) * inv)
            state = self.whole_cell(ad.concat(parts, axis=-1), state, static)
            out = self.whole_out(state[0])
            prev = prev + out[:, :2] * cfg.step_scale
            mus.append(prev)
            sigmas.append(out[:, 2:])
        return ad.stack(mus, axis=1), ad.stack(sigmas, axis=1)

    def decode_separable(self, c_rows: Tensor, z: Tensor, kf_mu: Tensor) -> tuple[Tensor, Tensor]:
        return self._recurrent_decode(c_rows, z, kf_mu)

    def decode_baseline(self, c_rows: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.config
        if cfg.variant == "baseline-lstm":
            return self._recurrent_decode(c_rows, z, None)
        T = cfg.horizon.future_steps
        out = self.baseline_mlp(z).reshape(z.shape[0], T, 5)
        return out[..., :2] * cfg.position_scale, out[..., 2:]

    def likelihood_head(self, c_rows: Tensor, mu: Tensor) -> Tensor:
        """Mode logits f(mode | c) from the context and the flattened mean sequence."""
        R = mu.shape[0]
        summary = mu.reshape(R, -1) * (1.0 / self.config.position_scale)
        return self.likelihood_mlp(ad.concat([c_rows, summary], axis=-1)).reshape(R)

    def __call__(self, c: Tensor) -> DecodedModes:
        cfg = self.config
        B, N = c.shape[0], cfg.mode_count
        T, k = cfg.horizon.future_steps, cfg.keyframe_count
        c_rows, z = self._rows(c)
        kf_mu = kf_sigma = None
        if k == 0:
            mu, sigma = self.decode_baseline(c_rows, z)
        else:
            kf_mu, kf_sigma = self.predict_keyframes(z)
            if cfg.is_interpolation:
                mu, sigma = self.decode_segments(c_rows, kf_mu, kf_sigma)
            else:
                mu, sigma = self.decode_separable(c_rows, z, kf_mu)
        logits = self.likelihood_head(c_rows, mu).reshape(B, N)
        return DecodedModes(
            mu=mu.reshape(B, N, T, 2),
            sigma=sigma.reshape(B, N, T, 3),
            keyframe_mu=None if kf_mu is None else kf_mu.reshape(B, N, k, 2),
            keyframe_sigma=None if kf_sigma is None else kf_sigma.reshape(B, N, k, 3),
            logits=logits,
        )


def keyframe_positions(horizon: HorizonSpec) -> np.ndarray:
    """0-based positions of keyframes inside a T-step array."""
    return np.asarray(keyframe_indices(horizon)) - 1
