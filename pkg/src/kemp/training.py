"""Adam training loop with step-decayed learning rate, checkpoints and ensembles.

Batch composition is a pure function of ``(seed, step)``: each epoch draws a
fresh permutation from ``default_rng([seed, epoch])``.  Together with the Adam
moments stored in a checkpoint this makes resuming bit-exact.
"""

from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import collate
from .model import KempModel, ModelConfig
from .objective import LossWeights
from .scene import Scenario, write_jsonl

CHECKPOINT_FORMAT = "kemp_ckpt_v1"
LOG_HEADER = "step,lr,l_traj,l_cons,l_key,total"
_SHUFFLE_TAG = 0x5348554646  # keeps the data stream apart from model init


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 64
    steps: int = 1000
    base_lr: float = 3e-4
    decay_factor: float = 0.5
    decay_every_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = 10.0
    ensemble_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.base_lr <= 0 or not 0 < self.decay_factor <= 1 or self.decay_every_steps < 1:
            raise ValueError("learning-rate schedule must stay positive")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive or None")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {"alpha": self.weights.alpha, "beta": self.weights.beta}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """``base_lr * decay_factor ** floor(step / decay_every_steps)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.base_lr * config.decay_factor ** (step // config.decay_every_steps)


# ----------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns:
        The (possibly rescaled) gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update with optional global-norm clipping.

    Inputs are not modified.

    Raises:
        FloatingPointError: a gradient contains NaN or inf; the message names
            the parameter.
        ValueError: a gradient's shape differs from its parameter's.
    """
    if state.step < 0:
        raise ValueError("optimizer step counter must be >= 0")
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    grads, _ = clip_gradients({k: np.asarray(grads[k], dtype=np.float64) for k in params}, clip_norm)
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


# ----------------------------------------------------------------------
# data order


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Dataset indices used at ``step``; a fresh permutation every epoch."""
    if n < 1:
        raise ValueError("dataset is empty")
    per_epoch = -(-n // batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([int(seed), _SHUFFLE_TAG, epoch]).permutation(n)
    return perm[pos * batch_size : (pos + 1) * batch_size]


# ----------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    step: int  # number of completed optimizer steps
    params: dict[str, np.ndarray]
    adam: AdamState
    format: str = CHECKPOINT_FORMAT

    def model(self) -> KempModel:
        m = KempModel(self.model_config, seed=self.train_config.seed)
        m.load_state_dict(self.params)
        return m

    def to_json(self) -> str:
        def pack(tensors: Mapping[str, np.ndarray]) -> dict:
            return {
                name: {
                    "shape": list(a.shape),
                    "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
                }
                for name, a in tensors.items()
            }

        doc = {
            "format": self.format,
            "step": self.step,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "rng": {"kind": "stateless_epoch_permutation", "seed": self.train_config.seed, "next_step": self.step},
            "adam_step": self.adam.step,
            "params": pack(self.params),
            "adam_m": pack(self.adam.m),
            "adam_v": pack(self.adam.v),
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")

        def unpack(d: Mapping) -> dict[str, np.ndarray]:
            out = {}
            for name, entry in d.items():
                flat = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
                out[name] = flat.reshape(entry["shape"]).astype(np.float64)
            return out

        return cls(
            model_config=ModelConfig.from_dict(doc["model_config"]),
            train_config=TrainConfig.from_dict(doc["train_config"]),
            step=int(doc["step"]),
            params=unpack(doc["params"]),
            adam=AdamState(step=int(doc["adam_step"]), m=unpack(doc["adam_m"]), v=unpack(doc["adam_v"])),
        )


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(path, [ckpt.to_json()])
    return path


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_json(Path(path).read_text())


# ----------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good_path: Path | None):
        hint = f"; last good checkpoint: {last_good_path}" if last_good_path else ""
        super().__init__(message + hint)
        self.last_good_path = last_good_path


@dataclass
class LogRow:
    step: int
    lr: float
    l_traj: float
    l_cons: float
    l_key: float
    total: float

    def to_csv(self) -> str:
        return f"{self.step},{self.lr!r},{self.l_traj!r},{self.l_cons!r},{self.l_key!r},{self.total!r}"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[LogRow]
    checkpoint_paths: list[Path]

    def model(self) -> KempModel:
        return self.checkpoint.model()


def _read_log_prefix(path: Path, before_step: int) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text().splitlines()[1:]
    return [ln for ln in lines if ln and int(ln.split(",", 1)[0]) < before_step]


def train(
    scenarios: Sequence[Scenario],
    model_config: ModelConfig,
    config: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    resume: Checkpoint | str | os.PathLike | None = None,
    stop_after: int | None = None,
    progress=None,
) -> TrainResult:
    """Train one model from scratch or from ``resume``.

    Args:
        scenarios: training set; the model's horizon must match.
        model_config: architecture; its horizon must equal the scenarios'.
        config: optimizer and schedule settings.
        log_path: CSV file receiving one row per step.  On resume, rows at
            or after the resume step are discarded first.
        checkpoint_dir: directory for ``step_XXXXXXX.json`` snapshots.
        checkpoint_every: snapshot period in steps (0 disables periodic ones).
        resume: checkpoint (or its path) to continue from.
        stop_after: halt after this many completed steps, for a split run.
        progress: optional callback ``f(row)`` per step.

    Raises:
        TrainingDiverged: the loss or a gradient became non-finite.  The
            state before the failing step is written to ``checkpoint_dir``
            when one is given, and its path is attached.
    """
    if not scenarios:
        raise ValueError("training set is empty")
    for s in scenarios:
        if (s.horizon.past_steps, s.horizon.future_steps) != (
            model_config.horizon.past_steps,
            model_config.horizon.future_steps,
        ):
            raise ValueError(f"scenario {s.scenario_id} horizon does not match the model config")

    if isinstance(resume, (str, os.PathLike)):
        resume = load_checkpoint(resume)
    model = KempModel(model_config, seed=config.seed)
    adam = AdamState()
    start = 0
    if resume is not None:
        if resume.model_config != model_config or resume.train_config != config:
            raise ValueError("resume checkpoint was written with a different configuration")
        model.load_state_dict(resume.params)
        adam = AdamState(resume.adam.step, {k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()})
        start = resume.step

    end = config.steps if stop_after is None else min(config.steps, stop_after)
    feats = model.features(scenarios)
    named = dict(model.named_parameters())
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    paths: list[Path] = []

    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        kept = _read_log_prefix(log_path, start) if resume is not None else []
        log_file = open(log_path, "w")
        log_file.write(LOG_HEADER + "\n")
        for ln in kept:
            log_file.write(ln + "\n")

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(model_config, config, step, model.state_dict(),
                          AdamState(adam.step, {k: v.copy() for k, v in adam.m.items()},
                                    {k: v.copy() for k, v in adam.v.items()}))

    rows: list[LogRow] = []
    try:
        for step in range(start, end):
            idx = batch_indices(len(feats), config.batch_size, config.seed, step)
            batch = collate([feats[i] for i in idx])
            lr = lr_schedule(step, config)
            model.zero_grad()
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                report = model.loss(batch, config.weights)
                if not math.isfinite(report.total):
                    raise FloatingPointError(f"non-finite loss {report.total} at step {step}")
                report.graph.backward()
            row = LogRow(step, lr, report.l_traj, report.l_cons, report.l_key, report.total)
            params = {k: p.data for k, p in named.items()}
            grads = {k: p.grad for k, p in named.items()}
            new_params, adam = adam_step(params, grads, adam, lr, config.beta1, config.beta2,
                                         config.eps, config.grad_clip_norm)
            for k, p in named.items():
                p.data = new_params[k]
            rows.append(row)
            if log_file is not None:
                log_file.write(row.to_csv() + "\n")
            if progress is not None:
                progress(row)
            done = step + 1
            if ckpt_dir is not None and checkpoint_every and done % checkpoint_every == 0 and done < end:
                paths.append(save_checkpoint(ckpt_dir / f"step_{done:07d}.json", snapshot(done)))
    except FloatingPointError as exc:
        last_good = None
        if ckpt_dir is not None:
            last_good = save_checkpoint(ckpt_dir / f"last_good_{step:07d}.json", snapshot(step))
        raise TrainingDiverged(f"training diverged at step {step}: {exc}", last_good) from exc
    finally:
        if log_file is not None:
            log_file.close()

    final = snapshot(end)
    if ckpt_dir is not None:
        paths.append(save_checkpoint(ckpt_dir / f"step_{end:07d}.json", final))
    return TrainResult(final, rows, paths)


def member_seed(seed: int, i: int) -> int:
    return seed + i


def train_ensemble(
    scenarios: Sequence[Scenario],
    model_config: ModelConfig,
    config: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    **kwargs,
) -> list[TrainResult]:
    """``config.ensemble_size`` independent runs with seeds ``seed + i`` on the same data."""
    n = config.ensemble_size
    results = []
    for i in range(n):
        member = replace(config, seed=member_seed(config.seed, i))
        lp, cd = log_path, checkpoint_dir
        if n > 1:
            lp = None if log_path is None else Path(f"{log_path}.member{i}")
            cd = None if checkpoint_dir is None else Path(checkpoint_dir) / f"member{i}"
        results.append(train(scenarios, model_config, member, log_path=lp, checkpoint_dir=cd, **kwargs))
    return results
