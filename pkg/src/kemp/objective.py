"""Training losses: trajectory NLL on the closest mode, keyframe consistency, keyframe NLL."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .predictor import DecodedModes, keyframe_positions
from .scene import RHO_MAX, SIGMA_FLOOR, GaussianState, HorizonSpec

LOG_2PI = math.log(2.0 * math.pi)
LOG_SIGMA_FLOOR = math.log(SIGMA_FLOOR)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0  # consistency
    beta: float = 1.0  # keyframe NLL

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")

    def combine(self, l_traj, l_cons, l_key):
        return l_traj + self.alpha * l_cons + self.beta * l_key


@dataclass
class LossReport:
    l_traj: float
    l_cons: float
    l_key: float
    total: float
    selected_mode: np.ndarray  # (B,) closest-mode index per scenario
    graph: Tensor | None = field(default=None, repr=False)


def gaussian_nll(mu, sigma, target) -> Tensor:
    """Elementwise -log N(target | mu, Sigma) over leading dims.

    ``mu`` (..., 2) and ``sigma`` (..., 3) as ``(log_sx, log_sy, rho_raw)``;
    ``target`` is a constant array (..., 2).  A :class:`GaussianState` may be
    passed as ``mu`` with ``sigma=None``.
    """
    if isinstance(mu, GaussianState):
        state = mu
        mu = Tensor(np.array(state.mu))
        sigma = Tensor(np.array([state.log_sx, state.log_sy, state.rho_raw]))
    mu, sigma = ad.as_tensor(mu), ad.as_tensor(sigma)
    target = np.asarray(target, dtype=np.float64)
    log_sx = ad.clip(sigma[..., 0], LOG_SIGMA_FLOOR)
    log_sy = ad.clip(sigma[..., 1], LOG_SIGMA_FLOOR)
    rho = ad.tanh(sigma[..., 2]) * RHO_MAX
    dx = (ad.sub(target[..., 0], mu[..., 0])) * ad.exp(-log_sx)
    dy = (ad.sub(target[..., 1], mu[..., 1])) * ad.exp(-log_sy)
    one_minus = 1.0 - ad.square(rho)
    quad = (ad.square(dx) + ad.square(dy) - 2.0 * rho * dx * dy) / one_minus
    return LOG_2PI + log_sx + log_sy + 0.5 * ad.log(one_minus) + 0.5 * quad


def select_closest_mode(means: np.ndarray, gt: np.ndarray) -> np.ndarray | int:
    """Index of the mode with the smallest summed squared distance; ties -> lowest index.

    ``means`` is (N, T, 2) with ``gt`` (T, 2), or batched (B, N, T, 2) with (B, T, 2).
    """
    means = np.asarray(means, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if means.ndim == 3:
        return int(np.argmin(((means - gt[None]) ** 2).sum(axis=(-1, -2))))
    return np.argmin(((means - gt[:, None]) ** 2).sum(axis=(-1, -2)), axis=1)


def _pick(t: Tensor, r: np.ndarray) -> Tensor:
    """Row ``r[b]`` of every batch item: (B, N, ...) -> (B, ...)."""
    return t[np.arange(len(r)), r]


def l_traj(logits: Tensor, mu: Tensor, sigma: Tensor, gt: np.ndarray, r: np.ndarray) -> Tensor:
    """Per-scenario -log p_r - sum_i log N(gt_i | mode r), shape (B,)."""
    log_p = _pick(ad.log_softmax(logits, axis=-1), r)
    nll = gaussian_nll(_pick(mu, r), _pick(sigma, r), gt).sum(axis=-1)
    return nll - log_p


def l_cons(whole_mu: Tensor, keyframe_mu: Tensor, horizon: HorizonSpec) -> Tensor:
    """sum_j ||whole[j t] - keyframe_j||^2 over the last two axes' leading keyframe dim, shape (...)."""
    pos = keyframe_positions(horizon)
    diff = whole_mu[..., pos, :] - keyframe_mu
    return ad.square(diff).sum(axis=-1).sum(axis=-1)


def l_key(keyframe_mu: Tensor, keyframe_sigma: Tensor, gt: np.ndarray, horizon: HorizonSpec) -> Tensor:
    """Keyframe NLL against ground truth at steps j t, shape (...)."""
    pos = keyframe_positions(horizon)
    return gaussian_nll(keyframe_mu, keyframe_sigma, np.asarray(gt)[..., pos, :]).sum(axis=-1)


def total_loss(
    out: DecodedModes, gt: np.ndarray, weights: LossWeights, horizon: HorizonSpec, separable: bool
) -> LossReport:
    """Batch-mean L = L_traj + alpha L_cons + beta L_key.

    L_cons is structurally zero for interpolation models; both auxiliary
    terms vanish without keyframes.  Only the closest mode ``r`` receives
    regression gradients; all logits receive gradients through -log p_r.
    """
    gt = np.asarray(gt, dtype=np.float64)
    r = select_closest_mode(out.mu.data, gt)
    traj = l_traj(out.logits, out.mu, out.sigma, gt, r)
    B = len(r)
    zero = Tensor(np.zeros(B))
    cons = key = zero
    if horizon.keyframe_count > 0 and out.keyframe_mu is not None:
        kf_mu, kf_sigma = _pick(out.keyframe_mu, r), _pick(out.keyframe_sigma, r)
        key = l_key(kf_mu, kf_sigma, gt, horizon)
        if separable:
            cons = l_cons(_pick(out.mu, r), kf_mu, horizon)
    per_scenario = weights.combine(traj, cons, key)
    total = per_scenario.mean()
    return LossReport(
        l_traj=float(traj.data.mean()),
        l_cons=float(cons.data.mean()),
        l_key=float(key.data.mean()),
        total=float(total.data),
        selected_mode=r,
        graph=total,
    )
