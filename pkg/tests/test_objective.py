import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kemp import autodiff as ad
from kemp.autodiff import Tensor
from kemp.model import KempModel, ModelConfig
from kemp.objective import LossWeights, gaussian_nll, l_cons, l_key, l_traj, select_closest_mode, total_loss
from kemp.predictor import DecodedModes
from kemp.scene import GaussianState, HorizonSpec

from _oracles import central_diff

LOG_2PI = math.log(2 * math.pi)


def reference_nll(mu, sigma, target):
    """Density written out from the 2x2 inverse and determinant."""
    sx, sy = max(math.exp(sigma[0]), 1e-3), max(math.exp(sigma[1]), 1e-3)
    r = 0.99 * math.tanh(sigma[2])
    cov = np.array([[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]])
    d = np.asarray(target) - np.asarray(mu)
    return LOG_2PI + 0.5 * math.log(np.linalg.det(cov)) + 0.5 * d @ np.linalg.solve(cov, d)


def test_nll_at_mean_with_identity():
    assert abs(gaussian_nll(GaussianState((1.5, -2.0)), None, [1.5, -2.0]).item() - LOG_2PI) < 1e-12


def test_nll_unit_offset():
    v = gaussian_nll(Tensor([0.0, 0.0]), Tensor([0.0, 0.0, 0.0]), [1.0, 0.0]).item()
    assert abs(v - (LOG_2PI + 0.5)) < 1e-12


@settings(max_examples=80, deadline=None)
@given(
    st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    st.tuples(st.floats(-3, 2), st.floats(-3, 2), st.floats(-3, 3)),
    st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
)
def test_nll_matches_reference_density(mu, sigma, target):
    v = gaussian_nll(Tensor(mu), Tensor(sigma), target).item()
    assert math.isclose(v, reference_nll(mu, sigma, target), rel_tol=1e-9, abs_tol=1e-9)


def test_nll_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    mu = Tensor(rng.normal(size=2), requires_grad=True)
    sigma = Tensor(rng.normal(size=3) * 0.5, requires_grad=True)
    target = rng.normal(size=2)
    gaussian_nll(mu, sigma, target).backward()
    for p in (mu, sigma):
        fd = central_diff(lambda: gaussian_nll(Tensor(mu.data), Tensor(sigma.data), target).item(), p.data)
        assert np.max(np.abs(p.grad - fd) / (np.abs(fd) + 1e-8)) < 1e-6


def test_nll_optimal_sigma_equals_error():
    e = 2.5
    grid = np.linspace(-1.0, 3.0, 40001)
    values = [gaussian_nll(Tensor([0.0, 0.0]), Tensor([g, 0.0, 0.0]), [e, 0.0]).item() for g in grid[::10]]
    best = math.exp(grid[::10][int(np.argmin(values))])
    assert abs(best - e) < 2e-3
    big = gaussian_nll(Tensor([0.0, 0.0]), Tensor([40.0, 40.0, 0.0]), [e, 0.0]).item()
    assert big > 70


def test_select_closest_mode():
    gt = np.random.default_rng(0).normal(size=(6, 2))
    assert select_closest_mode(gt[None] + 1.0, gt) == 0
    assert select_closest_mode(np.stack([gt + 0.1, gt]), gt) == 1
    assert select_closest_mode(np.stack([gt + 1.0, gt - 1.0]), gt) == 0  # tie -> lowest index


def test_select_closest_mode_matches_exhaustive_search():
    rng = np.random.default_rng(9)
    for _ in range(20):
        modes, gt = rng.normal(size=(5, 7, 2)), rng.normal(size=(7, 2))
        costs = [sum((modes[n, i, 0] - gt[i, 0]) ** 2 + (modes[n, i, 1] - gt[i, 1]) ** 2 for i in range(7))
                 for n in range(5)]
        assert select_closest_mode(modes, gt) == min(range(5), key=lambda n: (costs[n], n))
    batched = rng.normal(size=(3, 5, 7, 2)), rng.normal(size=(3, 7, 2))
    np.testing.assert_array_equal(select_closest_mode(*batched),
                                  [select_closest_mode(batched[0][b], batched[1][b]) for b in range(3)])


def _decoded(B=1, N=1, T=4, k=0, seed=0, logits=None, perfect_gt=None):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=(B, N, T, 2))
    if perfect_gt is not None:
        mu[:, 0] = perfect_gt
    sigma = np.zeros((B, N, T, 3))
    kf_mu = kf_sigma = None
    if k:
        pos = np.arange(1, k + 1) * (T // k) - 1
        kf_mu = Tensor(mu[:, :, pos].copy())
        kf_sigma = Tensor(np.zeros((B, N, k, 3)))
    lg = Tensor(np.zeros((B, N)) if logits is None else np.asarray(logits, dtype=float))
    return DecodedModes(Tensor(mu), Tensor(sigma), kf_mu, kf_sigma, lg)


def test_l_traj_single_perfect_mode():
    gt = np.random.default_rng(1).normal(size=(1, 6, 2))
    out = _decoded(T=6, perfect_gt=gt[0])
    v = l_traj(out.logits, out.mu, out.sigma, gt, np.array([0])).data[0]
    assert abs(v - 6 * LOG_2PI) < 1e-12


def test_l_traj_reference_value():
    rng = np.random.default_rng(4)
    mu, sigma = rng.normal(size=(1, 3, 5, 2)), rng.normal(size=(1, 3, 5, 3)) * 0.3
    logits, gt = rng.normal(size=(1, 3)), rng.normal(size=(1, 5, 2))
    r = int(select_closest_mode(mu[0], gt[0]))
    log_p = logits[0, r] - math.log(sum(math.exp(x) for x in logits[0]))
    expected = -log_p + sum(reference_nll(mu[0, r, i], sigma[0, r, i], gt[0, i]) for i in range(5))
    got = l_traj(Tensor(logits), Tensor(mu), Tensor(sigma), gt, np.array([r])).data[0]
    assert abs(got - expected) < 1e-10


def test_non_selected_logit_only_moves_the_normalizer():
    gt = np.zeros((1, 4, 2))
    out = _decoded(N=3, T=4, perfect_gt=gt[0], logits=[[0.3, 0.2, -0.4]])
    r = np.array([0])
    base = l_traj(out.logits, out.mu, out.sigma, gt, r).data[0]
    bumped = Tensor(out.logits.data * np.array([[1.0, 2.0, 1.0]]))
    moved = l_traj(bumped, out.mu, out.sigma, gt, r).data[0]
    lp = lambda lg: ad.log_softmax(Tensor(lg), axis=-1).data[0, 0]
    assert abs((moved - base) - (lp(out.logits.data) - lp(bumped.data))) < 1e-12


def test_l_traj_invariant_to_permuting_other_modes():
    rng = np.random.default_rng(6)
    mu, sigma, logits = rng.normal(size=(1, 4, 5, 2)), rng.normal(size=(1, 4, 5, 3)) * 0.2, rng.normal(size=(1, 4))
    gt = mu[0, 0][None] + 0.01
    base = l_traj(Tensor(logits), Tensor(mu), Tensor(sigma), gt, select_closest_mode(mu, gt)).data[0]
    for perm in itertools.permutations([1, 2, 3]):
        order = [0, *perm]
        pm, ps, pl = mu[:, order], sigma[:, order], logits[:, order]
        v = l_traj(Tensor(pl), Tensor(pm), Tensor(ps), gt, select_closest_mode(pm, gt)).data[0]
        assert abs(v - base) < 1e-12


def test_l_cons_values():
    h = HorizonSpec(3, 8, 0.1, 2)
    whole = np.zeros((8, 2))
    kf = np.zeros((2, 2))
    assert l_cons(Tensor(whole), Tensor(kf), h).item() == 0.0
    kf[1] = [3.0, 4.0]
    assert l_cons(Tensor(whole), Tensor(kf), h).item() == 25.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_l_cons_non_negative(seed):
    rng = np.random.default_rng(seed)
    h = HorizonSpec(3, 12, 0.1, 3)
    assert l_cons(Tensor(rng.normal(size=(12, 2))), Tensor(rng.normal(size=(3, 2))), h).item() >= 0.0


def test_l_key_perfect_keyframes():
    h = HorizonSpec(3, 8, 0.1, 4)
    gt = np.random.default_rng(2).normal(size=(8, 2))
    v = l_key(Tensor(gt[[1, 3, 5, 7]]), Tensor(np.zeros((4, 3))), gt, h).item()
    assert abs(v - 4 * LOG_2PI) < 1e-12


def test_total_loss_arithmetic():
    assert LossWeights().combine(1.0, 0.5, 2.0) == 8.0
    h = HorizonSpec(3, 8, 0.1, 2)
    rng = np.random.default_rng(3)
    out = _decoded(B=4, N=3, T=8, k=2, seed=3, logits=rng.normal(size=(4, 3)))
    out.keyframe_mu = Tensor(out.keyframe_mu.data + rng.normal(size=out.keyframe_mu.shape))
    gt = rng.normal(size=(4, 8, 2))
    for w in (LossWeights(), LossWeights(0.0, 0.0), LossWeights(2.5, 0.3)):
        rep = total_loss(out, gt, w, h, separable=True)
        assert abs(rep.total - (rep.l_traj + w.alpha * rep.l_cons + w.beta * rep.l_key)) < 1e-10
        assert rep.l_cons > 0
        assert all(0 <= r < 3 for r in rep.selected_mode)
    assert total_loss(out, gt, LossWeights(0.0, 0.0), h, True).total == total_loss(out, gt, LossWeights(), h, True).l_traj


def test_interpolation_and_baseline_auxiliary_terms():
    h = HorizonSpec(3, 8, 0.1, 2)
    gt = np.zeros((2, 8, 2))
    out = _decoded(B=2, N=2, T=8, k=2)
    rep = total_loss(out, gt, LossWeights(), h, separable=False)
    assert rep.l_cons == 0.0 and rep.l_key > 0
    base = _decoded(B=2, N=2, T=8, k=0)
    rep = total_loss(base, gt, LossWeights(), h.with_keyframes(0), separable=False)
    assert rep.l_cons == 0.0 and rep.l_key == 0.0 and rep.total == rep.l_traj


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


def test_separable_model_total_loss_gradients():
    from dataclasses import replace

    from kemp.encoder import collate
    from kemp.synth import GeneratorConfig, generate

    from _oracles import model_gradcheck

    h = HorizonSpec(11, 8, 0.1, 2)
    world = generate(replace(GeneratorConfig(seed=5, scenario_count=2), horizon=h))
    cfg = ModelConfig(h, variant="kemp-s", mode_count=2, embedding_dim=8, encoder_hidden=8, component_dim=8,
                      hidden=8, lstm_hidden=8, query_dim=4)
    model = KempModel(cfg)
    batch = collate(model.features(world))
    errors = model_gradcheck(model, batch, LossWeights())
    assert max(errors.values()) < 1e-4, max(errors.items(), key=lambda kv: kv[1])
