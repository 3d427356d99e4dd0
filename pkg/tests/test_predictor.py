import numpy as np
import pytest

from kemp import autodiff as ad
from kemp.autodiff import Tensor
from kemp.encoder import collate, transform_scenario
from kemp.model import KempModel, ModelConfig
from kemp.predictor import KempPredictor, PredictorConfig, keyframe_positions, separable_subgoal_index
from kemp.scene import HorizonSpec, sigma_params_to_cov
from kemp.synth import GeneratorConfig, generate

CTX = 12


def predictor(variant, T=8, k=2, N=3, seed=0, **kw):
    cfg = PredictorConfig(HorizonSpec(3, T, 0.1, k), variant, mode_count=N, hidden=10, lstm_hidden=9, query_dim=4, **kw)
    return KempPredictor(np.random.default_rng(seed), cfg, CTX)


def context(B=2, seed=1):
    return Tensor(np.random.default_rng(seed).normal(size=(B, CTX)))


@pytest.mark.parametrize("variant", ["kemp-i-mlp", "kemp-i-lstm", "kemp-s"])
def test_keyframe_output_shapes_and_spd(variant):
    out = predictor(variant)(context())
    assert out.keyframe_mu.shape == (2, 3, 2, 2) and out.keyframe_sigma.shape == (2, 3, 2, 3)
    assert out.mu.shape == (2, 3, 8, 2) and out.sigma.shape == (2, 3, 8, 3)
    np.linalg.cholesky(sigma_params_to_cov(out.keyframe_sigma.data))
    np.linalg.cholesky(sigma_params_to_cov(out.sigma.data))


def test_single_keyframe_is_the_goal():
    p = predictor("kemp-i-lstm", T=8, k=1)
    out = p(context())
    assert list(keyframe_positions(p.config.horizon)) == [7]
    np.testing.assert_array_equal(out.mu.data[:, :, 7], out.keyframe_mu.data[:, :, 0])


def test_autoregressive_head_feeds_back_previous_keyframe():
    p = predictor("kemp-i-lstm", k=2)
    z = ad.concat([context(3).reshape(3, CTX), Tensor(np.zeros((3, 4)))], axis=-1)
    mu0 = p.predict_keyframes(z)[0].data
    p.keyframe_cell.weight.data[:2] = 0.0  # cut the displacement feedback path
    mu1 = p.predict_keyframes(z)[0].data
    np.testing.assert_array_equal(mu0[:, 0], mu1[:, 0])
    assert np.max(np.abs(mu0[:, 1] - mu1[:, 1])) > 0


def test_one_shot_head_keyframes_are_independent_outputs():
    p = predictor("kemp-i-mlp", k=2)
    z = Tensor(np.random.default_rng(2).normal(size=(3, CTX + 4)))
    mu0 = p.predict_keyframes(z)[0].data
    last = p.keyframe_mlp.layers[-1]
    last.weight.data[:, :5] += 0.3  # keyframe-1 output parameters
    last.bias.data[:5] += 0.3
    mu1 = p.predict_keyframes(z)[0].data
    assert np.max(np.abs(mu0[:, 0] - mu1[:, 0])) > 0
    np.testing.assert_array_equal(mu0[:, 1], mu1[:, 1])


def test_predict_keyframes_requires_keyframes():
    p = predictor("baseline-mlp", k=0)
    with pytest.raises(ValueError):
        p.predict_keyframes(Tensor(np.zeros((1, CTX + 4))))


@pytest.mark.parametrize("variant", ["kemp-i-mlp", "kemp-i-lstm"])
@pytest.mark.parametrize("T,k", [(8, 2), (8, 8), (12, 3), (8, 1)])
def test_interpolation_containment_bit_exact(variant, T, k):
    out = predictor(variant, T=T, k=k)(context())
    pos = keyframe_positions(HorizonSpec(3, T, 0.1, k))
    assert out.mu.shape[2] == T
    np.testing.assert_array_equal(out.mu.data[:, :, pos], out.keyframe_mu.data)
    np.testing.assert_array_equal(out.sigma.data[:, :, pos], out.keyframe_sigma.data)


def test_unit_segments_have_no_intermediate_states():
    p = predictor("kemp-i-mlp", T=4, k=4)
    assert not hasattr(p, "segment_mlp")
    out = p(context())
    np.testing.assert_array_equal(out.mu.data, out.keyframe_mu.data)


def test_first_segment_anchored_at_origin():
    # with zero segment offsets, the first segment is a straight line from the origin to keyframe 1
    p = predictor("kemp-i-mlp", T=8, k=2)
    last = p.segment_mlp.layers[-1]
    last.weight.data[:] = 0.0
    last.bias.data[:] = 0.0
    out = p(context())
    kf = out.keyframe_mu.data[:, :, 0]
    for i in range(3):
        np.testing.assert_allclose(out.mu.data[:, :, i], kf * (i + 1) / 4, rtol=1e-12, atol=1e-12)


def test_separable_subgoal_rule():
    t = 20
    assert separable_subgoal_index(1, t) == 1
    assert separable_subgoal_index(20, t) == 1  # a keyframe step still steers toward its own keyframe
    assert separable_subgoal_index(21, t) == 2  # then the next subgoal takes over
    assert separable_subgoal_index(80, t) == 4


def test_separable_repredicts_keyframes():
    out = predictor("kemp-s", T=8, k=2)(context())
    pos = keyframe_positions(HorizonSpec(3, 8, 0.1, 2))
    assert out.mu.shape[2] == 8
    assert not np.array_equal(out.mu.data[:, :, pos], out.keyframe_mu.data)


@pytest.mark.parametrize("variant", ["baseline-mlp", "baseline-lstm"])
def test_baseline_has_no_keyframes(variant):
    out = predictor(variant, k=0)(context())
    assert out.mu.shape == (2, 3, 8, 2) and out.keyframe_mu is None


def _count(variant, k, N=6):
    h = HorizonSpec(11, 80, 0.1, k)
    return KempModel(ModelConfig(horizon=h, variant=variant, mode_count=N)).parameter_count()


def test_baselines_smaller_than_keyframe_models_at_same_widths():
    assert _count("baseline-lstm", 0) < _count("kemp-s", 4)
    assert _count("baseline-mlp", 0) < _count("kemp-i-lstm", 4)


def test_identical_summaries_give_equal_probabilities():
    p = predictor("kemp-i-mlp", N=2)
    p.mode_queries.data[1] = p.mode_queries.data[0]
    probs = ad.softmax(p(context()).logits, axis=-1).data
    np.testing.assert_array_equal(probs, 0.5)


def test_likelihood_head_gradient_matches_finite_differences():
    from _oracles import central_diff

    p = predictor("kemp-i-lstm", N=3)
    c = context()
    r = np.array([2, 0])

    def nll():
        lp = ad.log_softmax(p(c).logits, axis=-1)
        return -(lp[np.arange(2), r].sum())

    p.zero_grad()
    nll().backward()
    for layer in p.likelihood_mlp.layers:
        for param in (layer.weight, layer.bias):
            fd = central_diff(lambda: nll().item(), param.data)
            assert np.max(np.abs(param.grad - fd) / (np.abs(fd) + 1e-6)) < 1e-4


@pytest.fixture(scope="module")
def model_and_world():
    world = generate(GeneratorConfig(seed=21, scenario_count=6))
    model = KempModel(ModelConfig(horizon=world[0].horizon, variant="kemp-i-lstm", mode_count=6), seed=2)
    return model, world


def test_full_size_prediction_contract(model_and_world):
    model, world = model_and_world
    preds = model.predict(world)
    for p in preds:
        assert len(p.modes) == 6
        assert all(m.mu.shape == (80, 2) and len(m.keyframe_mu) == 4 for m in p.modes)
        assert abs(p.probabilities.sum() - 1.0) < 1e-9 and np.all(p.probabilities > 0)
        assert all(np.isfinite(m.logit) for m in p.modes)


def test_containment_holds_in_scenario_coordinates(model_and_world):
    model, world = model_and_world
    pos = keyframe_positions(model.config.horizon)
    for p in model.predict(world):
        for m in p.modes:
            np.testing.assert_array_equal(m.mu[pos], m.keyframe_mu)


def test_prediction_is_deterministic(model_and_world):
    model, world = model_and_world
    a, b = model.predict(world), model.predict(world)
    assert all(x.modes == y.modes for x, y in zip(a, b))


def test_equivariance_under_rigid_transform(model_and_world):
    model, world = model_and_world
    theta, shift = 0.7, np.array([15.0, -42.0])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    moved = [transform_scenario(s, theta, shift) for s in world]
    for p, q in zip(model.predict(world), model.predict(moved)):
        np.testing.assert_allclose(q.means, p.means @ rot.T + shift, rtol=0, atol=1e-6)
        np.testing.assert_allclose(q.probabilities, p.probabilities, rtol=0, atol=1e-9)
