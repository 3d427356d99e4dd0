"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (also repeated in
the terminal summary).  Criteria 6 and 7 share one module-scoped training
run: three seeds each of KEMP-I-LSTM (k=4) and a parameter-matched
no-keyframe MLP baseline, 5000 steps on 2000 generated scenarios.
"""

import json
import math
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from kemp.cli import main
from kemp.encoder import collate, transform_scenario
from kemp.evaluation import (
    MetricConfig,
    ensemble_merge,
    evaluate,
    mean_ap,
    min_ade,
    min_fde,
    miss_rate,
    nms_select,
)
from kemp.model import KempModel, ModelConfig
from kemp.objective import LossWeights, gaussian_nll, l_cons, total_loss
from kemp.autodiff import Tensor
from kemp.predictor import keyframe_positions
from kemp.scene import HorizonSpec, PredictionSet, keyframe_indices, sigma_params_to_cov
from kemp.synth import GeneratorConfig, constant_velocity_baseline, generate
from kemp.training import TrainConfig, train

from _oracles import (
    brute_endpoint_hit,
    brute_mean_ap,
    brute_min_ade,
    brute_min_fde,
    brute_nms,
    metric_fixture,
    model_gradcheck,
)
from conftest import ACCEPTANCE_LINES

TURNS = ("left_turn", "right_turn")
SEEDS = (0, 1, 2)


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def cli(*argv):
    return main([str(a) for a in argv])


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    h = HorizonSpec(11, 8, 0.1, 2)
    world = generate(replace(GeneratorConfig(seed=5, scenario_count=2), horizon=h))
    cfg = ModelConfig(h, variant="kemp-i-lstm", mode_count=2, embedding_dim=16, encoder_hidden=16,
                      component_dim=16, hidden=16, lstm_hidden=16, query_dim=4)
    model = KempModel(cfg)
    errors = model_gradcheck(model, collate(model.features(world)), LossWeights(), h=1e-6)
    worst_name, worst = max(errors.items(), key=lambda kv: kv[1])
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-4 and elapsed < 60,
            f"{len(errors)} tensors, {model.parameter_count()} entries, worst rel err {worst:.1e} "
            f"at {worst_name}, {elapsed:.1f}s")


def test_criterion_2_analytic_losses():
    nll = gaussian_nll(Tensor(np.array([1.5, -2.0])), Tensor(np.zeros(3)), np.array([1.5, -2.0])).item()
    cons = l_cons(Tensor(np.zeros((8, 2))), Tensor(np.array([[0.0, 0.0], [3.0, 4.0]])), HorizonSpec(3, 8, 0.1, 2)).item()

    h = HorizonSpec(11, 8, 0.1, 2)
    world = generate(replace(GeneratorConfig(seed=9, scenario_count=4), horizon=h))
    model = KempModel(ModelConfig(h, variant="kemp-s", mode_count=3, embedding_dim=16, encoder_hidden=16,
                                  component_dim=16, hidden=16, lstm_hidden=16))
    batch = collate(model.features(world))
    rep = total_loss(model(batch), batch.ground_truth, LossWeights(alpha=10.0, beta=1.0), h, separable=True)
    arith = abs(rep.total - (rep.l_traj + 10.0 * rep.l_cons + 1.0 * rep.l_key))
    ok = abs(nll - math.log(2 * math.pi)) <= 1e-12 and cons == 25.0 and arith <= 1e-10 and rep.l_cons > 0
    verdict(2, ok, f"nll-log2pi={nll - math.log(2 * math.pi):.1e}, L_cons={cons}, total residual {arith:.1e}")


def test_criterion_3_metric_oracles():
    start = time.perf_counter()
    cfg = MetricConfig()
    worst = 0.0
    mr_ok = True
    count = 0
    for seed in range(10):
        for j in range(10):
            preds, gts, buckets = metric_fixture([seed, j])
            count += 1
            for p, g in zip(preds, gts):
                worst = max(worst, abs(min_ade(p, g) - brute_min_ade(p.means, g)) / brute_min_ade(p.means, g))
                want = brute_min_fde(p.means, g)
                worst = max(worst, abs(min_fde(p, g) - want) / max(want, 1e-300))
            misses = sum(not any(brute_endpoint_hit(m, g, len(g), 2.0) for m in p.means) for p, g in zip(preds, gts))
            mr_ok &= miss_rate(preds, gts, cfg) == misses / len(gts)
            for cutoff in (4, 8, 12):
                got = mean_ap(preds, gts, buckets, cfg, cutoff)[0]
                want = brute_mean_ap([p.means for p in preds], [p.probabilities for p in preds], gts, buckets,
                                     cutoff, 2.0)
                worst = max(worst, abs(got - want) / want if want else abs(got))
    elapsed = time.perf_counter() - start
    verdict(3, worst <= 1e-12 and mr_ok and elapsed < 30,
            f"{count} fixtures, worst rel diff {worst:.1e}, MR exact={mr_ok}, {elapsed:.1f}s")


def test_criterion_4_structural_invariants():
    world = generate(GeneratorConfig(seed=11, scenario_count=8))
    contained = True
    prob_err = 0.0
    for variant in ("kemp-i-mlp", "kemp-i-lstm", "kemp-s"):
        model = KempModel(ModelConfig(world[0].horizon, variant=variant, mode_count=6), seed=4)
        pos = keyframe_positions(model.config.horizon)
        assert list(pos + 1) == keyframe_indices(model.config.horizon) == [20, 40, 60, 80]
        for p in model.predict(world):
            prob_err = max(prob_err, abs(p.probabilities.sum() - 1.0))
            if variant != "kemp-s":
                contained &= all(np.array_equal(m.mu[pos], m.keyframe_mu) for m in p.modes)

    rng = np.random.default_rng(0)
    raw = np.column_stack([rng.uniform(-12, 6, 10_000), rng.uniform(-12, 6, 10_000), rng.uniform(-30, 30, 10_000)])
    covs = sigma_params_to_cov(raw)
    spd = bool(np.all(np.linalg.eigvalsh(covs)[:, 0] > 0))
    np.linalg.cholesky(covs)

    separated = True
    cfg = MetricConfig(top_k=6)
    for _ in range(200):
        means = rng.normal(0, 3.0, size=(12, 5, 2))
        probs = rng.dirichlet(np.ones(12))
        from kemp.scene import PredictedTrajectory
        pset = PredictionSet("x", tuple(PredictedTrajectory(m, np.zeros((5, 3)), 0.0, float(q))
                                        for m, q in zip(means, probs)))
        out = nms_select(pset, cfg).means[:, -1]
        greedy = _greedy_count(means[:, -1], probs, cfg.nms_radius_m, cfg.top_k)
        assert np.array_equal(nms_select(pset, cfg).means, means[brute_nms(means[:, -1], probs, 2.0, 6)])
        for i in range(greedy):
            for j in range(i):
                separated &= bool(np.linalg.norm(out[i] - out[j]) > cfg.nms_radius_m)
    verdict(4, contained and prob_err <= 1e-9 and spd and separated,
            f"containment={contained}, max |sum p - 1|={prob_err:.1e}, 10^4 SPD={spd}, NMS separation={separated}")


def _greedy_count(endpoints, probs, radius, top_k):
    kept = []
    for i in sorted(range(len(probs)), key=lambda i: (-probs[i], i)):
        if len(kept) < top_k and all(np.hypot(*(endpoints[i] - endpoints[j])) > radius for j in kept):
            kept.append(i)
    return len(kept)


def test_criterion_5_determinism(tmp_path):
    small = ["--modes", "3", "--hidden", "16", "--batch-size", "8", "--steps", "6", "--decay-every", "4"]
    outputs = {}
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli("gen-data", "--seed", 7, "--count", 20, "--horizon", "2s", "--out", d / "data.jsonl") == 0
        assert cli("train", "--data", d / "data.jsonl", *small, "--out", d / "m") == 0
        assert cli("predict", "--data", d / "data.jsonl", "--ckpt", d / "m" / "model.ckpt", "--out", d / "pred.jsonl") == 0
        assert cli("evaluate", "--data", d / "data.jsonl", "--pred", d / "pred.jsonl", "--out", d / "metrics.json") == 0
        outputs[run] = {name: (d / name).read_bytes() for name in
                        ("data.jsonl", "m/model.ckpt", "m/train_log.csv", "pred.jsonl", "metrics.json")}
    same = {name: outputs["a"][name] == outputs["b"][name] for name in outputs["a"]}

    d = tmp_path / "a"
    assert cli("train", "--data", d / "data.jsonl", *small, "--stop-after", 3, "--checkpoint-every", 3,
               "--out", d / "split") == 0
    assert cli("train", "--data", d / "data.jsonl", *small, "--resume", d / "split" / "checkpoints" / "step_0000003.json",
               "--out", d / "split") == 0
    same["resume ckpt"] = (d / "split" / "model.ckpt").read_bytes() == outputs["a"]["m/model.ckpt"]
    same["resume log"] = (d / "split" / "train_log.csv").read_bytes() == outputs["a"]["m/train_log.csv"]
    verdict(5, all(same.values()), ", ".join(f"{k}={'same' if v else 'DIFF'}" for k, v in same.items()))


@pytest.fixture(scope="module")
def learning_runs():
    """Train 3 seeds of each model once; return metrics for criteria 6 and 7."""
    world = generate(GeneratorConfig(seed=0, scenario_count=2000))
    h = world[0].horizon
    cfg = MetricConfig()
    turn_idx = [i for i, s in enumerate(world) if s.maneuver_label in TURNS]
    turn = [world[i] for i in turn_idx]
    cv = evaluate(turn, [constant_velocity_baseline(s) for s in turn], cfg)
    models = {
        "kemp": ModelConfig(h, variant="kemp-i-lstm", mode_count=6),
        "baseline": ModelConfig(h.with_keyframes(0), variant="baseline-mlp", mode_count=6, hidden=192),
    }
    counts = {name: KempModel(mc).parameter_count() for name, mc in models.items()}
    results = {name: [] for name in models}
    start = time.perf_counter()
    for name, mc in models.items():
        for seed in SEEDS:
            model = train(world, mc, TrainConfig(seed=seed, steps=5000, batch_size=32)).model()
            preds = [ensemble_merge([p], cfg) for p in model.predict(world)]
            full = evaluate(world, preds, cfg)
            turn_rep = evaluate(turn, [preds[i] for i in turn_idx], cfg)
            results[name].append({"seed": seed, "mAP": full.mAP, "minADE": full.minADE,
                                  "turn_minADE": turn_rep.minADE})
            print(json.dumps({"model": name, **results[name][-1]}))
    return {"cv_turn_minADE": cv.minADE, "results": results, "param_counts": counts,
            "minutes": (time.perf_counter() - start) / 60, "turn_count": len(turn)}


def test_criterion_6_learning(learning_runs):
    cv = learning_runs["cv_turn_minADE"]
    ade = [r["turn_minADE"] for r in learning_runs["results"]["kemp"]]
    wins = sum(a < cv for a in ade)
    verdict(6, wins >= 2, f"turning-subset minADE {', '.join(f'{a:.3f}' for a in ade)} vs constant velocity "
                          f"{cv:.3f} on {learning_runs['turn_count']} turns; {wins}/3 seeds better")


def test_criterion_7_keyframe_benefit(learning_runs):
    kemp = statistics.median(r["mAP"] for r in learning_runs["results"]["kemp"])
    base = statistics.median(r["mAP"] for r in learning_runs["results"]["baseline"])
    n_k, n_b = learning_runs["param_counts"]["kemp"], learning_runs["param_counts"]["baseline"]
    matched = abs(n_b - n_k) <= 0.1 * n_k
    verdict(7, matched and kemp >= base,
            f"median mAP KEMP {kemp:.4f} vs baseline {base:.4f}; params {n_k} vs {n_b}; "
            f"{learning_runs['minutes']:.1f} min for 6 runs")


def test_criterion_8_ablation_harness(tmp_path):
    assert cli("gen-data", "--seed", 3, "--count", 16, "--out", tmp_path / "data.jsonl") == 0
    out = tmp_path / "ablation.csv"
    assert cli("ablate", "--data", tmp_path / "data.jsonl", "--keyframes-list", "0,1,2,4,8", "--seeds-list", "0",
               "--steps", 3, "--batch-size", 8, "--modes", 3, "--out", out) == 0
    lines = out.read_text().splitlines()
    header = lines[0].split(",")
    wanted = ["k", "seed", "minADE", "minFDE", "MR", "mAP", "mAP_3s", "mAP_5s", "mAP_8s"]
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    complete = all(all(r[c] != "" for c in wanted) for r in rows)
    doc = json.loads(out.with_suffix(".json").read_text())
    h = HorizonSpec(11, 80, 0.1, 0)
    index_ok = all(keyframe_indices(h.with_keyframes(k)) == [j * (80 // k) for j in range(1, k + 1)]
                   for k in (1, 2, 4, 8))
    kf_ok = all(d["keyframes_ok"] for d in doc if d["k"] >= 1)
    ok = header[: len(wanted)] == wanted and [r["k"] for r in rows] == ["0", "1", "2", "4", "8"] and complete
    verdict(8, ok and kf_ok and index_ok, f"{len(rows)} rows, columns {','.join(header)}, keyframe invariant={kf_ok}")


def test_criterion_9_equivariance():
    world = generate(GeneratorConfig(seed=13, scenario_count=12))
    model = KempModel(ModelConfig(world[0].horizon, variant="kemp-i-lstm", mode_count=6), seed=1)
    cfg = MetricConfig()
    worst_mu = worst_metric = 0.0
    base_preds = model.predict(world)
    base_rep = evaluate(world, [ensemble_merge([p], cfg) for p in base_preds], cfg)
    for theta, shift in ((0.7, (15.0, -42.0)), (-2.5, (-300.0, 120.0)), (math.pi, (0.0, 1000.0))):
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        moved = [transform_scenario(s, theta, shift) for s in world]
        preds = model.predict(moved)
        for p, q in zip(base_preds, preds):
            worst_mu = max(worst_mu, float(np.max(np.abs(q.means - (p.means @ rot.T + shift)))))
        rep = evaluate(moved, [ensemble_merge([p], cfg) for p in preds], cfg)
        a, b = base_rep.to_dict(), rep.to_dict()
        diffs = [abs(a[k] - b[k]) for k in ("minADE", "minFDE", "MR", "mAP")]
        diffs += [abs(a["mAP_per_horizon"][k] - b["mAP_per_horizon"][k]) for k in a["mAP_per_horizon"]]
        worst_metric = max(worst_metric, *diffs)
    verdict(9, worst_mu <= 1e-6 and worst_metric <= 1e-9,
            f"max mean deviation {worst_mu:.1e} m, max metric change {worst_metric:.1e}")
