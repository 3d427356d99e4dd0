"""
Train a keyframe model and compare it with constant velocity
============================================================

Generate 600 synthetic scenarios, train a small KEMP-I-LSTM for a
thousand steps and score it against the constant-velocity oracle on the
same scenarios.  Runs in about two minutes on one CPU core.
"""

import numpy as np

from kemp import GeneratorConfig, MetricConfig, ModelConfig, TrainConfig, evaluate, generate, train
from kemp.evaluation import ensemble_merge
from kemp.synth import constant_velocity_baseline

###############################################################################
# Data: 8 s of future at 10 Hz after 1.1 s of history, with the default
# maneuver mix (straight, left, right, stop).  ``k=4`` keyframes sit at
# steps 20, 40, 60 and 80.
world = generate(GeneratorConfig(seed=0, scenario_count=600))
train_set, test_set = world[:500], world[500:]
print(f"{len(train_set)} training / {len(test_set)} test scenarios, T={world[0].horizon.future_steps}")

###############################################################################
# Model: six candidate trajectories per scenario keep it quick.
config = ModelConfig(world[0].horizon, variant="kemp-i-lstm", mode_count=6)
result = train(train_set, config, TrainConfig(seed=0, steps=1000, batch_size=32),
               progress=lambda row: row.step % 200 == 0 and print(f"step {row.step:4d}  loss {row.total:9.3f}"))
model = result.model()
print(f"{model.parameter_count()} parameters")

###############################################################################
# Evaluation.  NMS keeps the 6 best separated modes (here: all of them).
metrics = MetricConfig()
preds = [ensemble_merge([p], metrics) for p in model.predict(test_set)]
ours = evaluate(test_set, preds, metrics)
cv = evaluate(test_set, [constant_velocity_baseline(s) for s in test_set], metrics)
print(ours.to_table("kemp-i-lstm"))
print(cv.to_table("constant velocity"))

###############################################################################
# Keyframes are part of every predicted trajectory, bit for bit.
mode = preds[0].modes[0]
print("keyframes:", np.round(mode.keyframe_mu, 2).tolist())
print("trajectory at steps 20/40/60/80:", np.round(mode.mu[[19, 39, 59, 79]], 2).tolist())
