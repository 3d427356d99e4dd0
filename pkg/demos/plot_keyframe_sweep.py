"""
How many keyframes?
===================

A miniature version of ``kemp ablate``: train the same interpolation model
with k = 0 (a plain MLP decoder), 1, 2, 4 and 8 keyframes and compare the
metrics.  With this little training the ordering is noisy; the point is the
harness, not the numbers.
"""

from kemp import GeneratorConfig, MetricConfig, ModelConfig, TrainConfig, generate
from kemp.cli import ablation_csv, run_ablation

world = generate(GeneratorConfig(seed=2, scenario_count=200))
train_set, eval_set = world[:160], world[160:]
horizon = world[0].horizon


def model_config(k):
    variant = "kemp-i-lstm" if k else "baseline-mlp"
    return ModelConfig(horizon.with_keyframes(k), variant=variant, mode_count=6)


rows = run_ablation(train_set, eval_set, [0, 1, 2, 4, 8], [0], model_config,
                    lambda seed: TrainConfig(seed=seed, steps=150, batch_size=32), MetricConfig(), log=print)
print(ablation_csv(rows, horizon, MetricConfig()))
