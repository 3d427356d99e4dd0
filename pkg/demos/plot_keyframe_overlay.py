"""
Keyframes on the map
====================

Draws a turning scenario with its predicted modes (blue, more opaque =
more likely), the ground truth (magenta) and the keyframes as yellow stars,
writing ``keyframe_overlay.svg`` next to this script.
"""

from pathlib import Path

from kemp import GeneratorConfig, MetricConfig, ModelConfig, TrainConfig, generate, train
from kemp.evaluation import ensemble_merge
from kemp.plotting import write_svg

world = generate(GeneratorConfig(seed=1, scenario_count=200))
model = train(world, ModelConfig(world[0].horizon, mode_count=6),
              TrainConfig(seed=0, steps=200, batch_size=32)).model()

# pick the first left or right turn
scenario = next(s for s in world if s.maneuver_label in ("left_turn", "right_turn"))
pred = ensemble_merge(model.predict([scenario]), MetricConfig(top_k=3))

out = Path(__file__).with_name("keyframe_overlay.svg")
write_svg(out, scenario, pred)
print(f"{scenario.scenario_id} ({scenario.maneuver_label}): wrote {out}")
