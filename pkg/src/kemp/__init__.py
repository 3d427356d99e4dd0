"""Keyframe-based hierarchical motion prediction on a small numpy autodiff engine."""

import os as _os

_threads = _os.environ.get("KEMP_THREADS")
if _threads:
    # BLAS pools read these once, when numpy is first imported.
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .evaluation import MetricConfig, MetricReport, ensemble_merge, evaluate, nms_select  # noqa: E402
from .model import KempModel, ModelConfig, predict  # noqa: E402
from .scene import HorizonSpec, PredictedTrajectory, PredictionSet, Scenario  # noqa: E402
from .synth import GeneratorConfig, constant_velocity_baseline, generate  # noqa: E402
from .training import TrainConfig, train, train_ensemble  # noqa: E402

__all__ = [
    "GeneratorConfig",
    "HorizonSpec",
    "KempModel",
    "MetricConfig",
    "MetricReport",
    "ModelConfig",
    "PredictedTrajectory",
    "PredictionSet",
    "Scenario",
    "TrainConfig",
    "constant_velocity_baseline",
    "ensemble_merge",
    "evaluate",
    "generate",
    "nms_select",
    "predict",
    "train",
    "train_ensemble",
]
