"""Noise-robust domain-adaptive detection toolkit.

Thin re-export of the compiled core. All heavy state stays on the C++ side;
results cross as interchange documents (scene.v1 / detections.v1 /
metrics.v1 JSON and CSV tables).
"""

from ._nlte import (
    RunResult,
    __version__,
    ablation,
    corrupt_voc,
    evaluate_detections,
    generate_scenario,
    gradient_checks,
    run_training,
)

__all__ = [
    "RunResult",
    "__version__",
    "ablation",
    "corrupt_voc",
    "evaluate_detections",
    "generate_scenario",
    "gradient_checks",
    "run_training",
]
