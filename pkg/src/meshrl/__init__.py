"""Model-based reinforcement learning for service-mesh load testing.

Modules: ``mesh_sim`` (ground-truth simulator), ``datagen`` (profiles and
traces), ``neural`` (dense nets, Adam, gradient check), ``surrogate``
(learned environment and ridge baseline), ``agents`` (rewards, Q-nets,
paradigms) and ``harness`` (training loop, metric, validation, reports).
"""

from .errors import FormatError, MeshRLError, MetricError, NumericError, ValidationError

__version__ = "0.1.0"

__all__ = ["FormatError", "MeshRLError", "MetricError", "NumericError", "ValidationError", "__version__"]
