"""Learning Lyapunov functions and linear controllers with delta-complete certification."""
from .cegis import SynthesisConfig, SynthesisReport, relax_and_retry, synthesize
from .estimator import LyapunovControlEstimator
from .network import LinearController, LyapunovNet, SystemSpec

__all__ = [
    "SynthesisConfig", "SynthesisReport", "synthesize", "relax_and_retry",
    "LyapunovNet", "LinearController", "SystemSpec", "LyapunovControlEstimator",
]
__version__ = "0.1.0"
