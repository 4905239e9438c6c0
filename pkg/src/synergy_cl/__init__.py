"""Dual-memory continual learning with stochastic Fisher consolidation, on a small numpy autodiff core."""
from .kernels import BACKEND
from .learner import ConfigurationError, Method, SynergyConfig, make_learner
from .memory import EpisodicBuffer, SemanticMemory
from .models import Network, build_mlp, build_small_cnn
from .seeding import RunStreams

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigurationError", "EpisodicBuffer", "Method", "Network", "RunStreams",
    "SemanticMemory", "SynergyConfig", "build_mlp", "build_small_cnn", "make_learner",
]
