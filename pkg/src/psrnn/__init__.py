"""Predictive state recurrent neural networks.

Method-of-moments initialization, normalized bilinear filtering, CP-factorized
cells, multilayer stacking and truncated-BPTT refinement, with an exact HMM
filter as ground truth.
"""

from .config import RunConfig, load_config
from .data import Dataset, load_chars, load_trajectories
from .errors import PsrnnError
from .io import load_model, save_model
from .model import FactorizedCell, PsrnnCell, PsrnnModel, factorize_model, filter
from .train import evaluate, grad_check, sgd_refine
from .twostage import init_multilayer, random_model

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "Dataset",
    "load_chars",
    "load_trajectories",
    "PsrnnError",
    "load_model",
    "save_model",
    "PsrnnCell",
    "FactorizedCell",
    "PsrnnModel",
    "factorize_model",
    "filter",
    "evaluate",
    "grad_check",
    "sgd_refine",
    "init_multilayer",
    "random_model",
]
