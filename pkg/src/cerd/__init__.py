"""Conditional evidence reconstruction and decomposition for incomplete multimodal data."""

from .data_io import Dataset, Standardizer, load, split, write
from .model import CERDModel, TrainConfig, desk_config
from .synth import SyntheticSpec, generate, planted_importance
from .tensor import Tensor, backward, check_gradients, no_grad
from .train import Checkpoint, attribute, evaluate, run_ablation, run_training

__version__ = "0.1.0"
