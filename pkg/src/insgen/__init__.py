"""Instance-discrimination GAN training on low-dimensional synthetic data."""
from .config import RunConfig, load_config
from .datasets import Dataset, make_grid, make_ring, subsample
from .tensor import Tensor, backward, grad_check
from .trainer import TrainState, evaluate, run

__version__ = "0.1.0"

__all__ = ["Dataset", "RunConfig", "Tensor", "TrainState", "backward", "evaluate",
           "grad_check", "load_config", "make_grid", "make_ring", "run", "subsample"]
