"""From-scratch ListenNet: a lightweight EEG auditory-attention decoder with
hand-written backpropagation, Euclidean alignment and training protocols."""

from .model import ListenNetParams, ModelConfig, count_macs, count_params, init_params, model_backward, model_forward
from .train import TrainConfig, train_loop

__all__ = [
    "ListenNetParams", "ModelConfig", "TrainConfig",
    "count_macs", "count_params", "init_params", "model_backward", "model_forward", "train_loop",
]
__version__ = "0.1.0"
