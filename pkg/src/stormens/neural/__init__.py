from .gradcheck import grad_check
from .layers import (
    BatchNorm,
    Conv1d,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Dropout,
    GlobalMaxPool1d,
    GlobalMaxPool2d,
    ReLU,
    Sigmoid,
)
from .losses import binary_cross_entropy, l1_loss
from .net import ParamStore, Sequential
from .optim import EarlyStopper, TrainConfig, adam_step

__all__ = [
    "BatchNorm", "Conv1d", "Conv2d", "ConvTranspose2d", "Dense", "Dropout",
    "GlobalMaxPool1d", "GlobalMaxPool2d", "ReLU", "Sigmoid",
    "binary_cross_entropy", "l1_loss",
    "ParamStore", "Sequential",
    "EarlyStopper", "TrainConfig", "adam_step",
    "grad_check",
]
