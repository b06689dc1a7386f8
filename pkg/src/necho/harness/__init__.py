"""Training loop, metrics, experiment runners and the command line."""

from .config import DataConfig, TrainConfig, config_hash, load_config
from .metrics import accuracy_at_ks, topk_accuracy
from .optim import SGD, Adam, EarlyStopping

__all__ = ["Adam", "DataConfig", "EarlyStopping", "SGD", "TrainConfig", "accuracy_at_ks",
           "config_hash", "load_config", "topk_accuracy"]
