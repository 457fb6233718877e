"""Joint face super-resolution and landmark localization from 16x16 inputs."""

from .model import JASRNet, ModelConfig, build, count_parameters
from .trainer import TrainConfig, evaluate, load_checkpoint, train

__all__ = ["JASRNet", "ModelConfig", "build", "count_parameters", "TrainConfig", "train", "evaluate",
           "load_checkpoint"]
__version__ = "0.1.0"
