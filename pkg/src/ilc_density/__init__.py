"""Object counting with density maps learned from image-level lower-count labels."""
from .datamodel import BEYOND, T_TILDE, CategoryPartition, CountAnnotation, LossReport
from .infer import Prediction, predict
from .network import CountingNet, HeadConfig, build_model
from .train import TrainConfig, TrainingSet, train_all, train_stage1, train_stage2

__version__ = "0.1.0"
