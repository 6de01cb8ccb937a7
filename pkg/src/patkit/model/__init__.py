"""Network assembly, configuration, training and checkpoints."""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import PATConfig, OptimConfig, apply_overrides, format_config, parse_plan, read_config
from .network import (
    PATNet,
    build_classifier,
    build_model,
    build_segmenter,
    class_from_logits,
    element_wise_loss,
    param_count,
    predict,
)
from .train import Adam, TrainState, evaluate, learning_rate, train
