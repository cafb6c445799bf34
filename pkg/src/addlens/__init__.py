"""Interpretability toolkit for a one-layer transformer doing integer addition."""
from .datagen import GeneratorConfig, Question, make_test_suite
from .estimator import AdditionTransformer
from .model import InterventionSpec, ModelConfig, TransformerModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, train

__all__ = [
    "AdditionTransformer", "GeneratorConfig", "InterventionSpec", "ModelConfig", "Question",
    "TrainConfig", "TransformerModel", "evaluate", "load_checkpoint", "make_test_suite",
    "save_checkpoint", "train",
]
__version__ = "0.1.0"
