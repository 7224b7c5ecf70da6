"""Collaborative anomaly detection with a shared, task-conditioned likelihood-ratio scorer."""

from .clr import RatioModel, TrainConfig, estimate_clr
from .core import Benchmark, EvalReport, TaskCollection, TaskDataset, TaskEmbedding
from .evaluation import auc
from .pipeline import evaluate, generalize, load, save, train
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "Benchmark", "EvalReport", "RatioModel", "SynthConfig", "TaskCollection", "TaskDataset", "TaskEmbedding",
    "TrainConfig", "auc", "estimate_clr", "evaluate", "generalize", "generate", "load", "save", "train",
]
