"""Knowledge-graph-enriched predictive process monitoring."""
from .core import (
    Event, EventLog, KnowledgeGraph, Sample, case_sequence, load_event_log,
    load_knowledge_graph, load_labels, prefix_expand,
)
from .errors import ConfigMismatch, DataError, NumericalError, KgpmError, TrainingDiverged
from .head import TaskKind
from .model import ModelSpec, ProcessModel, TimeConfig
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Event", "EventLog", "KnowledgeGraph", "Sample", "case_sequence", "load_event_log",
    "load_knowledge_graph", "load_labels", "prefix_expand",
    "ConfigMismatch", "DataError", "NumericalError", "KgpmError", "TrainingDiverged",
    "TaskKind", "ModelSpec", "ProcessModel", "TimeConfig",
    "Checkpoint", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
