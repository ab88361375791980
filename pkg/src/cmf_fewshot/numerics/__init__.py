from .adam import Adam, AdamState, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .graph import (
    OPS,
    Graph,
    GraphError,
    Node,
    NonFiniteError,
    NotScalarError,
    ShapeError,
    backward,
    forward,
)
from .init import kaiming_uniform

__all__ = [
    "OPS",
    "Adam",
    "AdamState",
    "CheckpointError",
    "Graph",
    "GraphError",
    "Node",
    "NonFiniteError",
    "NotScalarError",
    "ShapeError",
    "adam_step",
    "backward",
    "forward",
    "kaiming_uniform",
    "load_checkpoint",
    "save_checkpoint",
]
