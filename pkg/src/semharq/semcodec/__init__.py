"""Synthetic data source, multi-task codec networks and task losses."""
from .codec import CodecDims, ReceiverPass, SemanticCodec, TaskPrediction, TASKS
from .data import Dataset, SyntheticItem, generate_dataset
from .losses import (
    LossWeights,
    loss_channel_mse,
    loss_cross_entropy,
    loss_multitask,
    loss_triplet_hard,
    softmax_cross_entropy,
)

__all__ = [
    "CodecDims", "Dataset", "LossWeights", "ReceiverPass", "SemanticCodec", "SyntheticItem",
    "TASKS", "TaskPrediction", "generate_dataset", "loss_channel_mse", "loss_cross_entropy",
    "loss_multitask", "loss_triplet_hard", "softmax_cross_entropy",
]
