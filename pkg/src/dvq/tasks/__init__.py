"""Synthetic end-to-end experiments for dynamic bottlenecks."""

from .analysis import correlation_analysis
from .data import (AttributeDataset, ReferentialDataset, gen_attribute_dataset,
                   gen_referential_dataset, read_jsonl, write_jsonl)
from .train import NonFiniteLossError, RunRecord, evaluate, evaluate_model, train_model

__all__ = [
    "AttributeDataset", "ReferentialDataset", "gen_attribute_dataset", "gen_referential_dataset",
    "read_jsonl", "write_jsonl", "NonFiniteLossError", "RunRecord", "evaluate", "evaluate_model",
    "train_model", "correlation_analysis",
]
