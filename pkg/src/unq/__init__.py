"""Unsupervised neural quantization for compressed-domain nearest-neighbour search."""

from .data_io import DatasetBundle, read_bvecs, read_codes, read_fvecs, read_ivecs, synth_dataset, write_codes
from .model import UnqModel, load_checkpoint, save_checkpoint
from .pq import PqCodebooks, pq_encode, pq_search, pq_train
from .search import CodeTable, GroundTruth, exact_knn, recall_at_k, search, search_batch
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CodeTable", "DatasetBundle", "GroundTruth", "PqCodebooks", "TrainConfig", "UnqModel",
    "exact_knn", "fit", "load_checkpoint", "pq_encode", "pq_search", "pq_train", "read_bvecs",
    "read_codes", "read_fvecs", "read_ivecs", "recall_at_k", "save_checkpoint", "search",
    "search_batch", "synth_dataset", "write_codes",
]
