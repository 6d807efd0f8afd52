"""Backward-compatible embedding versions for evolving graph encoders.

Modules: ``graph`` (interaction store, snapshots, synthetic data), ``encoder``
(GraphSAGE-style encoder), ``training`` (losses, Adam, per-version training),
``compat`` (backward transforms and their registry), ``consumer`` (downstream
tasks), ``evaluation`` (metrics and the method runner), ``cli``.
"""
from .compat import BackwardTransform, TransformRegistry, to_version
from .encoder import EmbeddingTable, EncoderConfig, encode_all
from .evaluation import BenchmarkConfig, run_benchmark, summary_table
from .graph import InteractionGraph, VersionSchedule, generate_synthetic, ingest
from .methods import METHODS
from .training import TrainConfig, train_version

__version__ = "0.1.0"

__all__ = ["BackwardTransform", "TransformRegistry", "to_version", "EmbeddingTable",
           "EncoderConfig", "encode_all", "BenchmarkConfig", "run_benchmark", "summary_table",
           "InteractionGraph", "VersionSchedule", "generate_synthetic", "ingest", "METHODS",
           "TrainConfig", "train_version"]
