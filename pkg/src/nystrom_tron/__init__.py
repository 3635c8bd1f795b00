"""Nystrom-approximated kernel machines trained by distributed trust-region Newton.

The pieces, bottom up: :mod:`.data` (libsvm parsing, sharding), :mod:`.kernel`
(Gaussian kernel blocks), :mod:`.objective` (loss, gradient, Hd partials),
:mod:`.tron` (optimizer), :mod:`.allreduce` (tree collectives over threads or
TCP), :mod:`.basis` (random and K-means basis selection, stage-wise growth),
:mod:`.driver` (the full training pipeline) and :mod:`.reference` (dense
single-machine oracles).
"""

from .data import (ConfigurationError, ParseError, SparseExample, UnsupportedLabelError,
                   from_dense, load_dataset, shard_random, write_dataset)
from .kernel import BasisSet, HyperParams, KernelBlock, build_kernel_block, kernel_matrix
from .objective import ModelState, SerialOracle, load_model, save_model
from .tron import NumericalFailure, TronConfig, TronTrace, minimize
from .allreduce import CommCostModel, Communicator, LocalCluster, estimate_comm_cost
from .basis import extend_model, select_kmeans, select_random
from .driver import PRESETS, TrainConfig, TrainReport, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "BasisSet", "CommCostModel", "Communicator", "ConfigurationError", "HyperParams",
    "KernelBlock", "LocalCluster", "ModelState", "NumericalFailure", "PRESETS", "ParseError",
    "SerialOracle", "SparseExample", "TrainConfig", "TrainReport", "TronConfig", "TronTrace",
    "UnsupportedLabelError", "build_kernel_block", "estimate_comm_cost", "evaluate",
    "extend_model", "from_dense", "kernel_matrix", "load_dataset", "load_model", "minimize",
    "predict", "save_model", "select_kmeans", "select_random", "shard_random", "train",
    "write_dataset",
]
