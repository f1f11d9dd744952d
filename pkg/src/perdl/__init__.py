"""Personalized dictionary learning: shared/unique dictionaries across clients."""

from .core import (
    Dictionary,
    PartitionedDictionary,
    SignedPermutation,
    SparseCode,
    dist_12,
    dist_2_columns,
    estimate_beta,
    incoherence,
    vector_d2,
)
from .dl_algs import DlAlgorithm, WarmStartConfig
from .matching import global_matching
from .perma import ClientState, local_update, run_independent, run_perma
from .synthgen import GroundTruth, SynthConfig, generate

__version__ = "0.1.0"
