"""Rank-adaptive dynamical low-rank training of Tucker-factorized layers."""
from .data import spectral_init
from .dlrt import DlrtConfig, DlrtLayerState, TDLRTOptimizer, step_efficient, step_fixed_rank, step_reference
from .tucker import TuckerTensor, hosvd, truncate

__version__ = "0.1.0"

__all__ = [
    "DlrtConfig",
    "DlrtLayerState",
    "TDLRTOptimizer",
    "TuckerTensor",
    "hosvd",
    "spectral_init",
    "step_efficient",
    "step_fixed_rank",
    "step_reference",
    "truncate",
]
