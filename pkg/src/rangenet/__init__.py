"""Streaming two-stage low-rank SVD with sketching baselines and oracle metrics."""

from .matcore import SvdFactors, jacobi_svd, power_spectral_norm, qr_econ, truncated_svd_oracle
from .solver import (
    Stage1Config,
    Stage2Config,
    TrainReport,
    decompose,
    extract_factors,
    train_stage1,
    train_stage2,
)
from .stream import BatchSource, MemorySource, open_source

__all__ = [
    "BatchSource",
    "MemorySource",
    "Stage1Config",
    "Stage2Config",
    "SvdFactors",
    "TrainReport",
    "decompose",
    "extract_factors",
    "jacobi_svd",
    "open_source",
    "power_spectral_norm",
    "qr_econ",
    "train_stage1",
    "train_stage2",
    "truncated_svd_oracle",
]

__version__ = "0.1.0"
