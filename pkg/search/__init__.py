"""
Search module for choosing which blocks to omit.

This module contains:
- Calibration datasets (JSONL in, seeded subsamples out)
- Greedy, two-pass and exhaustive omission search
- Candidate pool generation and persistence
"""

from .calibration import CalibrationDataset, load_calibration_dataset, load_pairs
from .omission import exhaustive_search, greedy_agreement, greedy_search, omission_loss
from .pool import CandidatePool, PoolEntry, generate_pool

__all__ = [
    # Calibration
    "CalibrationDataset",
    "load_calibration_dataset",
    "load_pairs",
    # Search
    "exhaustive_search",
    "greedy_agreement",
    "greedy_search",
    "omission_loss",
    # Pool
    "CandidatePool",
    "PoolEntry",
    "generate_pool",
]
