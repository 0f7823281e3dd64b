"""
Loaders module for moving transformer blocks from storage into memory.

This module contains:
- Block residency with transfer accounting (BlockStore)
- Bandwidth-based load time estimates
"""

from .block_store import BlockStore, TransferRecord
from .load_estimate import (
    LLAMA_3_1_8B,
    NVLINK_BYTES_PER_S,
    PCIE_BYTES_PER_S,
    ParameterLayout,
    estimate_load_time,
    load_time_table,
    surviving_fraction_of_file,
)

__all__ = [
    # Residency
    "BlockStore",
    "TransferRecord",
    # Estimates
    "LLAMA_3_1_8B",
    "NVLINK_BYTES_PER_S",
    "PCIE_BYTES_PER_S",
    "ParameterLayout",
    "estimate_load_time",
    "load_time_table",
    "surviving_fraction_of_file",
]
