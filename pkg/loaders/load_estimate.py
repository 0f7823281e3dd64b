"""
Storage-to-memory transfer time estimates.

estimate_load_time() is plain arithmetic: bytes x surviving fraction over
bandwidth. ParameterLayout derives the surviving fraction of a depth-pruned
model from its parameter counts, with non-block weights always retained.
"""

import logging
from dataclasses import dataclass

import polars as pl

from errors import InvalidBandwidthError, ValidationError
from models.weights_io import WeightLayout

logger = logging.getLogger(__name__)

PCIE_BYTES_PER_S = 64e9
NVLINK_BYTES_PER_S = 600e9


@dataclass(frozen=True)
class ParameterLayout:
    """
    Parameter counts of a grouped-query-attention decoder with gated MLP.

    Args:
        name: Label used in tables
        vocab_size: Vocabulary size
        hidden: Model width
        kv_dim: Width of the key and value projections
        ffn_dim: MLP inner width (gate, up and down projections)
        n_blocks: Transformer blocks
        tied_embeddings: Output head shares the input embedding
    """

    name: str
    vocab_size: int
    hidden: int
    kv_dim: int
    ffn_dim: int
    n_blocks: int
    tied_embeddings: bool = False

    @property
    def block_params(self) -> int:
        attention = 2 * self.hidden * self.hidden + 2 * self.hidden * self.kv_dim
        mlp = 3 * self.hidden * self.ffn_dim
        norms = 2 * self.hidden
        return attention + mlp + norms

    @property
    def non_block_params(self) -> int:
        embeddings = self.vocab_size * self.hidden
        head = 0 if self.tied_embeddings else self.vocab_size * self.hidden
        return embeddings + head + self.hidden

    @property
    def total_params(self) -> int:
        return self.n_blocks * self.block_params + self.non_block_params

    def surviving_fraction(self, k: int) -> float:
        """Share of parameters left after omitting ``k`` blocks."""
        if not 0 <= k < self.n_blocks:
            raise ValidationError(f"k={k} out of range for {self.n_blocks} blocks")
        return (self.total_params - k * self.block_params) / self.total_params


LLAMA_3_1_8B = ParameterLayout(
    name="llama-3.1-8b",
    vocab_size=128_256,
    hidden=4096,
    kv_dim=1024,
    ffn_dim=14_336,
    n_blocks=32,
)


def surviving_fraction_of_file(layout: WeightLayout, k: int) -> float:
    """Same accounting for a PUDW file, in bytes."""
    if not 0 <= k < layout.config.n_blocks:
        raise ValidationError(f"k={k} out of range for {layout.config.n_blocks} blocks")
    return (layout.total_bytes - k * layout.extent(1).size) / layout.total_bytes


def estimate_load_time(
    model_bytes: float, surviving_fraction: float, bandwidth_bytes_per_s: float
) -> float:
    """
    Seconds to move the surviving weights over a link.

    Args:
        model_bytes: Size of the dense model
        surviving_fraction: Share of bytes that must be transferred, in (0, 1]
        bandwidth_bytes_per_s: Link bandwidth

    Returns:
        model_bytes * surviving_fraction / bandwidth_bytes_per_s

    Raises:
        InvalidBandwidthError: If bandwidth is not positive
        ValidationError: If bytes or fraction are out of range

    Example:
        >>> estimate_load_time(16e9, 1.0, PCIE_BYTES_PER_S)
        0.25
    """
    if bandwidth_bytes_per_s <= 0:
        raise InvalidBandwidthError(
            f"Bandwidth must be positive, got {bandwidth_bytes_per_s}"
        )
    if model_bytes <= 0:
        raise ValidationError(f"model_bytes must be positive, got {model_bytes}")
    if not 0 < surviving_fraction <= 1:
        raise ValidationError(
            f"surviving_fraction must be in (0, 1], got {surviving_fraction}"
        )
    return model_bytes * surviving_fraction / bandwidth_bytes_per_s


def load_time_table(
    model_bytes: float,
    fractions: dict[str, float],
    bandwidths: dict[str, float] | None = None,
) -> pl.DataFrame:
    """
    Estimated transfer times, one row per (method, link).

    Args:
        model_bytes: Size of the dense model
        fractions: Method name -> surviving fraction
        bandwidths: Link name -> bytes/s (PCIe and NVLink by default)
    """
    links = bandwidths or {"pcie": PCIE_BYTES_PER_S, "nvlink": NVLINK_BYTES_PER_S}
    rows = [
        {
            "method": method,
            "link": link,
            "fraction": fraction,
            "seconds": estimate_load_time(model_bytes, fraction, bandwidth),
        }
        for method, fraction in fractions.items()
        for link, bandwidth in links.items()
    ]
    return pl.DataFrame(rows)
