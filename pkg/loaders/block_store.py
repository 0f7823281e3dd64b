"""
Block residency over a weight file.

The non-block weights (embeddings, final norm, head) are read once and stay
resident. Transformer blocks are read on demand: preparing an omission set
first evicts the blocks that set omits, then reads only the surviving blocks
that are not already resident. Blocks outside both the old and new omission
sets are reused, so consecutive prompts that route to similar sets transfer
little or nothing.
"""

import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

from errors import BlockLoadError, ConfigError, StorageError
from models.transformer import OmissionSet, PrunedView, TransformerBlock
from models.weights_io import WeightLayout, open_layout, read_block, read_frame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransferRecord:
    """What one prepare() call moved."""

    omission: OmissionSet
    loaded: tuple[int, ...]
    evicted: tuple[int, ...]
    bytes_loaded: int
    load_time: float


class BlockStore:
    """
    Lazily loaded blocks of one PUDW weight file.

    Args:
        path: Weight file
        memory_cap: Maximum resident blocks (normally d - k); None disables

    Example:
        >>> store = BlockStore("out/model.pudw", memory_cap=25)
        >>> record = store.prepare(OmissionSet.of([3, 9, 12, 17, 20, 26, 30]))
        >>> view = store.view(record.omission)
    """

    def __init__(self, path: str | Path, memory_cap: int | None = None) -> None:
        self.path = Path(path)
        self.layout: WeightLayout = open_layout(self.path)
        self.config = self.layout.config
        if memory_cap is not None and memory_cap < 1:
            raise ConfigError(f"memory_cap must be >= 1, got {memory_cap}")
        self.memory_cap = memory_cap
        with self.path.open("rb") as fh:
            self.frame = read_frame(fh, self.layout)
        self.resident: dict[int, TransformerBlock] = {}
        self.bytes_transferred_total = 0
        self.peak_resident = 0
        self.history: list[TransferRecord] = []
        self._fingerprint: str | None = None
        logger.info(
            f"Opened block store {self.path}: {self.config.n_blocks} blocks of "
            f"{self.layout.extent(1).size:,} bytes"
        )

    @property
    def n_blocks(self) -> int:
        return self.config.n_blocks

    @property
    def loaded_blocks(self) -> frozenset[int]:
        return frozenset(self.resident)

    def fingerprint(self) -> str:
        """SHA-256 of the backing file; equals model_fingerprint() of its model."""
        if self._fingerprint is None:
            with self.path.open("rb") as fh:
                self._fingerprint = hashlib.file_digest(fh, "sha256").hexdigest()
        return self._fingerprint

    def block_bytes(self, block_index: int) -> int:
        return self.layout.extent(block_index).size

    def plan(self, omission: OmissionSet) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """
        Blocks that prepare(omission) would load and evict.

        Returns:
            (to_load, to_evict), both ascending
        """
        survivors = omission.survivors(self.n_blocks)
        to_evict = tuple(i for i in omission if i in self.resident)
        to_load = tuple(i for i in survivors if i not in self.resident)
        return to_load, to_evict

    def _read(self, fh: BinaryIO, block_index: int) -> TransformerBlock:
        try:
            return read_block(fh, self.layout, block_index)
        except OSError as e:
            logger.error(f"Reading block {block_index} from {self.path} failed: {e}")
            raise BlockLoadError(block_index, str(e)) from e

    def prepare(self, omission: OmissionSet) -> TransferRecord:
        """
        Make exactly the surviving blocks of ``omission`` resident.

        Raises:
            InvalidOmissionError: If ``omission`` does not fit the model
            ConfigError: If the survivors exceed the memory cap
            BlockLoadError: If a block read fails (names the block)
        """
        survivors = omission.survivors(self.n_blocks)
        if self.memory_cap is not None and len(survivors) > self.memory_cap:
            raise ConfigError(
                f"{len(survivors)} surviving blocks exceed memory_cap {self.memory_cap}"
            )
        to_load, to_evict = self.plan(omission)
        for i in to_evict:
            del self.resident[i]

        started = time.perf_counter()
        loaded: list[int] = []
        loaded_bytes = 0
        try:
            if to_load:
                with self.path.open("rb") as fh:
                    for i in to_load:
                        self.resident[i] = self._read(fh, i)
                        loaded.append(i)
                        loaded_bytes += self.block_bytes(i)
                        self.peak_resident = max(self.peak_resident, len(self.resident))
        finally:
            # Blocks read before a failure stay resident and are accounted for.
            load_time = time.perf_counter() - started
            self.bytes_transferred_total += loaded_bytes
            record = TransferRecord(
                omission, tuple(loaded), to_evict, loaded_bytes, load_time
            )
            self.history.append(record)
        logger.debug(
            f"Prepared {omission}: loaded {loaded}, evicted {list(to_evict)}, "
            f"{loaded_bytes:,} bytes in {load_time:.4f}s"
        )
        return record

    def view(self, omission: OmissionSet) -> PrunedView:
        """
        Pruned view over resident blocks.

        Raises:
            StorageError: If a surviving block is not resident
        """
        survivors = omission.survivors(self.n_blocks)
        missing = [i for i in survivors if i not in self.resident]
        if missing:
            raise StorageError(f"Blocks {missing} are not resident; call prepare() first")
        return PrunedView(
            config=self.config,
            frame=self.frame,
            blocks=tuple(self.resident[i] for i in survivors),
        )

    def load_view(self, omission: OmissionSet) -> tuple[PrunedView, TransferRecord]:
        record = self.prepare(omission)
        return self.view(omission), record
