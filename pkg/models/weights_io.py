"""
Binary weight file codec (``PUDW``).

Layout (all integers u32 little-endian, all tensors row-major float32 LE,
no padding):

    magic "PUDW" | version | vocab_size d_model d_ff n_blocks n_heads
    pos_kind max_seq_len | token_embedding | pos_embedding (learned only)
    | block 1 .. block d | final_norm | output_head

Each block is ``attn_norm wq wk wv wo ffn_norm w_up w_down``. Block byte
offsets are pure arithmetic on the header, which is what lets the block
store read single blocks without touching the rest of the file.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

from errors import WeightFormatError
from models.transformer import (
    ModelConfig,
    ModelFrame,
    PositionalKind,
    TransformerBlock,
    TransformerModel,
)

logger = logging.getLogger(__name__)

MAGIC = b"PUDW"
FORMAT_VERSION = 1
HEADER_FIELDS = (
    "vocab_size",
    "d_model",
    "d_ff",
    "n_blocks",
    "n_heads",
    "pos_kind",
    "max_seq_len",
)
HEADER_BYTES = len(MAGIC) + 4 + 4 * len(HEADER_FIELDS)
FLOAT_BYTES = 4


@dataclass(frozen=True)
class BlockExtent:
    """Where one block lives inside the weight file."""

    block_index: int
    offset: int
    size: int


@dataclass(frozen=True)
class WeightLayout:
    """Byte layout of a weight file, derived from its header alone."""

    config: ModelConfig
    prefix_offset: int
    prefix_size: int
    blocks: tuple[BlockExtent, ...]
    suffix_offset: int
    suffix_size: int

    @property
    def total_bytes(self) -> int:
        return self.suffix_offset + self.suffix_size

    @property
    def block_bytes(self) -> int:
        return sum(extent.size for extent in self.blocks)

    def extent(self, block_index: int) -> BlockExtent:
        return self.blocks[block_index - 1]


def _numel(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape)) if shape else 1


def _prefix_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    shapes = [(config.vocab_size, config.d_model)]
    if config.pos_kind == PositionalKind.LEARNED:
        shapes.append((config.max_seq_len, config.d_model))
    return shapes


def _suffix_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    return [(config.d_model,), (config.d_model, config.vocab_size)]


def block_size_bytes(config: ModelConfig) -> int:
    d, f = config.d_model, config.d_ff
    return FLOAT_BYTES * (2 * d + 4 * d * d + 2 * d * f)


def layout_for(config: ModelConfig) -> WeightLayout:
    """Compute block extents and frame offsets for ``config``."""
    prefix_size = FLOAT_BYTES * sum(_numel(s) for s in _prefix_shapes(config))
    block_size = block_size_bytes(config)
    first_block = HEADER_BYTES + prefix_size
    blocks = tuple(
        BlockExtent(i + 1, first_block + i * block_size, block_size)
        for i in range(config.n_blocks)
    )
    suffix_offset = first_block + config.n_blocks * block_size
    suffix_size = FLOAT_BYTES * sum(_numel(s) for s in _suffix_shapes(config))
    return WeightLayout(
        config=config,
        prefix_offset=HEADER_BYTES,
        prefix_size=prefix_size,
        blocks=blocks,
        suffix_offset=suffix_offset,
        suffix_size=suffix_size,
    )


def encode_header(config: ModelConfig) -> bytes:
    values = [FORMAT_VERSION] + [int(getattr(config, name)) for name in HEADER_FIELDS]
    return MAGIC + np.asarray(values, dtype="<u4").tobytes()


def decode_header(raw: bytes) -> ModelConfig:
    """
    Parse the fixed-size header.

    Raises:
        WeightFormatError: On short input, wrong magic or unsupported version
    """
    if len(raw) < HEADER_BYTES:
        raise WeightFormatError(f"Header truncated: {len(raw)} of {HEADER_BYTES} bytes")
    if raw[:4] != MAGIC:
        raise WeightFormatError(f"Bad magic {raw[:4]!r}, expected {MAGIC!r}")
    values = np.frombuffer(raw[4:HEADER_BYTES], dtype="<u4").tolist()
    version, fields = values[0], values[1:]
    if version != FORMAT_VERSION:
        raise WeightFormatError(
            f"Unsupported weight format version {version} (expected {FORMAT_VERSION})"
        )
    params = dict(zip(HEADER_FIELDS, fields, strict=True))
    try:
        params["pos_kind"] = PositionalKind(params["pos_kind"])
        return ModelConfig(**params)
    except ValueError as e:
        raise WeightFormatError(f"Invalid header values {params}: {e}") from e


def tensor_to_bytes(tensor: torch.Tensor) -> bytes:
    array = tensor.detach().cpu().numpy()
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, shape: tuple[int, ...]) -> torch.Tensor:
    array = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)
    if not np.isfinite(array).all():
        raise WeightFormatError(f"Non-finite values in tensor of shape {shape}")
    return torch.from_numpy(array.copy())


def _split_tensors(
    buf: bytes, shapes: list[tuple[int, ...]]
) -> list[torch.Tensor]:
    tensors, cursor = [], 0
    for shape in shapes:
        size = FLOAT_BYTES * _numel(shape)
        tensors.append(tensor_from_bytes(buf[cursor : cursor + size], shape))
        cursor += size
    return tensors


def block_to_bytes(block: TransformerBlock) -> bytes:
    return b"".join(tensor_to_bytes(t) for _, t in block.tensors())


def block_from_bytes(buf: bytes, config: ModelConfig, block_index: int) -> TransformerBlock:
    block = TransformerBlock(config, block_index)
    names_shapes = block.tensor_shapes()
    tensors = _split_tensors(buf, [shape for _, shape in names_shapes])
    for (name, _), tensor in zip(names_shapes, tensors, strict=True):
        getattr(block, name).copy_(tensor)
    return block


def serialize_model(model: TransformerModel) -> bytes:
    """Encode ``model`` into PUDW bytes."""
    frame = model.frame
    parts = [encode_header(model.config), tensor_to_bytes(frame.token_embedding)]
    if model.config.pos_kind == PositionalKind.LEARNED:
        parts.append(tensor_to_bytes(frame.pos_embedding))
    parts.extend(block_to_bytes(block) for block in model.blocks)
    parts.append(tensor_to_bytes(frame.final_norm))
    parts.append(tensor_to_bytes(frame.output_head))
    return b"".join(parts)


def model_fingerprint(model: TransformerModel) -> str:
    """SHA-256 hex digest of the serialised model."""
    return hashlib.sha256(serialize_model(model)).hexdigest()


def save_model(model: TransformerModel, path: str | Path) -> Path:
    """
    Write ``model`` to ``path`` in PUDW format.

    Args:
        model: Model to persist
        path: Destination file (parent directories are created)

    Returns:
        The written path
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = serialize_model(model)
    with target.open("wb") as fh:
        fh.write(payload)
    logger.info(
        f"Saved {model.n_blocks}-block model to {target} ({len(payload):,} bytes)"
    )
    return target


def read_header(fh: BinaryIO) -> ModelConfig:
    fh.seek(0)
    return decode_header(fh.read(HEADER_BYTES))


def read_exact(fh: BinaryIO, offset: int, size: int) -> bytes:
    fh.seek(offset)
    buf = fh.read(size)
    if len(buf) != size:
        raise WeightFormatError(
            f"Unexpected end of file at offset {offset}: wanted {size} bytes, "
            f"got {len(buf)}"
        )
    return buf


def read_frame(fh: BinaryIO, layout: WeightLayout) -> ModelFrame:
    """Read the non-block weights (embeddings, final norm, head)."""
    config = layout.config
    frame = ModelFrame(config)
    prefix = _split_tensors(
        read_exact(fh, layout.prefix_offset, layout.prefix_size), _prefix_shapes(config)
    )
    frame.token_embedding.copy_(prefix[0])
    if config.pos_kind == PositionalKind.LEARNED:
        frame.pos_embedding.copy_(prefix[1])
    final_norm, output_head = _split_tensors(
        read_exact(fh, layout.suffix_offset, layout.suffix_size), _suffix_shapes(config)
    )
    frame.final_norm.copy_(final_norm)
    frame.output_head.copy_(output_head)
    return frame


def read_block(fh: BinaryIO, layout: WeightLayout, block_index: int) -> TransformerBlock:
    extent = layout.extent(block_index)
    return block_from_bytes(
        read_exact(fh, extent.offset, extent.size), layout.config, block_index
    )


def open_layout(path: str | Path) -> WeightLayout:
    """
    Read the header of ``path`` and check the file size matches it.

    Raises:
        WeightFormatError: If the header is invalid or the size disagrees
    """
    source = Path(path)
    with source.open("rb") as fh:
        config = read_header(fh)
    layout = layout_for(config)
    actual = source.stat().st_size
    if actual != layout.total_bytes:
        raise WeightFormatError(
            f"{source} is {actual:,} bytes; header implies {layout.total_bytes:,}"
        )
    return layout


def load_model(path: str | Path) -> TransformerModel:
    """
    Load a complete model from a PUDW file.

    Args:
        path: Weight file

    Returns:
        TransformerModel with every block resident
    """
    layout = open_layout(path)
    model = TransformerModel(layout.config)
    with Path(path).open("rb") as fh:
        model.frame = read_frame(fh, layout)
        for i in range(1, layout.config.n_blocks + 1):
            model.blocks[i - 1] = read_block(fh, layout, i)
    logger.info(f"Loaded {layout.config.n_blocks}-block model from {path}")
    return model
