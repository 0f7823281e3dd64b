"""
Router checkpoint codec (``PUDR``).

Layout (integers u32 little-endian, tensors row-major float32 LE):

    magic "PUDR" | version | config length | config JSON (UTF-8, sorted keys)
    | pool hash (64 ASCII hex chars) | tensors in state_dict order

The config JSON echoes the encoder shape, m, the tensor names and the
training losses, so a file can be inspected without loading it.
"""

import json
import logging
from pathlib import Path

import numpy as np

from errors import WeightFormatError
from models.weights_io import FLOAT_BYTES, tensor_from_bytes, tensor_to_bytes
from routing.router_model import RouterArch, RouterModel

logger = logging.getLogger(__name__)

MAGIC = b"PUDR"
FORMAT_VERSION = 1
HASH_CHARS = 64


def _config_echo(router: RouterModel) -> bytes:
    echo = {
        "arch": router.arch.model_dump(mode="json"),
        "m": router.m,
        "tensors": [
            [name, list(tensor.shape)] for name, tensor in router.state_dict().items()
        ],
        "final_loss": router.final_loss,
        "epoch_losses": router.epoch_losses,
    }
    return json.dumps(echo, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize_router(router: RouterModel) -> bytes:
    config = _config_echo(router)
    binding = router.pool_binding.encode("ascii")
    if len(binding) != HASH_CHARS:
        raise WeightFormatError(f"Pool binding must be {HASH_CHARS} hex chars")
    parts = [
        MAGIC,
        np.asarray([FORMAT_VERSION, len(config)], dtype="<u4").tobytes(),
        config,
        binding,
    ]
    parts.extend(tensor_to_bytes(t) for t in router.state_dict().values())
    return b"".join(parts)


def save_router(router: RouterModel, path: str | Path) -> Path:
    """
    Write ``router`` to ``path`` in PUDR format.

    Returns:
        The written path
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = serialize_router(router)
    target.write_bytes(payload)
    logger.info(f"Saved router checkpoint to {target} ({len(payload):,} bytes)")
    return target


def deserialize_router(raw: bytes) -> RouterModel:
    """
    Rebuild a router from PUDR bytes.

    Raises:
        WeightFormatError: On bad magic, version, truncation, a malformed
            config block or tensor mismatch
    """
    if raw[:4] != MAGIC:
        raise WeightFormatError(f"Bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise WeightFormatError("Router checkpoint header truncated")
    version, config_len = np.frombuffer(raw[4:12], dtype="<u4").tolist()
    if version != FORMAT_VERSION:
        raise WeightFormatError(
            f"Unsupported router checkpoint version {version} (expected {FORMAT_VERSION})"
        )
    cursor = 12
    try:
        echo = json.loads(raw[cursor : cursor + config_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFormatError(f"Corrupt router config block: {e}") from e
    cursor += config_len
    binding = raw[cursor : cursor + HASH_CHARS].decode("ascii", errors="replace")
    cursor += HASH_CHARS

    try:
        router = RouterModel(RouterArch(**echo["arch"]), int(echo["m"]), binding)
        recorded = [name for name, _ in echo["tensors"]]
        final_loss = echo["final_loss"]
        epoch_losses = [float(x) for x in echo["epoch_losses"]]
    except (KeyError, TypeError, ValueError) as e:
        # pydantic and shape errors are ValueErrors too
        raise WeightFormatError(f"Malformed router config block: {e!r}") from e
    expected = router.state_dict()
    if recorded != list(expected):
        raise WeightFormatError("Checkpoint tensor names do not match the router shape")

    loaded = {}
    for name, tensor in expected.items():
        size = FLOAT_BYTES * tensor.numel()
        chunk = raw[cursor : cursor + size]
        if len(chunk) != size:
            raise WeightFormatError(f"Checkpoint truncated inside tensor '{name}'")
        loaded[name] = tensor_from_bytes(chunk, tuple(tensor.shape))
        cursor += size
    if cursor != len(raw):
        raise WeightFormatError(f"{len(raw) - cursor} trailing bytes after the last tensor")

    router.load_state_dict(loaded)
    router.final_loss = final_loss
    router.epoch_losses = epoch_losses
    router.eval()
    return router


def load_router(path: str | Path) -> RouterModel:
    source = Path(path)
    router = deserialize_router(source.read_bytes())
    logger.info(f"Loaded router checkpoint from {source} ({router.m} outputs)")
    return router
