"""
Decoder-only transformer with per-call block omission.

Blocks are pre-norm residual units (attention followed by feed-forward).
Omitting a block skips the whole residual unit, its norms included, so a
pruned view is just the ordered tuple of surviving blocks over the shared
embedding / head weights. Nothing is copied when a view is built.

Weights are kept in ``x @ W`` orientation (``wq`` is [d_model x d_model],
``w_up`` is [d_model x d_ff]) which is also the on-disk layout.
"""

import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from enum import IntEnum

import torch
import torch.nn.functional as F
from torch import nn

from errors import (
    EmptyModelError,
    InsufficientLengthError,
    InvalidOmissionError,
    ShapeError,
    ValidationError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

TokenSequence = tuple[int, ...]


class PositionalKind(IntEnum):
    """How token positions enter the residual stream."""

    LEARNED = 0
    ROTARY = 1


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape hyperparameters of a TransformerModel.

    Args:
        vocab_size: Number of token ids
        d_model: Hidden width
        d_ff: Feed-forward width (must be >= d_model)
        n_blocks: Number of transformer blocks (d)
        n_heads: Attention heads; d_model must divide evenly
        pos_kind: Learned absolute table or rotary embedding
        max_seq_len: Longest sequence the positional table covers
        norm_eps: RMS norm epsilon
    """

    vocab_size: int
    d_model: int
    d_ff: int
    n_blocks: int
    n_heads: int = 1
    pos_kind: PositionalKind = PositionalKind.LEARNED
    max_seq_len: int = 512
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "d_ff", "n_blocks", "n_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_ff < self.d_model:
            raise ShapeError(f"d_ff ({self.d_ff}) must be >= d_model ({self.d_model})")
        if self.d_model % self.n_heads:
            raise ShapeError(
                f"d_model ({self.d_model}) is not divisible by n_heads ({self.n_heads})"
            )
        if self.pos_kind == PositionalKind.ROTARY and self.head_dim % 2:
            raise ShapeError(f"Rotary positions need an even head_dim, got {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def rms_norm(x: torch.Tensor, scale: torch.Tensor, eps: float) -> torch.Tensor:
    """Root-mean-square normalisation over the last axis."""
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * scale


def apply_rotary(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """
    Rotate query/key features by their absolute position.

    Args:
        x: Tensor of shape [T, n_heads, head_dim]
        positions: Absolute positions, shape [T]

    Returns:
        Rotated tensor with the same shape as ``x``
    """
    half = x.shape[-1] // 2
    inv_freq = 1.0 / (10000.0 ** (torch.arange(half, dtype=torch.float32) / half))
    angles = positions.to(torch.float32)[:, None] * inv_freq[None, :]
    cos = angles.cos()[:, None, :]
    sin = angles.sin()[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


@dataclass
class LayerCache:
    """Keys and values already computed for one block."""

    keys: torch.Tensor | None = None
    values: torch.Tensor | None = None

    def extend(
        self, keys: torch.Tensor, values: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if self.keys is None or self.values is None:
            self.keys, self.values = keys, values
        else:
            self.keys = torch.cat([self.keys, keys], dim=0)
            self.values = torch.cat([self.values, values], dim=0)
        return self.keys, self.values


@dataclass
class DecodeCache:
    """Per-block key/value cache for one decode call over one view."""

    layers: list[LayerCache] = field(default_factory=list)
    length: int = 0

    @classmethod
    def for_blocks(cls, n_blocks: int) -> "DecodeCache":
        return cls(layers=[LayerCache() for _ in range(n_blocks)])


class TransformerBlock(nn.Module):
    """One pre-norm residual block: attention then feed-forward."""

    TENSOR_ORDER = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_up", "w_down")

    def __init__(self, config: ModelConfig, block_index: int) -> None:
        super().__init__()
        self.config = config
        self.block_index = block_index
        d, f = config.d_model, config.d_ff
        self.register_buffer("attn_norm", torch.ones(d))
        self.register_buffer("wq", torch.zeros(d, d))
        self.register_buffer("wk", torch.zeros(d, d))
        self.register_buffer("wv", torch.zeros(d, d))
        self.register_buffer("wo", torch.zeros(d, d))
        self.register_buffer("ffn_norm", torch.ones(d))
        self.register_buffer("w_up", torch.zeros(d, f))
        self.register_buffer("w_down", torch.zeros(f, d))

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        d, f = self.config.d_model, self.config.d_ff
        shapes = {
            "attn_norm": (d,),
            "wq": (d, d),
            "wk": (d, d),
            "wv": (d, d),
            "wo": (d, d),
            "ffn_norm": (d,),
            "w_up": (d, f),
            "w_down": (f, d),
        }
        return [(name, shapes[name]) for name in self.TENSOR_ORDER]

    def tensors(self) -> list[tuple[str, torch.Tensor]]:
        return [(name, getattr(self, name)) for name in self.TENSOR_ORDER]

    def attention(
        self,
        h: torch.Tensor,
        positions: torch.Tensor,
        cache: LayerCache | None = None,
    ) -> torch.Tensor:
        cfg = self.config
        t = h.shape[0]
        q = (h @ self.wq).view(t, cfg.n_heads, cfg.head_dim)
        k = (h @ self.wk).view(t, cfg.n_heads, cfg.head_dim)
        v = (h @ self.wv).view(t, cfg.n_heads, cfg.head_dim)
        if cfg.pos_kind == PositionalKind.ROTARY:
            q = apply_rotary(q, positions)
            k = apply_rotary(k, positions)
        if cache is not None:
            k, v = cache.extend(k, v)

        scores = torch.einsum("thd,shd->hts", q, k) / math.sqrt(cfg.head_dim)
        key_positions = torch.arange(k.shape[0])
        future = key_positions[None, :] > positions[:, None]
        scores = scores.masked_fill(future[None, :, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        mixed = torch.einsum("hts,shd->thd", weights, v).reshape(t, cfg.d_model)
        return mixed @ self.wo

    def feed_forward(self, h: torch.Tensor) -> torch.Tensor:
        return F.gelu(h @ self.w_up) @ self.w_down

    def forward(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        cache: LayerCache | None = None,
    ) -> torch.Tensor:
        eps = self.config.norm_eps
        x = x + self.attention(rms_norm(x, self.attn_norm, eps), positions, cache)
        return x + self.feed_forward(rms_norm(x, self.ffn_norm, eps))


class ModelFrame(nn.Module):
    """Non-block weights: embeddings, final norm and output head."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        d, v = config.d_model, config.vocab_size
        pos_rows = config.max_seq_len if config.pos_kind == PositionalKind.LEARNED else 0
        self.register_buffer("token_embedding", torch.zeros(v, d))
        self.register_buffer("pos_embedding", torch.zeros(pos_rows, d))
        self.register_buffer("final_norm", torch.ones(d))
        self.register_buffer("output_head", torch.zeros(d, v))

    def embed(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        x = self.token_embedding[tokens]
        if self.config.pos_kind == PositionalKind.LEARNED:
            x = x + self.pos_embedding[positions]
        return x

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return rms_norm(x, self.final_norm, self.config.norm_eps) @ self.output_head


class TransformerModel(nn.Module):
    """The dense model: a frame plus ``n_blocks`` ordered blocks."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.frame = ModelFrame(config)
        self.blocks = nn.ModuleList(
            TransformerBlock(config, index) for index in range(1, config.n_blocks + 1)
        )

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def token_embedding(self) -> torch.Tensor:
        return self.frame.token_embedding

    @property
    def output_head(self) -> torch.Tensor:
        return self.frame.output_head

    @property
    def final_norm(self) -> torch.Tensor:
        return self.frame.final_norm

    def block(self, index: int) -> TransformerBlock:
        """Return block ``index`` (1-based)."""
        return self.blocks[index - 1]

    def check_finite(self) -> None:
        for name, tensor in self.state_dict().items():
            if not torch.isfinite(tensor).all():
                raise ValidationError(f"Non-finite values in weight '{name}'")


@dataclass(frozen=True, order=True)
class OmissionSet:
    """Sorted, duplicate-free set of 1-based block indices to drop."""

    indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if any(i < 1 for i in self.indices):
            raise InvalidOmissionError(f"Block indices are 1-based, got {self.indices}")
        if any(a >= b for a, b in zip(self.indices, self.indices[1:], strict=False)):
            raise InvalidOmissionError(
                f"Omission indices must be strictly increasing, got {self.indices}"
            )

    @classmethod
    def of(cls, indices: Iterable[int]) -> "OmissionSet":
        values = [int(i) for i in indices]
        if len(set(values)) != len(values):
            raise InvalidOmissionError(f"Duplicate block index in {values}")
        return cls(tuple(sorted(values)))

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    def __contains__(self, index: object) -> bool:
        return index in self.indices

    def __str__(self) -> str:
        return "{" + ",".join(str(i) for i in self.indices) + "}"

    def with_block(self, index: int) -> "OmissionSet":
        return OmissionSet.of((*self.indices, index))

    def without_block(self, index: int) -> "OmissionSet":
        return OmissionSet(tuple(i for i in self.indices if i != index))

    def validate_for(self, n_blocks: int) -> None:
        out_of_range = [i for i in self.indices if i > n_blocks]
        if out_of_range:
            raise InvalidOmissionError(
                f"Block indices {out_of_range} out of range for a {n_blocks}-block model"
            )
        if len(self.indices) >= n_blocks:
            raise EmptyModelError(
                f"Omitting {len(self.indices)} of {n_blocks} blocks leaves no block"
            )

    def survivors(self, n_blocks: int) -> tuple[int, ...]:
        self.validate_for(n_blocks)
        return tuple(i for i in range(1, n_blocks + 1) if i not in self.indices)


@dataclass(frozen=True)
class PrunedView:
    """Ordered surviving blocks over shared frame weights."""

    config: ModelConfig
    frame: ModelFrame
    blocks: tuple[TransformerBlock, ...]

    def __post_init__(self) -> None:
        if not self.blocks:
            raise EmptyModelError("A pruned view needs at least one block")

    @property
    def block_indices(self) -> tuple[int, ...]:
        return tuple(block.block_index for block in self.blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def apply_omission(model: TransformerModel, omission: OmissionSet) -> PrunedView:
    """
    Build a view of ``model`` without the blocks in ``omission``.

    Args:
        model: Dense model; its weights are shared, never copied
        omission: Blocks to drop (1-based)

    Returns:
        PrunedView over the d - |b| surviving blocks in original order

    Raises:
        InvalidOmissionError: If an index is outside 1..d
        EmptyModelError: If every block would be omitted
    """
    survivors = omission.survivors(model.n_blocks)
    return PrunedView(
        config=model.config,
        frame=model.frame,
        blocks=tuple(model.block(i) for i in survivors),
    )


def dense_view(model: TransformerModel) -> PrunedView:
    return apply_omission(model, OmissionSet())


def validate_tokens(
    config: ModelConfig, tokens: Sequence[int], offset: int = 0
) -> None:
    if len(tokens) == 0:
        raise InsufficientLengthError("Token sequence is empty")
    bad = [t for t in tokens if not 0 <= t < config.vocab_size]
    if bad:
        raise VocabularyError(
            f"Token ids {bad[:5]} outside vocabulary of size {config.vocab_size}"
        )
    if (
        config.pos_kind == PositionalKind.LEARNED
        and offset + len(tokens) > config.max_seq_len
    ):
        raise ShapeError(
            f"Sequence length {offset + len(tokens)} exceeds max_seq_len "
            f"{config.max_seq_len}"
        )


def _forward_logits(
    view: PrunedView,
    tokens: Sequence[int],
    offset: int = 0,
    cache: DecodeCache | None = None,
) -> torch.Tensor:
    validate_tokens(view.config, tokens, offset)
    ids = torch.tensor(list(tokens), dtype=torch.long)
    positions = torch.arange(offset, offset + len(tokens))
    with torch.inference_mode():
        x = view.frame.embed(ids, positions)
        for i, block in enumerate(view.blocks):
            x = block(x, positions, cache.layers[i] if cache is not None else None)
        if cache is not None:
            cache.length = offset + len(tokens)
        return view.frame.logits(x)


def forward_logprobs(view: PrunedView, z: Sequence[int]) -> torch.Tensor:
    """
    Per-position next-token log-probabilities.

    Args:
        view: Pruned (or dense) view to run
        z: Token ids, length T >= 1

    Returns:
        Float32 tensor [T, vocab_size]; row i is log p(. | z_1..z_{i+1})
        in 1-based terms, i.e. the distribution of the token after z[i]

    Raises:
        VocabularyError: If a token id is outside the vocabulary
    """
    return torch.log_softmax(_forward_logits(view, z), dim=-1)


def _position_budget(config: ModelConfig, prompt_len: int, max_new: int) -> int:
    if config.pos_kind != PositionalKind.LEARNED:
        return max_new
    room = config.max_seq_len - prompt_len + 1
    if room < max_new:
        logger.warning(
            f"Generation capped at {room} of {max_new} tokens by max_seq_len "
            f"{config.max_seq_len}"
        )
    return min(room, max_new)


def iter_greedy_tokens(
    view: PrunedView,
    prompt: Sequence[int],
    max_new: int,
    use_cache: bool = False,
) -> Iterator[int]:
    """
    Yield argmax continuation tokens one at a time.

    The first yielded token marks the end of pre-fill. Ties resolve to the
    lowest token id (``torch.argmax`` returns the first maximum). With
    learned positions, generation stops early once the next step would need
    a position beyond ``max_seq_len``; the last token yielded is never fed
    back, so at most ``max_seq_len - len(prompt) + 1`` tokens come out.
    """
    if max_new < 0:
        raise ValidationError(f"max_new must be >= 0, got {max_new}")
    if max_new == 0:
        return
    validate_tokens(view.config, prompt)
    max_new = _position_budget(view.config, len(prompt), max_new)
    tokens = list(prompt)
    if not use_cache:
        for _ in range(max_new):
            row = torch.log_softmax(_forward_logits(view, tokens)[-1], dim=-1)
            next_token = int(torch.argmax(row))
            tokens.append(next_token)
            yield next_token
        return

    cache = DecodeCache.for_blocks(view.n_blocks)
    step_tokens, offset = tokens, 0
    for _ in range(max_new):
        logits = _forward_logits(view, step_tokens, offset, cache)
        row = torch.log_softmax(logits[-1], dim=-1)
        next_token = int(torch.argmax(row))
        offset += len(step_tokens)
        step_tokens = [next_token]
        yield next_token


def greedy_decode(
    view: PrunedView,
    prompt: Sequence[int],
    max_new: int,
    use_cache: bool = False,
) -> TokenSequence:
    """
    Append up to ``max_new`` greedy tokens to ``prompt``.

    Args:
        view: Model view to decode with
        prompt: Prompt token ids
        max_new: Number of tokens to generate (0 returns the prompt)
        use_cache: Reuse keys/values between steps; yields the same tokens

    Returns:
        Prompt followed by the generated tokens
    """
    validate_tokens(view.config, prompt)
    generated = tuple(iter_greedy_tokens(view, prompt, max_new, use_cache))
    return tuple(prompt) + generated
