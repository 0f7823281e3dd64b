"""
Prompt encoder with a linear loss-prediction head.

The encoder is small and trained from scratch: learned token embeddings,
zero or more pre-norm self-attention layers, then a masked mean pool over the
prompt tokens. The head maps the pooled vector to one predicted loss per
omission set in the bound candidate pool.
"""

import logging
from collections.abc import Sequence

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from errors import ConfigError, InsufficientLengthError, ShapeError, VocabularyError

logger = logging.getLogger(__name__)

DEFAULT_MAX_PROMPT_LEN = 512


class RouterArch(BaseModel):
    """Router encoder shape."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int | None = Field(default=None, gt=0)
    embed_dim: int = Field(default=32, gt=0)
    n_layers: int = Field(default=1, ge=0)
    n_heads: int = Field(default=2, gt=0)
    ff_dim: int = Field(default=64, gt=0)
    max_prompt_len: int = Field(default=DEFAULT_MAX_PROMPT_LEN, gt=0)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "RouterArch":
        if self.n_layers and self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) is not divisible by "
                f"n_heads ({self.n_heads})"
            )
        return self

    def with_vocab(self, vocab_size: int) -> "RouterArch":
        """Fill in the vocabulary size when the config left it unset."""
        if self.vocab_size is not None:
            return self
        return self.model_copy(update={"vocab_size": vocab_size})


class RouterModel(nn.Module):
    """
    Maps a prompt to an m-vector of predicted losses.

    Attributes:
        pool_binding: Fingerprint of the candidate pool the head predicts over
        route_calls: Number of routing decisions made with this router
        final_loss: Training loss of the last epoch (None until trained)
    """

    def __init__(self, arch: RouterArch, m: int, pool_binding: str) -> None:
        super().__init__()
        if m < 1:
            raise ShapeError(f"Router head needs m >= 1 outputs, got {m}")
        if arch.vocab_size is None:
            raise ConfigError("Router vocab_size is unset; call RouterArch.with_vocab()")
        self.arch = arch
        self.vocab_size: int = arch.vocab_size
        self.m = m
        self.pool_binding = pool_binding
        self.route_calls = 0
        self.final_loss: float | None = None
        self.epoch_losses: list[float] = []

        self.pad_id = self.vocab_size
        self.embedding = nn.Embedding(
            self.vocab_size + 1, arch.embed_dim, padding_idx=self.pad_id
        )
        self.encoder: nn.TransformerEncoder | None = None
        if arch.n_layers > 0:
            layer = nn.TransformerEncoderLayer(
                d_model=arch.embed_dim,
                nhead=arch.n_heads,
                dim_feedforward=arch.ff_dim,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            self.encoder = nn.TransformerEncoder(
                layer, num_layers=arch.n_layers, enable_nested_tensor=False
            )
        self.head = nn.Linear(arch.embed_dim, m)

    def encode_prompts(
        self, prompts: Sequence[Sequence[int]]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Pad prompts into an id matrix and a validity mask.

        Prompts longer than ``max_prompt_len`` keep their earliest tokens.

        Returns:
            (ids [B, L] long, mask [B, L] bool with True on real tokens)

        Raises:
            InsufficientLengthError: If a prompt is empty
            VocabularyError: If a token id is outside the router vocabulary
        """
        limit = self.arch.max_prompt_len
        clipped = [list(p)[:limit] for p in prompts]
        if any(len(p) == 0 for p in clipped):
            raise InsufficientLengthError("Router prompts must contain at least one token")
        bad = [t for p in clipped for t in p if not 0 <= t < self.vocab_size]
        if bad:
            raise VocabularyError(
                f"Token ids {bad[:5]} outside router vocabulary of size "
                f"{self.vocab_size}"
            )
        width = max(len(p) for p in clipped)
        ids = torch.full((len(clipped), width), self.pad_id, dtype=torch.long)
        mask = torch.zeros((len(clipped), width), dtype=torch.bool)
        for row, prompt in enumerate(clipped):
            ids[row, : len(prompt)] = torch.tensor(prompt, dtype=torch.long)
            mask[row, : len(prompt)] = True
        return ids, mask

    def pooled(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embedding(ids)
        if self.encoder is not None:
            x = self.encoder(x, src_key_padding_mask=~mask)
        weights = mask.to(x.dtype).unsqueeze(-1)
        return (x * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.head(self.pooled(ids, mask))

    def predict_many(self, prompts: Sequence[Sequence[int]]) -> torch.Tensor:
        """Predicted loss vectors [B, m] for a batch of prompts."""
        self.eval()
        ids, mask = self.encode_prompts(prompts)
        with torch.no_grad():
            return self(ids, mask)

    def predict(self, prompt: Sequence[int]) -> torch.Tensor:
        return self.predict_many([prompt])[0]


def build_router(arch: RouterArch, m: int, pool_binding: str, seed: int) -> RouterModel:
    """
    Initialise a router deterministically from ``seed``.

    The global RNG state is restored afterwards.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        router = RouterModel(arch, m, pool_binding)
    n_params = sum(p.numel() for p in router.parameters())
    logger.info(
        f"Built router: {arch.n_layers} encoder layers, width {arch.embed_dim}, "
        f"{m} outputs, {n_params:,} parameters"
    )
    return router
