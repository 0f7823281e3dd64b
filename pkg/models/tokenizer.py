"""
Fallback tokenizers.

Three kinds, chosen by config:
- ids: whitespace-separated integer token ids ("3 17 5")
- whitespace: whitespace-split words looked up in a vocabulary file
- bytes: UTF-8 bytes, one token per byte (needs vocab_size >= 256)
"""

import logging
from enum import StrEnum
from pathlib import Path
from typing import Protocol

from errors import ConfigError, VocabularyError

logger = logging.getLogger(__name__)


class TokenizerKind(StrEnum):
    IDS = "ids"
    WHITESPACE = "whitespace"
    BYTES = "bytes"


class Tokenizer(Protocol):
    def encode(self, text: str) -> tuple[int, ...]: ...

    def decode(self, tokens: tuple[int, ...]) -> str: ...


class IdTokenizer:
    """Text is already a list of integer ids."""

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(int(piece) for piece in text.split())
        except ValueError as e:
            raise VocabularyError(f"Expected integer token ids, got {text!r}") from e

    def decode(self, tokens: tuple[int, ...]) -> str:
        return " ".join(str(t) for t in tokens)


class ByteTokenizer:
    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(text.encode("utf-8"))

    def decode(self, tokens: tuple[int, ...]) -> str:
        return bytes(tokens).decode("utf-8", errors="replace")


class WhitespaceTokenizer:
    """Word-level tokenizer over a fixed vocabulary (one word per line)."""

    def __init__(self, vocab: list[str]) -> None:
        self.vocab = vocab
        self.ids = {word: i for i, word in enumerate(vocab)}

    @classmethod
    def from_file(cls, path: str | Path) -> "WhitespaceTokenizer":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([w.strip() for w in words if w.strip()])

    def encode(self, text: str) -> tuple[int, ...]:
        unknown = [w for w in text.split() if w not in self.ids]
        if unknown:
            raise VocabularyError(f"Words not in vocabulary: {unknown[:5]}")
        return tuple(self.ids[w] for w in text.split())

    def decode(self, tokens: tuple[int, ...]) -> str:
        return " ".join(self.vocab[t] for t in tokens)


def build_tokenizer(kind: TokenizerKind | str, vocab_path: Path | None = None) -> Tokenizer:
    """
    Construct the tokenizer named by ``kind``.

    Args:
        kind: One of ids / whitespace / bytes
        vocab_path: Vocabulary file, required for whitespace

    Returns:
        Tokenizer instance

    Raises:
        ConfigError: If whitespace is requested without a vocabulary
    """
    match TokenizerKind(kind):
        case TokenizerKind.IDS:
            return IdTokenizer()
        case TokenizerKind.BYTES:
            return ByteTokenizer()
        case TokenizerKind.WHITESPACE:
            if vocab_path is None:
                raise ConfigError("tokenizer 'whitespace' needs vocab_path")
            tokenizer = WhitespaceTokenizer.from_file(vocab_path)
            logger.info(f"Loaded {len(tokenizer.vocab)}-word vocabulary from {vocab_path}")
            return tokenizer
