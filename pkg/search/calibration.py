"""
Calibration datasets: named lists of prompt/answer pairs.

Pairs are stored as JSON lines. Token form:
    {"prompt_tokens": [..], "answer_tokens": [..], "wrong_answers": [[..], ..]}
Text form (tokenised on load):
    {"prompt": "..", "answer": "..", "wrong_answers": ["..", ..]}
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import polars as pl
import torch

from errors import EmptyDatasetError, ValidationError
from models.tokenizer import Tokenizer
from scoring.losses import PromptAnswerPair

logger = logging.getLogger(__name__)

DEFAULT_CALIBRATION_SAMPLES = 128

PAIR_SCHEMA = {
    "prompt_tokens": pl.List(pl.Int64),
    "answer_tokens": pl.List(pl.Int64),
    "wrong_answers": pl.List(pl.List(pl.Int64)),
}


@dataclass(frozen=True)
class CalibrationDataset:
    """A named, non-empty set of prompt/answer pairs."""

    name: str
    pairs: tuple[PromptAnswerPair, ...]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise EmptyDatasetError(f"Calibration dataset '{self.name}' has no pairs")

    def __len__(self) -> int:
        return len(self.pairs)

    def sample(
        self, n: int = DEFAULT_CALIBRATION_SAMPLES, seed: int = 0
    ) -> "CalibrationDataset":
        """
        Draw ``n`` pairs without replacement, keeping file order.

        Returns the dataset unchanged when it already has <= n pairs.
        """
        if n >= len(self.pairs):
            return self
        gen = torch.Generator().manual_seed(seed)
        picks = sorted(torch.randperm(len(self.pairs), generator=gen)[:n].tolist())
        return CalibrationDataset(self.name, tuple(self.pairs[i] for i in picks))

    @classmethod
    def merged(
        cls, name: str, datasets: Sequence["CalibrationDataset"]
    ) -> "CalibrationDataset":
        return cls(name, tuple(pair for ds in datasets for pair in ds.pairs))


def pairs_to_frame(pairs: Sequence[PromptAnswerPair]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "prompt_tokens": [list(p.prompt) for p in pairs],
            "answer_tokens": [list(p.answer) for p in pairs],
            "wrong_answers": [[list(w) for w in p.wrong_answers] for p in pairs],
        },
        schema=PAIR_SCHEMA,
    )


def save_pairs(pairs: Sequence[PromptAnswerPair], path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    pairs_to_frame(pairs).write_ndjson(target)
    logger.info(f"Wrote {len(pairs)} pairs to {target}")
    return target


def records_to_pairs(
    records: Sequence[dict], tokenizer: Tokenizer | None = None
) -> list[PromptAnswerPair]:
    """
    Convert JSONL records (token or text form) into pairs.

    Raises:
        ValidationError: If a record has neither form, or text form is used
            without a tokenizer
    """
    pairs = []
    for i, record in enumerate(records):
        wrong = record.get("wrong_answers") or []
        if record.get("prompt_tokens") is not None:
            prompt, answer = record["prompt_tokens"], record["answer_tokens"]
        elif record.get("prompt") is not None:
            if tokenizer is None:
                raise ValidationError(f"Record {i} is text but no tokenizer was given")
            prompt = tokenizer.encode(record["prompt"])
            answer = tokenizer.encode(record["answer"])
            wrong = [tokenizer.encode(w) for w in wrong]
        else:
            raise ValidationError(f"Record {i} has neither prompt_tokens nor prompt")
        pairs.append(PromptAnswerPair.from_parts(prompt, answer, wrong))
    return pairs


def load_pairs(path: str | Path, tokenizer: Tokenizer | None = None) -> list[PromptAnswerPair]:
    """
    Read prompt/answer pairs from a JSONL file.

    Args:
        path: JSONL file in token or text form
        tokenizer: Needed only for text form

    Returns:
        List of pairs in file order (empty for an empty file)
    """
    source = Path(path)
    if source.stat().st_size == 0:
        return []
    frame = pl.read_ndjson(source)
    pairs = records_to_pairs(frame.to_dicts(), tokenizer)
    logger.info(f"Loaded {len(pairs)} pairs from {source}")
    return pairs


def load_calibration_dataset(
    name: str,
    path: str | Path,
    tokenizer: Tokenizer | None = None,
    n_samples: int | None = DEFAULT_CALIBRATION_SAMPLES,
    seed: int = 0,
) -> CalibrationDataset:
    dataset = CalibrationDataset(name, tuple(load_pairs(path, tokenizer)))
    if n_samples is None:
        return dataset
    return dataset.sample(n_samples, seed)


def random_pairs(
    vocab_size: int,
    n: int,
    length: int,
    split_index: int,
    seed: int,
    n_wrong: int = 1,
) -> list[PromptAnswerPair]:
    """Uniformly random pairs for oracle tests and the agreement experiment."""
    gen = torch.Generator().manual_seed(seed)
    pairs = []
    answer_len = length - split_index
    for _ in range(n):
        tokens = torch.randint(0, vocab_size, (length,), generator=gen).tolist()
        wrong = [
            torch.randint(0, vocab_size, (answer_len,), generator=gen).tolist()
            for _ in range(n_wrong)
        ]
        pairs.append(
            PromptAnswerPair.from_parts(tokens[:split_index], tokens[split_index:], wrong)
        )
    return pairs
