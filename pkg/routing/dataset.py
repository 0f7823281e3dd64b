"""
Router training data.

Each sample keeps only the prompt and the vector of per-omission-set losses
of its pair; answers are not stored. JSONL schema, one object per line:

    {"prompt_tokens": [ints], "label": [floats]}
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import polars as pl
import torch

from errors import (
    EmptyDatasetError,
    PoolBindingError,
    PuddingError,
    SampleEvaluationError,
    ShapeError,
    ValidationError,
)
from models.transformer import (
    OmissionSet,
    PrunedView,
    TokenSequence,
    TransformerModel,
    apply_omission,
)
from models.weights_io import model_fingerprint
from scoring.losses import Criterion, PromptAnswerPair, sample_loss
from search.pool import CandidatePool

logger = logging.getLogger(__name__)

SAMPLE_SCHEMA = {
    "prompt_tokens": pl.List(pl.Int64),
    "label": pl.List(pl.Float64),
}


@dataclass(frozen=True)
class RouterSample:
    prompt_tokens: TokenSequence
    label: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.label:
            raise ShapeError("Router labels must have at least one entry")
        if not all(math.isfinite(v) for v in self.label):
            raise ValidationError(f"Non-finite router label {self.label}")

    @property
    def m(self) -> int:
        return len(self.label)


def build_router_dataset(
    model: TransformerModel,
    pool: CandidatePool,
    pairs: Sequence[PromptAnswerPair],
    criterion: Criterion | str = Criterion.TL,
) -> list[RouterSample]:
    """
    Label every pair with its loss under each omission set of the pool.

    Args:
        model: Dense model the pool was searched on
        pool: Candidate pool
        pairs: Prompt/answer pairs
        criterion: Label criterion (tl by default)

    Returns:
        One RouterSample per pair, in input order

    Raises:
        EmptyDatasetError: If ``pairs`` is empty
        PoolBindingError: If the pool was searched on a different model
        SampleEvaluationError: If a pair cannot be scored (index attached)
    """
    if not pairs:
        raise EmptyDatasetError("build_router_dataset needs at least one pair")
    if pool.model_hash != model_fingerprint(model):
        raise PoolBindingError("Candidate pool was generated for a different model")

    views: dict[OmissionSet, PrunedView] = {}
    for omission in pool.sets:
        if omission not in views:
            views[omission] = apply_omission(model, omission)

    samples = []
    for i, pair in enumerate(pairs):
        try:
            label = tuple(sample_loss(views[s], pair, criterion).value for s in pool.sets)
        except PuddingError as e:
            logger.error(f"Labelling failed on pair {i}: {e}")
            raise SampleEvaluationError(i, e) from e
        samples.append(RouterSample(prompt_tokens=pair.prompt, label=label))
    logger.info(f"Built {len(samples)} router samples over a pool of {pool.m} sets")
    return samples


def label_matrix(samples: Sequence[RouterSample]) -> np.ndarray:
    """
    Stack labels into an [n, m] float64 array.

    Raises:
        EmptyDatasetError: If ``samples`` is empty
        ShapeError: If label lengths differ
    """
    if not samples:
        raise EmptyDatasetError("No router samples")
    lengths = {s.m for s in samples}
    if len(lengths) != 1:
        raise ShapeError(f"Inconsistent router label lengths {sorted(lengths)}")
    return np.asarray([s.label for s in samples], dtype=np.float64)


def split_samples(
    samples: Sequence[RouterSample], val_fraction: float, seed: int
) -> tuple[list[RouterSample], list[RouterSample]]:
    """
    Seeded train/validation split.

    The training side always keeps at least one sample.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValidationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n = len(samples)
    n_val = min(int(round(n * val_fraction)), max(n - 1, 0))
    gen = torch.Generator().manual_seed(seed)
    order = torch.randperm(n, generator=gen).tolist()
    val_idx = sorted(order[:n_val])
    train_idx = sorted(order[n_val:])
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


def save_router_dataset(samples: Sequence[RouterSample], path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame = pl.DataFrame(
        {
            "prompt_tokens": [list(s.prompt_tokens) for s in samples],
            "label": [list(s.label) for s in samples],
        },
        schema=SAMPLE_SCHEMA,
    )
    frame.write_ndjson(target)
    logger.info(f"Wrote {len(samples)} router samples to {target}")
    return target


def load_router_dataset(path: str | Path) -> list[RouterSample]:
    source = Path(path)
    if source.stat().st_size == 0:
        return []
    frame = pl.read_ndjson(source, schema=SAMPLE_SCHEMA)
    samples = [
        RouterSample(
            prompt_tokens=tuple(int(t) for t in row["prompt_tokens"]),
            label=tuple(float(v) for v in row["label"]),
        )
        for row in frame.iter_rows(named=True)
    ]
    logger.info(f"Loaded {len(samples)} router samples from {source}")
    return samples
