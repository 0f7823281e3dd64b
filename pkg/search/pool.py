"""
Candidate pool of omission sets and its JSON file.

File shape:
    {"k": 7, "model_hash": "<sha256>", "sets": [
        {"blocks": [..], "dataset": "..", "criterion": "tl", "loss": 0.41}, ..]}

Blocks are 1-based. Duplicate sets are kept with their own provenance so the
pool size stays datasets x criteria.
"""

import hashlib
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import polars as pl

from errors import StorageError, ValidationError
from models.transformer import OmissionSet, TransformerModel
from models.weights_io import model_fingerprint
from scoring.losses import Criterion
from search.calibration import CalibrationDataset
from search.omission import greedy_search, omission_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PoolEntry:
    """Where a pool set came from and the loss it achieved there."""

    dataset: str
    criterion: str
    loss: float


@dataclass(frozen=True)
class CandidatePool:
    k: int
    model_hash: str
    sets: tuple[OmissionSet, ...]
    provenance: tuple[PoolEntry, ...]

    def __post_init__(self) -> None:
        if not self.sets:
            raise ValidationError("A candidate pool needs at least one omission set")
        if len(self.sets) != len(self.provenance):
            raise ValidationError(
                f"{len(self.sets)} sets but {len(self.provenance)} provenance records"
            )
        wrong = [str(s) for s in self.sets if len(s) != self.k]
        if wrong:
            raise ValidationError(f"Pool sets {wrong} do not have cardinality k={self.k}")

    @property
    def m(self) -> int:
        return len(self.sets)

    def fingerprint(self) -> str:
        """Hash of what a router binds to: k, model and ordered sets."""
        canonical = json.dumps(
            {
                "k": self.k,
                "model_hash": self.model_hash,
                "sets": [list(s.indices) for s in self.sets],
            },
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "model_hash": self.model_hash,
            "sets": [
                {
                    "blocks": list(s.indices),
                    "dataset": p.dataset,
                    "criterion": p.criterion,
                    "loss": p.loss,
                }
                for s, p in zip(self.sets, self.provenance, strict=True)
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CandidatePool":
        try:
            return cls(
                k=int(raw["k"]),
                model_hash=str(raw["model_hash"]),
                sets=tuple(OmissionSet.of(entry["blocks"]) for entry in raw["sets"]),
                provenance=tuple(
                    PoolEntry(entry["dataset"], entry["criterion"], float(entry["loss"]))
                    for entry in raw["sets"]
                ),
            )
        except (KeyError, TypeError) as e:
            raise ValidationError(f"Malformed pool document: {e}") from e

    def save(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        logger.info(f"Wrote pool of {self.m} sets to {target}")
        return target

    @classmethod
    def load(cls, path: str | Path) -> "CandidatePool":
        source = Path(path)
        try:
            raw = json.loads(source.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise StorageError(f"Pool file {source} is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    def provenance_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "index": list(range(1, self.m + 1)),
                "blocks": [str(s) for s in self.sets],
                "dataset": [p.dataset for p in self.provenance],
                "criterion": [p.criterion for p in self.provenance],
                "loss": [p.loss for p in self.provenance],
            }
        )


def generate_pool(
    model: TransformerModel,
    datasets: Sequence[CalibrationDataset],
    criteria: Sequence[Criterion | str],
    k: int,
    two_pass: bool = False,
) -> CandidatePool:
    """
    Run greedy search for every (dataset, criterion) pair.

    Args:
        model: Dense model
        datasets: Calibration datasets (names must be unique)
        criteria: Loss criteria
        k: Omission cardinality shared by every set
        two_pass: Forwarded to greedy_search

    Returns:
        CandidatePool of len(datasets) * len(criteria) sets, datasets-major

    Raises:
        ValidationError: If datasets or criteria are empty, or names repeat
    """
    if not datasets or not criteria:
        raise ValidationError("generate_pool needs at least one dataset and one criterion")
    names = [ds.name for ds in datasets]
    if len(set(names)) != len(names):
        raise ValidationError(f"Calibration dataset names must be unique: {names}")

    sets, provenance = [], []
    for dataset in datasets:
        for criterion in criteria:
            criterion = Criterion(criterion)
            omission, trace = greedy_search(model, dataset, criterion, k, two_pass=two_pass)
            if trace and not two_pass:
                achieved = trace[-1].chosen_loss
            else:
                achieved = omission_loss(model, dataset, criterion, omission)
            sets.append(omission)
            provenance.append(PoolEntry(dataset.name, str(criterion), achieved))
    pool = CandidatePool(
        k=k,
        model_hash=model_fingerprint(model),
        sets=tuple(sets),
        provenance=tuple(provenance),
    )
    logger.info(
        f"Generated pool: {len(datasets)} datasets x {len(criteria)} criteria "
        f"= {pool.m} sets"
    )
    return pool
