"""
Routed inference: route once, load the surviving blocks, decode.

Stages per prompt, each timed with a monotonic clock:
1. ROUTE: one router call picks an omission set from the pool
2. LOAD:  the block store evicts omitted blocks and reads missing survivors
3. PREFILL: prompt processing up to the first generated token
4. GENERATE: the remaining greedy tokens
"""

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import polars as pl

from errors import PoolBindingError
from loaders.block_store import BlockStore
from models.transformer import (
    OmissionSet,
    PrunedView,
    TokenSequence,
    iter_greedy_tokens,
    validate_tokens,
)
from routing.router_model import RouterModel
from routing.routing import route
from search.pool import CandidatePool

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodeTiming:
    """
    Greedy tokens with their stage times.

    ``prefill_time`` runs until the first token is produced (time to first
    token); ``generation_time`` covers the tokens after it.
    """

    generated: TokenSequence
    prefill_time: float
    generation_time: float


@dataclass(frozen=True)
class InferenceReport:
    routed_index: int
    omission_set: OmissionSet
    router_time: float
    load_time: float
    bytes_loaded: int
    blocks_loaded: tuple[int, ...]
    prefill_time: float
    generation_time: float
    tokens_generated: int

    def to_record(self) -> dict:
        """JSON-ready dict; times at millisecond resolution."""
        return {
            "routed_index": self.routed_index,
            "omission_set": list(self.omission_set.indices),
            "router_time": round(self.router_time, 3),
            "load_time": round(self.load_time, 3),
            "bytes_loaded": self.bytes_loaded,
            "blocks_loaded": list(self.blocks_loaded),
            "prefill_time": round(self.prefill_time, 3),
            "generation_time": round(self.generation_time, 3),
            "tokens_generated": self.tokens_generated,
        }


def timed_greedy_decode(
    view: PrunedView,
    prompt: Sequence[int],
    max_new: int,
    use_cache: bool = False,
) -> DecodeTiming:
    """Greedy decode with the pre-fill / generation split measured."""
    validate_tokens(view.config, prompt)
    generated: list[int] = []
    prefill_time = 0.0
    started = time.perf_counter()
    for token in iter_greedy_tokens(view, prompt, max_new, use_cache):
        if not generated:
            prefill_time = time.perf_counter() - started
        generated.append(token)
    total = time.perf_counter() - started
    return DecodeTiming(
        generated=tuple(generated),
        prefill_time=prefill_time,
        generation_time=max(total - prefill_time, 0.0),
    )


def run_inference(
    store: BlockStore,
    router: RouterModel,
    pool: CandidatePool,
    prompt: Sequence[int],
    max_new: int,
    use_cache: bool = False,
) -> tuple[TokenSequence, InferenceReport]:
    """
    Route ``prompt``, load its blocks and generate ``max_new`` tokens.

    Args:
        store: Block store over the model the pool was searched on
        router: Router bound to ``pool``
        pool: Candidate pool
        prompt: Prompt token ids
        max_new: Tokens to generate
        use_cache: Decode with a key/value cache

    Returns:
        (prompt followed by generated tokens, InferenceReport)

    Raises:
        PoolBindingError: If router, pool and store disagree
        BlockLoadError: If a surviving block cannot be read
    """
    if pool.model_hash != store.fingerprint():
        raise PoolBindingError("Candidate pool was generated for a different weight file")

    started = time.perf_counter()
    decision = route(router, prompt, pool)
    router_time = time.perf_counter() - started

    view, transfer = store.load_view(decision.omission)
    timing = timed_greedy_decode(view, prompt, max_new, use_cache)

    report = InferenceReport(
        routed_index=decision.index,
        omission_set=decision.omission,
        router_time=router_time,
        load_time=transfer.load_time,
        bytes_loaded=transfer.bytes_loaded,
        blocks_loaded=transfer.loaded,
        prefill_time=timing.prefill_time,
        generation_time=timing.generation_time,
        tokens_generated=len(timing.generated),
    )
    logger.info(
        f"Routed to set {decision.index} {decision.omission}; loaded "
        f"{len(transfer.loaded)} blocks ({transfer.bytes_loaded:,} bytes); "
        f"generated {report.tokens_generated} tokens"
    )
    return tuple(prompt) + timing.generated, report


def reports_frame(reports: Sequence[InferenceReport]) -> pl.DataFrame:
    schema = {
        "routed_index": pl.Int64,
        "omission_set": pl.List(pl.Int64),
        "router_time": pl.Float64,
        "load_time": pl.Float64,
        "bytes_loaded": pl.Int64,
        "blocks_loaded": pl.List(pl.Int64),
        "prefill_time": pl.Float64,
        "generation_time": pl.Float64,
        "tokens_generated": pl.Int64,
    }
    return pl.DataFrame([r.to_record() for r in reports], schema=schema)


def write_reports(reports: Sequence[InferenceReport], path: str | Path) -> Path:
    """Write reports as JSON lines (an empty file for no reports)."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    if not reports:
        target.write_text("", encoding="utf-8")
    else:
        reports_frame(reports).write_ndjson(target)
    logger.info(f"Wrote {len(reports)} inference reports to {target}")
    return target
