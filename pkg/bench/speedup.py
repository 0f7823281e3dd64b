"""
Dense vs routed wall-clock comparison.

Blocks are made resident before timing starts, so the figures are compute
only; load time is reported by run_inference. Each cell is the median over
repetitions of the summed time across the cell's prompts, after one warmup
pass.
"""

import logging
import statistics
import time
from collections.abc import Callable, Sequence

import polars as pl
import torch

from errors import EmptyWorkloadError, ValidationError
from loaders.block_store import BlockStore
from models.transformer import OmissionSet, PrunedView, TokenSequence
from pipelines.inference import timed_greedy_decode
from routing.router_model import RouterModel
from routing.routing import route
from search.pool import CandidatePool

logger = logging.getLogger(__name__)

MIN_REPETITIONS = 5
N_WARMUP = 1


def synthetic_workload(
    vocab_size: int, prompt_lengths: Sequence[int], per_length: int, seed: int
) -> list[TokenSequence]:
    """Random prompts, ``per_length`` of each requested length."""
    gen = torch.Generator().manual_seed(seed)
    return [
        tuple(torch.randint(0, vocab_size, (length,), generator=gen).tolist())
        for length in prompt_lengths
        for _ in range(per_length)
    ]


def _median_time(fn: Callable[[], float], repetitions: int) -> float:
    for _ in range(N_WARMUP):
        fn()
    return statistics.median(fn() for _ in range(repetitions))


def _decode_seconds(
    views: Sequence[PrunedView],
    prompts: Sequence[TokenSequence],
    gen_length: int,
    use_cache: bool,
    prefill_only: bool,
) -> float:
    total = 0.0
    for view, prompt in zip(views, prompts, strict=True):
        timing = timed_greedy_decode(view, prompt, gen_length, use_cache)
        total += timing.prefill_time
        if not prefill_only:
            total += timing.generation_time
    return total


def measure_speedup(
    store_dense: BlockStore,
    store_routed: BlockStore,
    workload: Sequence[TokenSequence],
    gen_lengths: Sequence[int],
    router: RouterModel | None = None,
    pool: CandidatePool | None = None,
    omission: OmissionSet | None = None,
    repetitions: int = MIN_REPETITIONS,
    use_cache: bool = False,
) -> pl.DataFrame:
    """
    Time dense and routed decoding over a workload.

    The routed side either routes each prompt with ``router`` over ``pool``
    or uses the fixed ``omission`` set (the empty set when neither is given).

    Args:
        store_dense: Store serving the dense model
        store_routed: Store serving the routed model (same weights)
        workload: Prompts; cells are grouped by prompt length
        gen_lengths: Generated tokens per cell
        router: Optional router; its time is reported as a separate column
        pool: Pool the router is bound to
        omission: Fixed omission set when no router is given
        repetitions: Timed repetitions per cell (>= 5)
        use_cache: Decode with a key/value cache

    Returns:
        DataFrame with one row per (prompt_length, gen_length): dense and
        routed pre-fill and total seconds, router seconds, speedup ratios and
        the router's share of routed pre-fill time

    Raises:
        EmptyWorkloadError: If the workload or gen_lengths is empty
    """
    if not workload or not gen_lengths:
        raise EmptyWorkloadError("measure_speedup needs at least one prompt and gen length")
    if repetitions < MIN_REPETITIONS:
        raise ValidationError(f"repetitions must be >= {MIN_REPETITIONS}, got {repetitions}")
    if (router is None) != (pool is None):
        raise ValidationError("router and pool must be given together")

    dense_view = store_dense.load_view(OmissionSet())[0]
    rows = []
    for prompt_length in sorted({len(p) for p in workload}):
        prompts = [p for p in workload if len(p) == prompt_length]
        if router is not None and pool is not None:
            sets = [route(router, p, pool).omission for p in prompts]

            def route_all(prompts=prompts) -> float:
                started = time.perf_counter()
                for p in prompts:
                    router.predict(p)
                return time.perf_counter() - started

            router_time = _median_time(route_all, repetitions)
        else:
            sets = [omission or OmissionSet()] * len(prompts)
            router_time = 0.0

        routed_views = []
        for omission_set in sets:
            store_routed.prepare(omission_set)
            routed_views.append(store_routed.view(omission_set))
        dense_views = [dense_view] * len(prompts)

        for gen_length in gen_lengths:
            cell = {}
            for side, views in (("dense", dense_views), ("routed", routed_views)):
                for phase, prefill_only in (("prefill", True), ("total", False)):
                    cell[f"{side}_{phase}"] = _median_time(
                        lambda v=views, p=prefill_only, g=gen_length, ps=prompts: (
                            _decode_seconds(v, ps, g, use_cache, p)
                        ),
                        repetitions,
                    )
            routed_prefill = cell["routed_prefill"] + router_time
            rows.append(
                {
                    "prompt_length": prompt_length,
                    "gen_length": gen_length,
                    "n_prompts": len(prompts),
                    "dense_prefill_s": cell["dense_prefill"],
                    "routed_prefill_s": cell["routed_prefill"],
                    "router_s": router_time,
                    "dense_total_s": cell["dense_total"],
                    "routed_total_s": cell["routed_total"],
                    "prefill_speedup": cell["dense_prefill"] / routed_prefill,
                    "total_speedup": cell["dense_total"]
                    / (cell["routed_total"] + router_time),
                    "compute_speedup": cell["dense_total"] / cell["routed_total"],
                    "router_share_of_prefill": router_time / routed_prefill,
                }
            )
            logger.info(
                f"Speedup cell prompt={prompt_length} gen={gen_length}: "
                f"{rows[-1]['total_speedup']:.3f}x total, "
                f"router {router_time * 1000:.2f} ms"
            )
    return pl.DataFrame(rows)
