"""
Per-task block pruning rates under routing.

rates[t, j] is the fraction of task t's prompts whose routed omission set
contains block j + 1.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import polars as pl

from routing.router_model import RouterModel
from routing.routing import check_binding, route
from scoring.losses import PromptAnswerPair
from search.pool import CandidatePool

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeatmapTable:
    tasks: tuple[str, ...]
    rates: np.ndarray
    skipped: tuple[str, ...] = ()

    @property
    def n_blocks(self) -> int:
        return int(self.rates.shape[1])

    def to_frame(self) -> pl.DataFrame:
        data: dict[str, list] = {"task": list(self.tasks)}
        for j in range(self.n_blocks):
            data[f"block_{j + 1}"] = self.rates[:, j].tolist()
        return pl.DataFrame(data)


def compute_heatmap(
    router: RouterModel,
    pool: CandidatePool,
    task_pairs: Mapping[str, Sequence[PromptAnswerPair]],
    n_blocks: int,
) -> HeatmapTable:
    """
    Route every prompt of every task and count block omissions.

    Args:
        router: Router bound to ``pool``
        pool: Candidate pool
        task_pairs: Task name -> pairs (only prompts are used)
        n_blocks: Depth d of the model

    Returns:
        HeatmapTable of shape [n_tasks, d]; empty tasks are listed in
        ``skipped`` and have no row
    """
    check_binding(router, pool)
    tasks, rows, skipped = [], [], []
    for task, pairs in task_pairs.items():
        if not pairs:
            logger.warning(f"Task '{task}' has no prompts; skipped in heatmap")
            skipped.append(task)
            continue
        counts = np.zeros(n_blocks, dtype=np.float64)
        for pair in pairs:
            for block in route(router, pair.prompt, pool).omission:
                counts[block - 1] += 1.0
        tasks.append(task)
        rows.append(counts / len(pairs))
    rates = np.vstack(rows) if rows else np.zeros((0, n_blocks))
    return HeatmapTable(tuple(tasks), rates, tuple(skipped))
