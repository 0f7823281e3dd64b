"""
Static vs dynamic omission comparison.

Every method is scored on the same per-task evaluation pairs, in a fixed
order so tables diff cleanly:

- dense: no omission
- static-global: one greedy set from all tasks' calibration data
- static-per-task: one greedy set per task from that task's data
- per-prompt-greedy: greedy search on each incoming prompt alone
- router: the trained router's choice from the candidate pool

A task's value is the mean over its pairs; the average is the mean over
tasks. The metric is mean task likelihood (lower is better) or
multiple-choice accuracy (higher is better).

The wall time each method spends choosing a set is kept apart from the
scores (``ComparisonTable.timing_frame``) so the score table stays
reproducible. Prompts shorter than two tokens give per-prompt search nothing
to score; they fall back to the static-global set and the row says so.
"""

import hashlib
import json
import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
import polars as pl

from errors import ValidationError
from models.transformer import OmissionSet, PrunedView, TransformerModel, apply_omission
from routing.router_model import RouterModel
from routing.routing import route
from scoring.losses import (
    Criterion,
    PromptAnswerPair,
    multiple_choice_correct,
    task_likelihood,
)
from search.calibration import CalibrationDataset
from search.omission import greedy_search, per_prompt_search
from search.pool import CandidatePool

logger = logging.getLogger(__name__)

TaskPairs = Mapping[str, Sequence[PromptAnswerPair]]
Chooser = Callable[[str, PromptAnswerPair], OmissionSet]


class Method(StrEnum):
    DENSE = "dense"
    STATIC_GLOBAL = "static-global"
    STATIC_PER_TASK = "static-per-task"
    PER_PROMPT = "per-prompt-greedy"
    ROUTER = "router"


METHOD_ORDER = (
    Method.DENSE,
    Method.STATIC_GLOBAL,
    Method.STATIC_PER_TASK,
    Method.PER_PROMPT,
    Method.ROUTER,
)


class Metric(StrEnum):
    TL = "tl"
    ACCURACY = "accuracy"


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    task_values: tuple[tuple[str, float], ...]
    average: float
    provenance: str

    def value(self, task: str) -> float:
        return dict(self.task_values)[task]


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[ComparisonRow, ...]
    metric: str
    evaluation_hash: str
    selection_times: tuple[tuple[str, float], ...] = ()

    def row(self, method: str) -> ComparisonRow:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(method)

    def to_frame(self) -> pl.DataFrame:
        tasks = [task for task, _ in self.rows[0].task_values] if self.rows else []
        records = []
        for row in self.rows:
            record: dict[str, object] = {"method": row.method}
            record.update({task: value for task, value in row.task_values})
            record["average"] = row.average
            record["provenance"] = row.provenance
            record["metric"] = self.metric
            record["evaluation_hash"] = self.evaluation_hash
            records.append(record)
        columns = [
            "method",
            *tasks,
            "average",
            "provenance",
            "metric",
            "evaluation_hash",
        ]
        return pl.DataFrame(records).select(columns)

    def timing_frame(self) -> pl.DataFrame:
        """Mean seconds per evaluation pair spent choosing the omission set."""
        return pl.DataFrame(
            {
                "method": [method for method, _ in self.selection_times],
                "seconds_per_prompt": [s for _, s in self.selection_times],
            },
            schema={"method": pl.String, "seconds_per_prompt": pl.Float64},
        )


def evaluation_hash(task_pairs: TaskPairs) -> str:
    """SHA-256 of the evaluation pairs, embedded in every comparison output."""
    canonical = json.dumps(
        {
            task: [
                [list(p.tokens), p.split_index, [list(w) for w in p.wrong_answers]]
                for p in pairs
            ]
            for task, pairs in sorted(task_pairs.items())
        },
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def pair_score(view: PrunedView, pair: PromptAnswerPair, metric: Metric | str) -> float:
    match Metric(metric):
        case Metric.TL:
            return task_likelihood(view, pair).value
        case Metric.ACCURACY:
            return 1.0 if multiple_choice_correct(view, pair) else 0.0


class ViewCache:
    """One pruned view per distinct omission set."""

    def __init__(self, model: TransformerModel) -> None:
        self.model = model
        self._views: dict[OmissionSet, PrunedView] = {}

    def __call__(self, omission: OmissionSet) -> PrunedView:
        if omission not in self._views:
            self._views[omission] = apply_omission(self.model, omission)
        return self._views[omission]


def score_method(
    views: ViewCache,
    task_pairs: TaskPairs,
    choose: Chooser,
    metric: Metric | str,
) -> tuple[tuple[tuple[str, float], ...], float]:
    """
    Per-task means and their average for one set-selection rule.

    Args:
        views: View cache over the dense model
        task_pairs: Task name -> evaluation pairs
        choose: (task, pair) -> omission set to evaluate that pair with
        metric: tl or accuracy
    """
    task_values = []
    for task, pairs in task_pairs.items():
        scores = [pair_score(views(choose(task, pair)), pair, metric) for pair in pairs]
        task_values.append((task, float(np.mean(scores))))
    average = float(np.mean([value for _, value in task_values]))
    return tuple(task_values), average


class TimedChooser:
    """Wraps a chooser and accumulates the wall time spent inside it."""

    def __init__(self, choose: Chooser) -> None:
        self.choose = choose
        self.seconds = 0.0
        self.calls = 0

    def __call__(self, task: str, pair: PromptAnswerPair) -> OmissionSet:
        started = time.perf_counter()
        omission = self.choose(task, pair)
        self.seconds += time.perf_counter() - started
        self.calls += 1
        return omission

    @property
    def mean_seconds(self) -> float:
        return self.seconds / self.calls if self.calls else 0.0


class PerPromptChooser:
    """
    Greedy ppl search on each prompt alone.

    A prompt of one token has no next-token prediction to score, so it gets
    ``fallback`` instead; ``fallbacks`` counts how often that happened.
    """

    def __init__(self, model: TransformerModel, k: int, fallback: OmissionSet) -> None:
        self.model = model
        self.k = k
        self.fallback = fallback
        self.fallbacks = 0

    def __call__(self, task: str, pair: PromptAnswerPair) -> OmissionSet:
        if len(pair.prompt) < 2:
            self.fallbacks += 1
            return self.fallback
        return per_prompt_search(self.model, pair.prompt_only(), Criterion.PPL, self.k)

    @property
    def provenance(self) -> str:
        text = "greedy ppl on the prompt"
        if self.fallbacks:
            text += f"; {self.fallbacks} one-token prompts used static-global"
        return text


def routed_chooser(router: RouterModel, pool: CandidatePool) -> Chooser:
    def choose(task: str, pair: PromptAnswerPair) -> OmissionSet:
        return route(router, pair.prompt, pool).omission

    return choose


def global_static_set(
    model: TransformerModel,
    calibration: Mapping[str, CalibrationDataset],
    criterion: Criterion | str,
    k: int,
) -> OmissionSet:
    """Greedy set calibrated on every task's data pooled together."""
    merged = CalibrationDataset.merged("all_tasks", list(calibration.values()))
    omission, _ = greedy_search(model, merged, criterion, k)
    return omission


def compare_methods(
    model: TransformerModel,
    pool: CandidatePool,
    router: RouterModel,
    task_pairs: TaskPairs,
    criterion: Criterion | str = Criterion.TL,
    metric: Metric | str = Metric.TL,
    calibration: Mapping[str, CalibrationDataset] | None = None,
) -> ComparisonTable:
    """
    Evaluate dense, static, per-prompt and routed omission on the same pairs.

    Args:
        model: Dense model
        pool: Candidate pool the router is bound to; k comes from it
        router: Trained router
        task_pairs: Task name -> evaluation pairs (tasks with no pairs are
            dropped with a warning)
        criterion: Search criterion for the static sets (tl, or ppl for the
            batch-perplexity baseline)
        metric: tl or accuracy
        calibration: Task name -> calibration data for the static sets;
            defaults to the evaluation pairs

    Returns:
        ComparisonTable with one row per method in METHOD_ORDER
    """
    tasks = {name: list(pairs) for name, pairs in task_pairs.items() if pairs}
    for name in task_pairs:
        if name not in tasks:
            logger.warning(f"Task '{name}' has no evaluation pairs; skipped")
    if not tasks:
        raise ValidationError("compare_methods needs at least one non-empty task")
    calib = calibration or {
        name: CalibrationDataset(name, tuple(pairs)) for name, pairs in tasks.items()
    }
    missing = [name for name in tasks if name not in calib]
    if missing:
        raise ValidationError(f"No calibration data for tasks {missing}")

    k = pool.k
    views = ViewCache(model)
    global_set = global_static_set(model, {n: calib[n] for n in tasks}, criterion, k)
    per_task = {
        name: greedy_search(model, calib[name], criterion, k)[0] for name in tasks
    }

    per_prompt = PerPromptChooser(model, k, global_set)
    choosers: dict[Method, tuple[Chooser, str]] = {
        Method.DENSE: (lambda t, p: OmissionSet(), ""),
        Method.STATIC_GLOBAL: (lambda t, p: global_set, str(global_set)),
        Method.STATIC_PER_TASK: (
            lambda t, p: per_task[t],
            "; ".join(f"{name}={s}" for name, s in per_task.items()),
        ),
        Method.PER_PROMPT: (per_prompt, ""),
        Method.ROUTER: (routed_chooser(router, pool), f"pool of {pool.m}"),
    }

    rows: list[ComparisonRow] = []
    selection_times: list[tuple[str, float]] = []
    for method in METHOD_ORDER:
        choose, provenance = choosers[method]
        timed = TimedChooser(choose)
        task_values, average = score_method(views, tasks, timed, metric)
        if method == Method.PER_PROMPT:
            provenance = per_prompt.provenance
            if per_prompt.fallbacks:
                logger.warning(
                    f"{per_prompt.fallbacks} one-token prompts used the "
                    "static-global set in per-prompt search"
                )
        rows.append(ComparisonRow(str(method), task_values, average, provenance))
        selection_times.append((str(method), timed.mean_seconds))
        logger.info(
            f"{method}: average {metric} {average:.6f}, "
            f"{timed.mean_seconds:.6f}s per prompt to choose"
        )

    return ComparisonTable(
        rows=tuple(rows),
        metric=str(Metric(metric)),
        evaluation_hash=evaluation_hash(tasks),
        selection_times=tuple(selection_times),
    )
