"""
Omission-set search.

greedy_search() grows the omission set one block at a time, each step taking
the block whose removal gives the lowest calibration loss (SLEB-style
sequential elimination, no backtracking unless two_pass is set).
exhaustive_search() scans every k-subset and is the oracle greedy is checked
against.
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from errors import CombinatorialBlowupError, InvalidKError
from models.synthetic import random_model
from models.transformer import ModelConfig, OmissionSet, TransformerModel, apply_omission
from scoring.losses import Criterion, PromptAnswerPair, dataset_loss
from search.calibration import CalibrationDataset, random_pairs

logger = logging.getLogger(__name__)

DEFAULT_EXHAUSTIVE_CAP = 10_000


@dataclass(frozen=True)
class GreedyStep:
    """Losses of every candidate at one greedy step and the block taken."""

    candidate_losses: tuple[tuple[int, float], ...]
    chosen_block: int
    chosen_loss: float


def _check_k(model: TransformerModel, k: int) -> None:
    if not 0 <= k <= model.n_blocks - 1:
        raise InvalidKError(
            f"k={k} out of range: need 0 <= k <= d-1 = {model.n_blocks - 1}"
        )


def omission_loss(
    model: TransformerModel,
    data: CalibrationDataset,
    criterion: Criterion | str,
    omission: OmissionSet,
) -> float:
    return dataset_loss(apply_omission(model, omission), data.pairs, criterion).value


def _best_addition(
    model: TransformerModel,
    data: CalibrationDataset,
    criterion: Criterion | str,
    base: OmissionSet,
) -> tuple[tuple[tuple[int, float], ...], int, float]:
    candidates = tuple(
        (j, omission_loss(model, data, criterion, base.with_block(j)))
        for j in range(1, model.n_blocks + 1)
        if j not in base
    )
    chosen, chosen_loss = min(candidates, key=lambda c: (c[1], c[0]))
    return candidates, chosen, chosen_loss


def refine_two_pass(
    model: TransformerModel,
    data: CalibrationDataset,
    criterion: Criterion | str,
    omission: OmissionSet,
) -> OmissionSet:
    """
    Release each chosen block in turn and re-pick its best replacement.

    A swap is kept only when it strictly lowers the loss.
    """
    best = omission
    best_loss = omission_loss(model, data, criterion, best)
    for block in omission.indices:
        if block not in best:
            continue
        base = best.without_block(block)
        _, chosen, chosen_loss = _best_addition(model, data, criterion, base)
        if chosen_loss < best_loss:
            logger.info(
                f"Two-pass swap: {block} -> {chosen} "
                f"({best_loss:.6f} -> {chosen_loss:.6f})"
            )
            best, best_loss = base.with_block(chosen), chosen_loss
    return best


def greedy_search(
    model: TransformerModel,
    data: CalibrationDataset,
    criterion: Criterion | str,
    k: int,
    two_pass: bool = False,
) -> tuple[OmissionSet, list[GreedyStep]]:
    """
    Greedily select ``k`` blocks to omit.

    Args:
        model: Dense model
        data: Calibration dataset; the full set is scored at every step
        criterion: Loss criterion to minimise
        k: Number of blocks to omit (0 <= k <= d-1)
        two_pass: Run one refinement pass after the greedy pass

    Returns:
        Tuple of (omission set, per-step trace). Ties pick the lowest block.

    Raises:
        InvalidKError: If k is out of range
    """
    _check_k(model, k)
    current = OmissionSet()
    trace: list[GreedyStep] = []
    for step in range(1, k + 1):
        candidates, chosen, chosen_loss = _best_addition(model, data, criterion, current)
        current = current.with_block(chosen)
        trace.append(GreedyStep(candidates, chosen, chosen_loss))
        logger.debug(
            f"[{data.name}/{criterion}] step {step}/{k}: omit block {chosen} "
            f"(loss {chosen_loss:.6f})"
        )
    if two_pass and k > 0:
        current = refine_two_pass(model, data, criterion, current)
    logger.info(f"Greedy search on '{data.name}' ({criterion}, k={k}) -> {current}")
    return current, trace


def exhaustive_search(
    model: TransformerModel,
    data: CalibrationDataset,
    criterion: Criterion | str,
    k: int,
    cap: int = DEFAULT_EXHAUSTIVE_CAP,
) -> OmissionSet:
    """
    Global argmin over every k-subset of blocks.

    Ties keep the lexicographically smallest subset.

    Raises:
        InvalidKError: If k is out of range
        CombinatorialBlowupError: If C(d, k) exceeds ``cap``
    """
    _check_k(model, k)
    n_subsets = math.comb(model.n_blocks, k)
    if n_subsets > cap:
        raise CombinatorialBlowupError(
            f"C({model.n_blocks}, {k}) = {n_subsets:,} subsets exceeds cap {cap:,}"
        )
    best, best_loss = OmissionSet(), math.inf
    for combo in itertools.combinations(range(1, model.n_blocks + 1), k):
        candidate = OmissionSet(combo)
        loss = omission_loss(model, data, criterion, candidate)
        if loss < best_loss:
            best, best_loss = candidate, loss
    return best


def per_prompt_search(
    model: TransformerModel,
    prompt_pair: PromptAnswerPair,
    criterion: Criterion | str,
    k: int,
) -> OmissionSet:
    """Greedy search using a single pair as the whole calibration set."""
    started = time.perf_counter()
    single = CalibrationDataset("prompt", (prompt_pair,))
    omission, _ = greedy_search(model, single, criterion, k)
    logger.debug(f"Per-prompt search took {time.perf_counter() - started:.4f}s")
    return omission


@dataclass(frozen=True)
class AgreementInstance:
    seed: int
    greedy: OmissionSet
    greedy_loss: float
    exhaustive: OmissionSet
    exhaustive_loss: float
    steps_optimal: bool


@dataclass(frozen=True)
class AgreementReport:
    instances: tuple[AgreementInstance, ...]

    @property
    def agreement_fraction(self) -> float:
        return float(np.mean([i.greedy == i.exhaustive for i in self.instances]))

    @property
    def mean_gap(self) -> float:
        return float(np.mean([i.greedy_loss - i.exhaustive_loss for i in self.instances]))


def greedy_agreement(
    config: ModelConfig,
    k: int,
    criterion: Criterion | str = Criterion.TL,
    n_models: int = 20,
    n_pairs: int = 4,
    seq_len: int = 7,
    split_index: int = 3,
    seed: int = 0,
) -> AgreementReport:
    """
    Compare greedy and exhaustive search over random tiny models.

    Returns:
        AgreementReport; the fraction is tracked, never thresholded
    """
    instances = []
    for i in range(n_models):
        model_seed = seed * 1_000 + i
        model = random_model(config, model_seed)
        data = CalibrationDataset(
            f"random_{i}",
            tuple(random_pairs(config.vocab_size, n_pairs, seq_len, split_index, model_seed)),
        )
        greedy, trace = greedy_search(model, data, criterion, k)
        exhaustive = exhaustive_search(model, data, criterion, k)
        steps_optimal = all(
            step.chosen_loss <= min(loss for _, loss in step.candidate_losses)
            for step in trace
        )
        instances.append(
            AgreementInstance(
                seed=model_seed,
                greedy=greedy,
                greedy_loss=omission_loss(model, data, criterion, greedy),
                exhaustive=exhaustive,
                exhaustive_loss=omission_loss(model, data, criterion, exhaustive),
                steps_optimal=steps_optimal,
            )
        )
    report = AgreementReport(tuple(instances))
    logger.info(
        f"Greedy matched exhaustive on {report.agreement_fraction:.0%} of "
        f"{n_models} models (mean gap {report.mean_gap:.6f})"
    )
    return report
