"""
Ablations over the candidate pool size and the router training objective.

Pool-size pools are nested: the pool of size s is the global static set
followed by the first s - 1 greedy sets of a seeded permutation of the
(dataset, criterion) pairs. Size 1 is therefore the static-global method
and the oracle loss can only go down as s grows.
"""

import logging
from collections.abc import Mapping, Sequence

import numpy as np
import polars as pl
import torch

from bench.compare import (
    Metric,
    ViewCache,
    global_static_set,
    routed_chooser,
    score_method,
)
from errors import ConfigError
from models.transformer import OmissionSet, TransformerModel
from models.weights_io import model_fingerprint
from routing.dataset import RouterSample, build_router_dataset, label_matrix
from routing.router_model import RouterArch
from routing.routing import evaluate_router
from routing.training import LabelMode, LossMode, TrainConfig, train_router
from scoring.losses import Criterion, PromptAnswerPair
from search.calibration import CalibrationDataset
from search.omission import greedy_search, omission_loss
from search.pool import CandidatePool, PoolEntry

logger = logging.getLogger(__name__)

TRAINING_VARIANTS = (
    (LossMode.MSE, LabelMode.SOFT),
    (LossMode.CE, LabelMode.SOFT),
    (LossMode.CE, LabelMode.ONEHOT),
)


def nested_pools(
    model: TransformerModel,
    datasets: Sequence[CalibrationDataset],
    criteria: Sequence[Criterion | str],
    sizes: Sequence[int],
    k: int,
    seed: int,
    global_criterion: Criterion | str = Criterion.TL,
) -> dict[int, CandidatePool]:
    """
    One pool per requested size, each a prefix of the next.

    Raises:
        ConfigError: If a size is < 1 or exceeds the number of
            (dataset, criterion) pairs
    """
    available = [(ds, Criterion(c)) for ds in datasets for c in criteria]
    bad = [s for s in sizes if not 1 <= s <= len(available)]
    if bad:
        raise ConfigError(
            f"Pool sizes {bad} out of range: {len(available)} (dataset, criterion) "
            "pairs available"
        )

    merged = CalibrationDataset.merged("all_tasks", list(datasets))
    by_name = {ds.name: ds for ds in datasets}
    global_set = global_static_set(model, by_name, global_criterion, k)
    first = PoolEntry(
        dataset="all_tasks",
        criterion=str(Criterion(global_criterion)),
        loss=omission_loss(model, merged, global_criterion, global_set),
    )
    gen = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(available), generator=gen).tolist()

    searched: dict[int, tuple[OmissionSet, PoolEntry]] = {}
    needed = max(sizes) - 1
    for i in order[:needed]:
        dataset, criterion = available[i]
        omission, _ = greedy_search(model, dataset, criterion, k)
        loss = omission_loss(model, dataset, criterion, omission)
        searched[i] = (omission, PoolEntry(dataset.name, str(criterion), loss))

    model_hash = model_fingerprint(model)
    pools = {}
    for size in sizes:
        chosen = [searched[i] for i in order[: size - 1]]
        pools[size] = CandidatePool(
            k=k,
            model_hash=model_hash,
            sets=(global_set, *(s for s, _ in chosen)),
            provenance=(first, *(p for _, p in chosen)),
        )
    return pools


def ablate_pool_size(
    model: TransformerModel,
    datasets: Sequence[CalibrationDataset],
    criteria: Sequence[Criterion | str],
    sizes: Sequence[int],
    k: int,
    train_pairs: Sequence[PromptAnswerPair],
    eval_pairs: Mapping[str, Sequence[PromptAnswerPair]],
    train_config: TrainConfig,
    arch: RouterArch,
    seed: int,
    label_criterion: Criterion | str = Criterion.TL,
) -> pl.DataFrame:
    """
    Retrain a router for each pool size and report routed losses.

    Returns:
        DataFrame with size, m, routed_average, oracle_average (mean of the
        per-pair label minimum on the evaluation pairs) and final_train_loss
    """
    pools = nested_pools(model, datasets, criteria, sizes, k, seed, label_criterion)
    views = ViewCache(model)
    flat_eval = [pair for pairs in eval_pairs.values() for pair in pairs]
    rows = []
    for size in sorted(pools):
        pool = pools[size]
        samples = build_router_dataset(model, pool, train_pairs, label_criterion)
        arch_v = arch.with_vocab(model.config.vocab_size)
        router = train_router(samples, train_config, arch_v, pool.fingerprint())
        chooser = routed_chooser(router, pool)
        _, routed_average = score_method(views, eval_pairs, chooser, Metric.TL)
        eval_samples = build_router_dataset(model, pool, flat_eval, label_criterion)
        eval_labels = label_matrix(eval_samples)
        rows.append(
            {
                "size": size,
                "m": pool.m,
                "routed_average": routed_average,
                "oracle_average": float(np.mean(eval_labels.min(axis=1))),
                "final_train_loss": router.final_loss,
            }
        )
        logger.info(f"Pool size {size}: routed tl {routed_average:.6f}")
    return pl.DataFrame(rows)


def ablate_training_loss(
    train_samples: Sequence[RouterSample],
    val_samples: Sequence[RouterSample],
    train_config: TrainConfig,
    arch: RouterArch,
    pool_binding: str,
) -> pl.DataFrame:
    """
    Train one router per (loss mode, label mode) variant on the same data.

    Returns:
        DataFrame with loss_mode, label_mode, initial and final training
        loss, and validation accuracy / regret (null without validation data)
    """
    rows = []
    for loss_mode, label_mode in TRAINING_VARIANTS:
        config = train_config.model_copy(
            update={"loss_mode": loss_mode, "label_mode": label_mode}
        )
        untrained = train_router(
            train_samples, config.model_copy(update={"epochs": 0}), arch, pool_binding
        )
        router = train_router(train_samples, config, arch, pool_binding)
        metrics = evaluate_router(router, val_samples) if val_samples else None
        rows.append(
            {
                "loss_mode": str(loss_mode),
                "label_mode": str(label_mode),
                "initial_loss": untrained.final_loss,
                "final_loss": router.final_loss,
                "val_accuracy": metrics.accuracy if metrics else None,
                "val_regret": metrics.regret if metrics else None,
            }
        )
    return pl.DataFrame(rows)
