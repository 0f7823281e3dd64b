"""
Routing decisions and router evaluation.

Pool indices are 1-based, matching the pool file and provenance table.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from errors import EmptyDatasetError, PoolBindingError
from models.transformer import OmissionSet
from routing.dataset import RouterSample, label_matrix
from routing.router_model import RouterModel
from search.pool import CandidatePool

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RouteResult:
    index: int
    omission: OmissionSet
    predicted: tuple[float, ...]


@dataclass(frozen=True)
class RouterMetrics:
    accuracy: float
    regret: float
    mse: float
    n_samples: int


def check_binding(router: RouterModel, pool: CandidatePool) -> None:
    """
    Raises:
        PoolBindingError: If the router was trained on a different pool
    """
    if router.m != pool.m:
        raise PoolBindingError(f"Router predicts {router.m} sets but the pool has {pool.m}")
    if router.pool_binding != pool.fingerprint():
        raise PoolBindingError(
            "Router is bound to a different candidate pool "
            f"({router.pool_binding[:12]} != {pool.fingerprint()[:12]})"
        )


def route(router: RouterModel, prompt: Sequence[int], pool: CandidatePool) -> RouteResult:
    """
    Pick the omission set with the lowest predicted loss.

    Args:
        router: Trained router bound to ``pool``
        prompt: Prompt token ids
        pool: Candidate pool

    Returns:
        RouteResult with the 1-based pool index (ties go to the lowest), the
        omission set and the full prediction vector

    Raises:
        PoolBindingError: If ``router`` is not bound to ``pool``
    """
    check_binding(router, pool)
    predicted = router.predict(prompt)
    router.route_calls += 1
    # torch.argmin returns the first minimum
    chosen = int(torch.argmin(predicted))
    return RouteResult(
        index=chosen + 1,
        omission=pool.sets[chosen],
        predicted=tuple(float(v) for v in predicted),
    )


def score_predictions(predictions: np.ndarray, labels: np.ndarray) -> RouterMetrics:
    """
    Accuracy, regret and MSE of argmin choices against label vectors.

    A choice counts as correct when its label equals the sample's label
    minimum, so duplicate sets in the pool are not penalised.
    """
    if labels.shape[0] == 0:
        raise EmptyDatasetError("Cannot score a router on zero samples")
    chosen = predictions.argmin(axis=1)
    rows = np.arange(labels.shape[0])
    regrets = labels[rows, chosen] - labels.min(axis=1)
    return RouterMetrics(
        accuracy=float(np.mean(regrets == 0.0)),
        regret=float(np.mean(regrets)),
        mse=float(np.mean((predictions - labels) ** 2)),
        n_samples=int(labels.shape[0]),
    )


def evaluate_router(router: RouterModel, held_out: Sequence[RouterSample]) -> RouterMetrics:
    """
    Score ``router`` on held-out samples.

    Raises:
        EmptyDatasetError: If ``held_out`` is empty
    """
    if not held_out:
        raise EmptyDatasetError("Held-out set is empty")
    labels = label_matrix(held_out)
    predictions = router.predict_many([s.prompt_tokens for s in held_out]).double().numpy()
    metrics = score_predictions(predictions, labels)
    logger.info(
        f"Router on {metrics.n_samples} held-out samples: accuracy {metrics.accuracy:.3f}, "
        f"regret {metrics.regret:.6f}, mse {metrics.mse:.6f}"
    )
    return metrics
