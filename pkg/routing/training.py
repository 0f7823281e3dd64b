"""
Router training.

Two objectives over the predicted loss vector s_hat:
- mse: mean over samples of the squared distance to the label vector
- ce:  cross-entropy between softmin(s_hat) and a target distribution,
       softmin(label) ("soft") or the argmin indicator ("onehot")

Optimisation is AdamW with a linear warmup to the base rate followed by a
constant rate. Batches are drawn from a seeded permutation each epoch, so two
runs with the same seed produce identical weights.
"""

import logging
import math
from collections.abc import Sequence
from enum import StrEnum

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from errors import DivergenceError
from routing.dataset import RouterSample, label_matrix
from routing.router_model import RouterArch, RouterModel, build_router

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class LossMode(StrEnum):
    MSE = "mse"
    CE = "ce"


class LabelMode(StrEnum):
    SOFT = "soft"
    ONEHOT = "onehot"


class TrainConfig(BaseModel):
    """Router optimisation hyperparameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(default=1e-5, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    batch_size: int = Field(default=32, gt=0)
    epochs: int = Field(default=10, ge=0)
    warmup_steps: int = Field(default=500, ge=0)
    seed: int = 0
    loss_mode: LossMode = LossMode.MSE
    label_mode: LabelMode = LabelMode.SOFT


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Learning-rate multiplier: linear ramp over ``warmup_steps``, then 1."""
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    return 1.0


def ce_target(labels: torch.Tensor, label_mode: LabelMode) -> torch.Tensor:
    match label_mode:
        case LabelMode.SOFT:
            return torch.softmax(-labels, dim=-1)
        case LabelMode.ONEHOT:
            return F.one_hot(labels.argmin(dim=-1), labels.shape[-1]).to(labels.dtype)


def router_loss(
    predictions: torch.Tensor,
    labels: torch.Tensor,
    loss_mode: LossMode | str = LossMode.MSE,
    label_mode: LabelMode | str = LabelMode.SOFT,
) -> torch.Tensor:
    """
    Batch training objective.

    Args:
        predictions: [B, m] predicted losses
        labels: [B, m] label losses
        loss_mode: mse or ce
        label_mode: CE target (ignored for mse)

    Returns:
        Scalar loss tensor
    """
    match LossMode(loss_mode):
        case LossMode.MSE:
            return (predictions - labels).pow(2).sum(dim=-1).mean()
        case LossMode.CE:
            log_p = torch.log_softmax(-predictions, dim=-1)
            target = ce_target(labels, LabelMode(label_mode))
            return -(target * log_p).sum(dim=-1).mean()


def _check_gradients(router: RouterModel, step: int) -> None:
    for name, param in router.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise DivergenceError(step, f"non-finite gradient in '{name}'")


def full_loss(
    router: RouterModel,
    samples: Sequence[RouterSample],
    loss_mode: LossMode | str,
    label_mode: LabelMode | str = LabelMode.SOFT,
) -> float:
    """Objective over every sample at once, without gradients."""
    ids, mask = router.encode_prompts([s.prompt_tokens for s in samples])
    labels = torch.tensor(label_matrix(samples), dtype=torch.float32)
    router.eval()
    with torch.no_grad():
        return float(router_loss(router(ids, mask), labels, loss_mode, label_mode))


def train_router(
    samples: Sequence[RouterSample],
    config: TrainConfig,
    arch: RouterArch,
    pool_binding: str,
    loss_mode: LossMode | str | None = None,
) -> RouterModel:
    """
    Fit a router to the label vectors of ``samples``.

    Args:
        samples: Training samples; every label has the same length m
        config: Optimisation hyperparameters
        arch: Encoder shape
        pool_binding: Fingerprint of the pool the labels were computed on
        loss_mode: Overrides ``config.loss_mode`` when given

    Returns:
        Trained RouterModel in eval mode with ``final_loss`` and
        ``epoch_losses`` recorded

    Raises:
        EmptyDatasetError: If ``samples`` is empty
        ShapeError: If label lengths differ
        DivergenceError: On a non-finite loss or gradient (names the step)
    """
    labels_np = label_matrix(samples)
    mode = LossMode(loss_mode or config.loss_mode)
    n, m = labels_np.shape
    router = build_router(arch, m, pool_binding, config.seed)

    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    warmup = config.warmup_steps
    if warmup > total_steps:
        logger.warning(f"warmup_steps {warmup} clipped to the {total_steps} training steps")
        warmup = total_steps

    if config.epochs == 0:
        logger.warning("epochs=0: returning the initialised router untrained")
        router.final_loss = full_loss(router, samples, mode, config.label_mode)
        return router

    ids, mask = router.encode_prompts([s.prompt_tokens for s in samples])
    labels = torch.tensor(labels_np, dtype=torch.float32)
    optimizer = AdamW(
        router.parameters(),
        lr=config.learning_rate,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=config.weight_decay,
    )
    scheduler = LambdaLR(optimizer, lambda step: warmup_factor(step, warmup))
    gen = torch.Generator().manual_seed(config.seed)

    step = 0
    router.train()
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(n, generator=gen)
        running = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            predictions = router(ids[batch], mask[batch])
            loss = router_loss(predictions, labels[batch], mode, config.label_mode)
            if not torch.isfinite(loss):
                raise DivergenceError(step, f"loss is {loss.item()}")
            optimizer.zero_grad()
            loss.backward()
            _check_gradients(router, step)
            optimizer.step()
            scheduler.step()
            running += loss.item() * len(batch)
            step += 1
        epoch_loss = running / n
        router.epoch_losses.append(epoch_loss)
        logger.info(f"Epoch {epoch}/{config.epochs}: {mode} loss {epoch_loss:.6f}")

    router.final_loss = router.epoch_losses[-1]
    router.eval()
    return router
