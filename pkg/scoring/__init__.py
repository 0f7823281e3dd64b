"""Loss criteria for scoring omitted-block models."""

from .losses import (
    Criterion,
    LossValue,
    PromptAnswerPair,
    dataset_loss,
    multiple_choice_correct,
    perplexity,
    sample_loss,
    sentence_likelihood,
    task_likelihood,
    task_likelihood_difference,
)

__all__ = [
    "Criterion",
    "LossValue",
    "PromptAnswerPair",
    "dataset_loss",
    "multiple_choice_correct",
    "perplexity",
    "sample_loss",
    "sentence_likelihood",
    "task_likelihood",
    "task_likelihood_difference",
]
