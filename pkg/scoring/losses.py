"""
Scalar criteria for scoring a pruned view on prompt/answer data.

- perplexity (ppl): exp of mean NLL over positions 2..T
- task likelihood (tl): mean NLL over answer positions S+1..T, not exponentiated
- task likelihood difference (tld): tl(correct) - mean tl(wrong answers)
- sentence likelihood (sl): mean NLL over positions 2..T (log of ppl)

Positions are 1-based as in the definitions; position 1 has no context and is
never scored. Per-token NLLs are accumulated in float64.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
import torch

from errors import (
    EmptyDatasetError,
    InsufficientLengthError,
    MissingContrastError,
    PuddingError,
    SampleEvaluationError,
    ValidationError,
)
from models.transformer import PrunedView, TokenSequence, forward_logprobs

logger = logging.getLogger(__name__)


class Criterion(StrEnum):
    PPL = "ppl"
    TL = "tl"
    TLD = "tld"
    SL = "sl"


@dataclass(frozen=True)
class PromptAnswerPair:
    """
    Token sequence split into prompt (first S tokens) and answer.

    Args:
        tokens: Full sequence z, length T
        split_index: S, number of prompt tokens (0 <= S < T)
        wrong_answers: Alternative continuations of the same prompt
    """

    tokens: TokenSequence
    split_index: int
    wrong_answers: tuple[TokenSequence, ...] = field(default=())

    def __post_init__(self) -> None:
        if not 0 <= self.split_index < len(self.tokens):
            raise ValidationError(
                f"split_index {self.split_index} must satisfy 0 <= S < T={len(self.tokens)}"
            )
        if any(len(w) == 0 for w in self.wrong_answers):
            raise ValidationError("Wrong answers must be non-empty")

    @classmethod
    def from_parts(
        cls,
        prompt: Sequence[int],
        answer: Sequence[int],
        wrong_answers: Sequence[Sequence[int]] = (),
    ) -> "PromptAnswerPair":
        return cls(
            tokens=tuple(int(t) for t in prompt) + tuple(int(t) for t in answer),
            split_index=len(prompt),
            wrong_answers=tuple(tuple(int(t) for t in w) for w in wrong_answers),
        )

    @property
    def prompt(self) -> TokenSequence:
        return self.tokens[: self.split_index]

    @property
    def answer(self) -> TokenSequence:
        return self.tokens[self.split_index :]

    def with_answer(self, answer: Sequence[int]) -> "PromptAnswerPair":
        return PromptAnswerPair.from_parts(self.prompt, answer)

    def prompt_only(self) -> "PromptAnswerPair":
        """The prompt scored as its own sequence (answers unknown at inference)."""
        return PromptAnswerPair(tokens=self.prompt, split_index=1)


@dataclass(frozen=True)
class LossValue:
    value: float
    criterion: Criterion


def token_nlls(view: PrunedView, z: Sequence[int]) -> np.ndarray:
    """
    Negative log-likelihood of each token given its prefix.

    Returns:
        float64 array of length T - 1; entry i is -log p(z_{i+2} | z_{<=i+1})
        in 1-based terms (positions 2..T)
    """
    table = forward_logprobs(view, z)
    targets = torch.tensor(list(z[1:]), dtype=torch.long)
    rows = torch.arange(len(targets))
    picked = table[rows, targets].double()
    return -picked.numpy()


def _require_length(z: Sequence[int], criterion: Criterion) -> None:
    if len(z) < 2:
        raise InsufficientLengthError(
            f"{criterion} needs T >= 2 (one predicted position), got T={len(z)}"
        )


def sentence_likelihood(view: PrunedView, z: Sequence[int]) -> LossValue:
    """Mean NLL over positions 2..T."""
    _require_length(z, Criterion.SL)
    return LossValue(float(np.mean(token_nlls(view, z))), Criterion.SL)


def perplexity(view: PrunedView, z: Sequence[int]) -> LossValue:
    """
    Perplexity of the whole sequence.

    Args:
        view: Model view
        z: Token sequence, T >= 2

    Returns:
        LossValue with exp(mean NLL over positions 2..T)

    Raises:
        InsufficientLengthError: If T < 2
    """
    _require_length(z, Criterion.PPL)
    return LossValue(float(np.exp(np.mean(token_nlls(view, z)))), Criterion.PPL)


def _answer_nll(view: PrunedView, tokens: Sequence[int], split_index: int) -> float:
    # Position S+1 is predicted by row S; with S = 0 the first answer token
    # has no context and scoring starts at position 2.
    first = max(split_index, 1)
    if first >= len(tokens):
        raise InsufficientLengthError(
            f"No scorable answer position: S={split_index}, T={len(tokens)}"
        )
    nlls = token_nlls(view, tokens)
    return float(np.mean(nlls[first - 1 :]))


def task_likelihood(view: PrunedView, pair: PromptAnswerPair) -> LossValue:
    """
    Mean NLL over the answer tokens only.

    Args:
        view: Model view
        pair: Prompt/answer pair; positions S+1..T are scored

    Returns:
        LossValue (not exponentiated)

    Raises:
        InsufficientLengthError: If no answer position has context
    """
    return LossValue(_answer_nll(view, pair.tokens, pair.split_index), Criterion.TL)


def task_likelihood_difference(view: PrunedView, pair: PromptAnswerPair) -> LossValue:
    """
    tl(correct) minus the mean tl over the wrong answers.

    Lower means the correct answer is relatively more likely.

    Raises:
        MissingContrastError: If the pair has no wrong answers
    """
    if not pair.wrong_answers:
        raise MissingContrastError("tld needs at least one wrong answer")
    correct = _answer_nll(view, pair.tokens, pair.split_index)
    wrong = [
        _answer_nll(view, pair.prompt + w, pair.split_index) for w in pair.wrong_answers
    ]
    return LossValue(float(np.mean([correct - w for w in wrong])), Criterion.TLD)


def sample_loss(
    view: PrunedView, pair: PromptAnswerPair, criterion: Criterion | str
) -> LossValue:
    """Evaluate one pair under ``criterion``."""
    match Criterion(criterion):
        case Criterion.PPL:
            return perplexity(view, pair.tokens)
        case Criterion.SL:
            return sentence_likelihood(view, pair.tokens)
        case Criterion.TL:
            return task_likelihood(view, pair)
        case Criterion.TLD:
            return task_likelihood_difference(view, pair)


def dataset_loss(
    view: PrunedView,
    data: Sequence[PromptAnswerPair],
    criterion: Criterion | str,
) -> LossValue:
    """
    Arithmetic mean of per-sample losses.

    Args:
        view: Model view
        data: Non-empty list of pairs
        criterion: Loss criterion

    Returns:
        LossValue averaged over ``data``

    Raises:
        EmptyDatasetError: If ``data`` is empty
        SampleEvaluationError: If one sample fails (its index is attached)
    """
    if not data:
        raise EmptyDatasetError("Cannot average a loss over an empty dataset")
    criterion = Criterion(criterion)
    values = np.empty(len(data), dtype=np.float64)
    for i, pair in enumerate(data):
        try:
            values[i] = sample_loss(view, pair, criterion).value
        except PuddingError as e:
            logger.error(f"Loss evaluation failed on sample {i}: {e}")
            raise SampleEvaluationError(i, e) from e
    return LossValue(float(np.mean(values)), criterion)


def multiple_choice_correct(view: PrunedView, pair: PromptAnswerPair) -> bool:
    """True when the correct answer's tl is strictly below every wrong answer's."""
    if not pair.wrong_answers:
        raise MissingContrastError("Accuracy scoring needs wrong answers")
    correct = _answer_nll(view, pair.tokens, pair.split_index)
    return all(
        correct < _answer_nll(view, pair.prompt + w, pair.split_index)
        for w in pair.wrong_answers
    )
