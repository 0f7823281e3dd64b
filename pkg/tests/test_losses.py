"""
Unit tests for the loss criteria.

Tests functions from:
- scoring/losses.py
"""

import math

import numpy as np
import pytest
import torch

from errors import (
    EmptyDatasetError,
    InsufficientLengthError,
    MissingContrastError,
    SampleEvaluationError,
    ValidationError,
)
from models.synthetic import random_model
from models.transformer import ModelConfig, OmissionSet, apply_omission, dense_view
from scoring.losses import (
    Criterion,
    PromptAnswerPair,
    dataset_loss,
    multiple_choice_correct,
    perplexity,
    sample_loss,
    sentence_likelihood,
    task_likelihood,
    task_likelihood_difference,
)
from tests.reference import reference_token_nlls


def _identity_cases():
    """100 (view, sequence) cases over ten random tiny models."""
    config = ModelConfig(vocab_size=20, d_model=8, d_ff=16, n_blocks=3, max_seq_len=16)
    gen = torch.Generator().manual_seed(11)
    for model_seed in range(10):
        view = dense_view(random_model(config, seed=model_seed))
        for _ in range(10):
            length = int(torch.randint(2, 10, (1,), generator=gen))
            tokens = tuple(torch.randint(0, 20, (length,), generator=gen).tolist())
            yield view, tokens


class TestPromptAnswerPair:
    """Test pair construction."""

    def test_from_parts(self):
        pair = PromptAnswerPair.from_parts([1, 2], [3], [[4]])

        assert pair.tokens == (1, 2, 3)
        assert pair.split_index == 2
        assert pair.prompt == (1, 2)
        assert pair.answer == (3,)
        assert pair.wrong_answers == ((4,),)

    def test_split_must_leave_an_answer(self):
        """S = T leaves nothing to score."""
        with pytest.raises(ValidationError):
            PromptAnswerPair(tokens=(1, 2), split_index=2)

    def test_empty_wrong_answer_rejected(self):
        with pytest.raises(ValidationError):
            PromptAnswerPair.from_parts([1], [2], [[]])


class TestLossIdentities:
    """Relations that hold between the criteria on any model."""

    def test_exp_tl_over_whole_sequence_is_ppl(self):
        """With the answer spanning positions 2..T, exp(tl) equals ppl."""
        for view, tokens in _identity_cases():
            pair = PromptAnswerPair(tokens=tokens, split_index=1)
            tl = task_likelihood(view, pair).value
            ppl = perplexity(view, tokens).value

            assert math.exp(tl) == pytest.approx(ppl, rel=1e-5)

    def test_sl_is_log_ppl(self):
        for view, tokens in _identity_cases():
            sl = sentence_likelihood(view, tokens).value
            ppl = perplexity(view, tokens).value

            assert sl == pytest.approx(math.log(ppl), abs=1e-6)

    def test_tld_is_antisymmetric(self):
        """Swapping correct and wrong answers negates tld."""
        for view, tokens in _identity_cases():
            if len(tokens) < 3:
                continue
            prompt, answer = tokens[:1], tokens[1:]
            wrong = tuple((t + 1) % 20 for t in answer)
            forward = PromptAnswerPair.from_parts(prompt, answer, [wrong])
            backward = PromptAnswerPair.from_parts(prompt, wrong, [answer])

            a = task_likelihood_difference(view, forward).value
            b = task_likelihood_difference(view, backward).value

            assert a == pytest.approx(-b, abs=1e-9)

    def test_split_zero_scores_from_position_two(self):
        """S = 0 has no context for the first token; tl equals sl."""
        for view, tokens in list(_identity_cases())[:10]:
            pair = PromptAnswerPair(tokens=tokens, split_index=0)

            assert task_likelihood(view, pair).value == pytest.approx(
                sentence_likelihood(view, tokens).value, abs=1e-12
            )


class TestAgainstReference:
    """Compare criteria with NLLs from the numpy reference."""

    def test_tl_is_mean_answer_nll(self, tiny_model):
        pair = PromptAnswerPair.from_parts([1, 2, 3], [4, 5])
        nlls = reference_token_nlls(tiny_model, pair.tokens, [1, 2, 3, 4])

        value = task_likelihood(dense_view(tiny_model), pair).value

        assert value == pytest.approx(float(np.mean(nlls[2:])), abs=1e-5)

    def test_ppl_under_omission(self, tiny_model):
        """ppl of a pruned view uses only the surviving blocks."""
        tokens = (2, 7, 1, 8, 2)
        view = apply_omission(tiny_model, OmissionSet.of([1, 3]))
        nlls = reference_token_nlls(tiny_model, tokens, [2, 4])

        value = perplexity(view, tokens).value

        assert value == pytest.approx(float(np.exp(np.mean(nlls))), rel=1e-5)


class TestEdgeCases:
    """Test rejection of unscorable inputs."""

    def test_ppl_needs_two_tokens(self, tiny_model):
        with pytest.raises(InsufficientLengthError):
            perplexity(dense_view(tiny_model), (3,))

    def test_tld_needs_wrong_answer(self, tiny_model):
        pair = PromptAnswerPair.from_parts([1, 2], [3])

        with pytest.raises(MissingContrastError):
            task_likelihood_difference(dense_view(tiny_model), pair)

    def test_tl_with_single_token_and_no_context(self, tiny_model):
        """S = 0 and T = 1 leaves no scorable position."""
        pair = PromptAnswerPair(tokens=(3,), split_index=0)

        with pytest.raises(InsufficientLengthError):
            task_likelihood(dense_view(tiny_model), pair)

    def test_empty_dataset(self, tiny_model):
        with pytest.raises(EmptyDatasetError):
            dataset_loss(dense_view(tiny_model), [], Criterion.TL)

    def test_failing_sample_is_named(self, tiny_model):
        """The index of the pair that could not be scored is attached."""
        good = PromptAnswerPair.from_parts([1, 2], [3], [[4]])
        no_contrast = PromptAnswerPair.from_parts([1, 2], [3])

        with pytest.raises(SampleEvaluationError) as info:
            dataset_loss(dense_view(tiny_model), [good, good, no_contrast], "tld")

        assert info.value.index == 2
        assert info.value.exit_code == 2


class TestDatasetLoss:
    """Test averaging and criterion dispatch."""

    def test_mean_of_sample_losses(self, tiny_model, tiny_dataset):
        view = dense_view(tiny_model)
        expected = np.mean([task_likelihood(view, p).value for p in tiny_dataset.pairs])

        value = dataset_loss(view, tiny_dataset.pairs, "tl")

        assert value.value == pytest.approx(float(expected), abs=1e-12)
        assert value.criterion == Criterion.TL

    @pytest.mark.parametrize("criterion", list(Criterion))
    def test_every_criterion_is_finite(self, tiny_model, tiny_dataset, criterion):
        value = sample_loss(dense_view(tiny_model), tiny_dataset.pairs[0], criterion)

        assert math.isfinite(value.value)


class TestMultipleChoice:
    """Test accuracy scoring on the synthetic fixture."""

    def test_own_blocks_omitted_prefers_correct_answer(self, task_fixture, task_eval):
        """Removing a task's damaging blocks makes its answers win."""
        own = OmissionSet.of(task_fixture.own_blocks(0))
        view = apply_omission(task_fixture.model, own)

        assert all(multiple_choice_correct(view, p) for p in task_eval[0].pairs)

    def test_needs_wrong_answers(self, tiny_model):
        pair = PromptAnswerPair.from_parts([1, 2], [3])

        with pytest.raises(MissingContrastError):
            multiple_choice_correct(dense_view(tiny_model), pair)
