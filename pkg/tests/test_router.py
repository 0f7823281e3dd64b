"""
Unit tests for the router: dataset, network, training and routing.

Tests functions from:
- routing/dataset.py
- routing/router_model.py
- routing/training.py
- routing/routing.py
"""

import logging

import numpy as np
import pydantic
import pytest
import torch
from torch.func import functional_call

from errors import (
    ConfigError,
    DivergenceError,
    EmptyDatasetError,
    InsufficientLengthError,
    PoolBindingError,
    SampleEvaluationError,
    ShapeError,
    ValidationError,
    VocabularyError,
)
from models.transformer import apply_omission
from routing.dataset import (
    RouterSample,
    build_router_dataset,
    label_matrix,
    load_router_dataset,
    save_router_dataset,
    split_samples,
)
from routing.router_model import RouterArch, RouterModel, build_router
from routing.routing import check_binding, evaluate_router, route, score_predictions
from routing.training import (
    LabelMode,
    LossMode,
    TrainConfig,
    router_loss,
    train_router,
    warmup_factor,
)
from scoring.losses import PromptAnswerPair, sample_loss

FIXTURE_TRAIN = TrainConfig(
    learning_rate=0.01, weight_decay=0.0, batch_size=16, epochs=60, warmup_steps=10
)


def _pairs(datasets):
    return [pair for dataset in datasets for pair in dataset.pairs]


@pytest.fixture(scope="module")
def router_samples(task_fixture, task_pool, task_train) -> list[RouterSample]:
    return build_router_dataset(task_fixture.model, task_pool, _pairs(task_train))


@pytest.fixture(scope="module")
def fixture_arch(task_fixture) -> RouterArch:
    return RouterArch(
        vocab_size=task_fixture.model.config.vocab_size, embed_dim=16, n_layers=0
    )


@pytest.fixture
def small_arch() -> RouterArch:
    return RouterArch(vocab_size=6, embed_dim=4, n_layers=1, n_heads=2, ff_dim=8)


class TestRouterDataset:
    """Test labelling pairs with per-set losses."""

    def test_one_sample_per_pair(self, task_train, task_pool, router_samples):
        assert len(router_samples) == sum(len(d) for d in task_train)
        assert all(s.m == task_pool.m for s in router_samples)

    def test_label_is_loss_under_each_set(
        self, task_fixture, task_pool, task_train, router_samples
    ):
        pair = task_train[2].pairs[5]
        sample = router_samples[2 * 40 + 5]
        expected = [
            sample_loss(apply_omission(task_fixture.model, s), pair, "tl").value
            for s in task_pool.sets
        ]

        assert sample.prompt_tokens == pair.prompt
        assert sample.label == pytest.approx(expected, abs=1e-12)

    def test_own_set_has_lowest_label(self, router_samples):
        """Task t's prompts score best on pool entries 2t and 2t+1."""
        labels = label_matrix(router_samples)

        for i, row in enumerate(labels):
            task = i // 40
            assert row.argmin() in (2 * task, 2 * task + 1)

    def test_pool_from_other_model_rejected(self, tiny_model, task_pool, tiny_dataset):
        with pytest.raises(PoolBindingError):
            build_router_dataset(tiny_model, task_pool, tiny_dataset.pairs)

    def test_failing_pair_is_named(self, task_fixture, task_pool, task_train):
        good = task_train[0].pairs[0]
        no_contrast = PromptAnswerPair.from_parts(good.prompt, good.answer)

        with pytest.raises(SampleEvaluationError) as info:
            build_router_dataset(
                task_fixture.model, task_pool, [good, no_contrast], "tld"
            )

        assert info.value.index == 1
        assert info.value.exit_code == 2

    def test_no_pairs(self, task_fixture, task_pool):
        with pytest.raises(EmptyDatasetError):
            build_router_dataset(task_fixture.model, task_pool, [])

    def test_non_finite_label_rejected(self):
        with pytest.raises(ValidationError):
            RouterSample(prompt_tokens=(1,), label=(0.1, float("inf")))

    def test_inconsistent_label_lengths(self):
        samples = [
            RouterSample(prompt_tokens=(1,), label=(0.1, 0.2)),
            RouterSample(prompt_tokens=(2,), label=(0.3,)),
        ]

        with pytest.raises(ShapeError):
            label_matrix(samples)

    def test_jsonl_file(self, tmp_path, router_samples):
        path = save_router_dataset(router_samples[:5], tmp_path / "router.jsonl")
        loaded = load_router_dataset(path)

        assert [s.prompt_tokens for s in loaded] == [
            s.prompt_tokens for s in router_samples[:5]
        ]
        np.testing.assert_allclose(
            label_matrix(loaded), label_matrix(router_samples[:5]), rtol=1e-12
        )

    def test_empty_file_has_no_samples(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")

        assert load_router_dataset(path) == []


class TestSplitSamples:
    """Test the seeded train/validation split."""

    def _samples(self, n: int) -> list[RouterSample]:
        return [RouterSample(prompt_tokens=(i,), label=(float(i),)) for i in range(n)]

    def test_ninety_ten(self):
        train, val = split_samples(self._samples(10), 0.1, seed=5)

        assert len(train) == 9
        assert len(val) == 1
        assert set(train).isdisjoint(val)

    def test_seeded(self):
        samples = self._samples(20)

        first = split_samples(samples, 0.25, seed=1)

        assert split_samples(samples, 0.25, seed=1) == first

    def test_single_sample_stays_in_training(self):
        train, val = split_samples(self._samples(1), 0.5, seed=0)

        assert len(train) == 1
        assert val == []

    def test_fraction_range(self):
        with pytest.raises(ValidationError):
            split_samples(self._samples(4), 1.0, seed=0)


class TestRouterArch:
    """Test encoder shape validation."""

    def test_heads_must_divide_width(self):
        with pytest.raises(pydantic.ValidationError):
            RouterArch(vocab_size=8, embed_dim=5, n_layers=1, n_heads=2)

    def test_heads_ignored_without_layers(self):
        assert RouterArch(vocab_size=8, embed_dim=5, n_layers=0).embed_dim == 5

    def test_with_vocab_fills_only_unset(self):
        assert RouterArch().with_vocab(40).vocab_size == 40
        assert RouterArch(vocab_size=10).with_vocab(40).vocab_size == 10

    def test_model_needs_vocab(self):
        with pytest.raises(ConfigError):
            RouterModel(RouterArch(), m=3, pool_binding="0" * 64)

    def test_model_needs_an_output(self, small_arch):
        with pytest.raises(ShapeError):
            RouterModel(small_arch, m=0, pool_binding="0" * 64)


class TestEncodePrompts:
    """Test padding and validation of router input."""

    def test_padding_and_truncation(self):
        arch = RouterArch(vocab_size=6, embed_dim=4, n_layers=0, max_prompt_len=3)
        router = RouterModel(arch, m=2, pool_binding="0" * 64)

        ids, mask = router.encode_prompts([[1, 2, 3, 4, 5], [1]])

        assert ids.tolist() == [[1, 2, 3], [1, 6, 6]]
        assert mask.tolist() == [[True, True, True], [True, False, False]]

    def test_empty_prompt(self, small_arch):
        router = RouterModel(small_arch, m=2, pool_binding="0" * 64)

        with pytest.raises(InsufficientLengthError):
            router.encode_prompts([[1], []])

    def test_token_outside_vocabulary(self, small_arch):
        router = RouterModel(small_arch, m=2, pool_binding="0" * 64)

        with pytest.raises(VocabularyError):
            router.encode_prompts([[1, 6]])

    def test_padding_does_not_change_prediction(self, small_arch):
        """A prompt predicts the same alone and next to a longer one."""
        router = build_router(small_arch, m=3, pool_binding="0" * 64, seed=0)

        alone = router.predict([2, 3])
        batched = router.predict_many([[2, 3], [1, 2, 3, 4, 5]])[0]

        torch.testing.assert_close(alone, batched, atol=1e-6, rtol=0)


class TestBuildRouter:
    """Test seeded initialisation."""

    def test_same_seed_same_weights(self, small_arch):
        a = build_router(small_arch, 3, "0" * 64, seed=7)
        b = build_router(small_arch, 3, "0" * 64, seed=7)

        for (name, ta), tb in zip(
            a.state_dict().items(), b.state_dict().values(), strict=True
        ):
            assert torch.equal(ta, tb), name

    def test_global_rng_untouched(self, small_arch):
        before = torch.get_rng_state()
        build_router(small_arch, 3, "0" * 64, seed=7)

        assert torch.equal(before, torch.get_rng_state())


class TestRouterLoss:
    """Test the two training objectives."""

    def test_mse_sums_over_sets_and_averages_over_batch(self):
        predictions = torch.tensor([[1.0, 2.0], [0.0, 0.0]])
        labels = torch.tensor([[0.0, 0.0], [1.0, 1.0]])

        # (1 + 4 + 1 + 1) / 2
        assert float(router_loss(predictions, labels, "mse")) == pytest.approx(3.5)

    def test_ce_soft_matches_hand_computation(self):
        predictions = torch.tensor([[0.0, 1.0]])
        labels = torch.tensor([[1.0, 0.0]])
        target = torch.softmax(-labels, dim=-1)
        log_p = torch.log_softmax(-predictions, dim=-1)

        value = router_loss(predictions, labels, LossMode.CE, LabelMode.SOFT)

        assert float(value) == pytest.approx(float(-(target * log_p).sum()))

    def test_ce_onehot_targets_label_argmin(self):
        predictions = torch.tensor([[0.3, 0.1, 0.9]])
        labels = torch.tensor([[2.0, 0.5, 1.0]])
        log_p = torch.log_softmax(-predictions, dim=-1)

        value = router_loss(predictions, labels, "ce", "onehot")

        assert float(value) == pytest.approx(float(-log_p[0, 1]))

    def test_warmup_factor(self):
        assert warmup_factor(0, 4) == pytest.approx(0.25)
        assert warmup_factor(3, 4) == pytest.approx(1.0)
        assert warmup_factor(10, 4) == 1.0
        assert warmup_factor(0, 0) == 1.0


class TestGradients:
    """Analytic gradients agree with finite differences in float64."""

    @pytest.mark.parametrize(
        ("loss_mode", "label_mode"),
        [("mse", "soft"), ("ce", "soft"), ("ce", "onehot")],
    )
    def test_gradcheck_every_parameter(self, small_arch, loss_mode, label_mode):
        router = build_router(small_arch, m=3, pool_binding="0" * 64, seed=1).double()
        router.train()
        ids, mask = router.encode_prompts([[1, 2, 3], [4, 5], [0, 2, 4, 1]])
        labels = torch.tensor(
            [[0.3, 0.1, 0.7], [1.2, 0.4, 0.2], [0.5, 0.5, 0.9]], dtype=torch.float64
        )
        names = [name for name, _ in router.named_parameters()]
        params = tuple(
            p.detach().clone().requires_grad_(True) for p in router.parameters()
        )

        def objective(*tensors):
            predictions = functional_call(
                router, dict(zip(names, tensors, strict=True)), (ids, mask)
            )
            return router_loss(predictions, labels, loss_mode, label_mode)

        assert torch.autograd.gradcheck(
            objective, params, eps=1e-6, atol=1e-6, rtol=1e-4
        )


class TestTrainRouter:
    """Test optimisation on the synthetic fixture."""

    @pytest.mark.parametrize("loss_mode", ["mse", "ce"])
    def test_loss_decreases(self, router_samples, fixture_arch, task_pool, loss_mode):
        config = FIXTURE_TRAIN.model_copy(update={"epochs": 10})
        router = train_router(
            router_samples, config, fixture_arch, task_pool.fingerprint(), loss_mode
        )

        assert len(router.epoch_losses) == 10
        assert router.epoch_losses[-1] < router.epoch_losses[0]
        assert router.final_loss == router.epoch_losses[-1]

    def test_same_seed_same_router(self, router_samples, fixture_arch, task_pool):
        config = FIXTURE_TRAIN.model_copy(update={"epochs": 2})
        a = train_router(router_samples, config, fixture_arch, task_pool.fingerprint())
        b = train_router(router_samples, config, fixture_arch, task_pool.fingerprint())

        pairs = zip(a.state_dict().values(), b.state_dict().values(), strict=True)
        assert all(torch.equal(ta, tb) for ta, tb in pairs)

    def test_zero_epochs_returns_untrained(
        self, caplog, router_samples, fixture_arch, task_pool
    ):
        config = FIXTURE_TRAIN.model_copy(update={"epochs": 0})

        with caplog.at_level(logging.WARNING):
            router = train_router(
                router_samples, config, fixture_arch, task_pool.fingerprint()
            )

        assert "epochs=0" in caplog.text
        assert router.epoch_losses == []
        assert router.final_loss is not None

    def test_long_warmup_is_clipped(
        self, caplog, router_samples, fixture_arch, task_pool
    ):
        config = FIXTURE_TRAIN.model_copy(update={"epochs": 1, "warmup_steps": 500})

        with caplog.at_level(logging.WARNING):
            train_router(router_samples, config, fixture_arch, task_pool.fingerprint())

        assert "clipped" in caplog.text

    def test_non_finite_loss_raises(
        self, mocker, router_samples, fixture_arch, task_pool
    ):
        mocker.patch(
            "routing.training.router_loss",
            return_value=torch.tensor(float("nan"), requires_grad=True),
        )

        with pytest.raises(DivergenceError) as info:
            train_router(
                router_samples, FIXTURE_TRAIN, fixture_arch, task_pool.fingerprint()
            )

        assert info.value.step == 0
        assert info.value.exit_code == 3

    def test_no_samples(self, fixture_arch):
        with pytest.raises(EmptyDatasetError):
            train_router([], FIXTURE_TRAIN, fixture_arch, "0" * 64)


@pytest.mark.slow
class TestRouterLearnsTasks:
    """A trained router separates the fixture's tasks."""

    def test_held_out_accuracy(
        self, task_fixture, task_pool, task_eval, router_samples, fixture_arch
    ):
        router = train_router(
            router_samples, FIXTURE_TRAIN, fixture_arch, task_pool.fingerprint()
        )
        held_out = build_router_dataset(
            task_fixture.model, task_pool, _pairs(task_eval)
        )

        metrics = evaluate_router(router, held_out)

        assert metrics.accuracy >= 0.95
        assert metrics.n_samples == 36


class TestRoute:
    """Test argmin selection over the pool."""

    def _router(self, task_pool, bias) -> RouterModel:
        arch = RouterArch(vocab_size=24, embed_dim=4, n_layers=0)
        router = build_router(arch, task_pool.m, task_pool.fingerprint(), seed=0)
        with torch.no_grad():
            router.head.weight.zero_()
            router.head.bias.copy_(torch.tensor(bias))
        return router

    def test_index_is_one_based(self, task_pool):
        router = self._router(task_pool, [3.0, 2.0, 4.0, 0.5, 5.0, 5.0])

        result = route(router, [1, 2], task_pool)

        assert result.index == 4
        assert result.omission == task_pool.sets[3]
        assert result.predicted == pytest.approx((3.0, 2.0, 4.0, 0.5, 5.0, 5.0))

    def test_ties_go_to_lowest_index(self, task_pool):
        router = self._router(task_pool, [3.0, 1.0, 2.0, 1.0, 1.0, 5.0])

        assert route(router, [1], task_pool).index == 2

    def test_counts_routing_calls(self, task_pool):
        router = self._router(task_pool, [0.0] * 6)

        route(router, [1], task_pool)
        route(router, [2], task_pool)

        assert router.route_calls == 2

    def test_router_bound_to_other_pool(self, task_pool):
        arch = RouterArch(vocab_size=24, embed_dim=4, n_layers=0)
        router = build_router(arch, task_pool.m, "f" * 64, seed=0)

        with pytest.raises(PoolBindingError):
            check_binding(router, task_pool)

    def test_router_with_other_pool_size(self, task_pool):
        arch = RouterArch(vocab_size=24, embed_dim=4, n_layers=0)
        router = build_router(arch, task_pool.m + 1, task_pool.fingerprint(), seed=0)

        with pytest.raises(PoolBindingError, match="pool has"):
            route(router, [1], task_pool)

    @pytest.mark.parametrize("shift", [7.5, -2.25])
    def test_shifting_every_prediction_keeps_the_choice(self, task_pool, shift):
        bias = [3.0, 2.0, 4.0, 0.5, 5.0, 1.5]
        shifted = [b + shift for b in bias]

        base = route(self._router(task_pool, bias), [1, 2], task_pool)
        moved = route(self._router(task_pool, shifted), [1, 2], task_pool)

        assert moved.index == base.index
        assert moved.omission == base.omission


class TestScorePredictions:
    """Test router metrics."""

    def test_duplicate_minimum_counts_as_correct(self):
        predictions = np.array([[0.5, 0.1, 0.9], [2.0, 0.0, 1.0]])
        labels = np.array([[1.0, 1.0, 2.0], [0.0, 3.0, 1.0]])

        metrics = score_predictions(predictions, labels)

        assert metrics.accuracy == pytest.approx(0.5)
        assert metrics.regret == pytest.approx(1.5)
        assert metrics.mse == pytest.approx(15.27 / 6)
        assert metrics.n_samples == 2

    def test_perfect_router(self, router_samples):
        labels = label_matrix(router_samples)

        metrics = score_predictions(labels.copy(), labels)

        assert metrics.accuracy == 1.0
        assert metrics.regret == 0.0
        assert metrics.mse == 0.0

    def test_constant_router_regret(self, task_fixture, task_pool, router_samples):
        """A router that ignores its input always pays the same set's gap."""
        arch = RouterArch(
            vocab_size=task_fixture.model.config.vocab_size, embed_dim=4, n_layers=0
        )
        router = build_router(arch, task_pool.m, task_pool.fingerprint(), seed=0)
        with torch.no_grad():
            router.head.weight.zero_()
            router.head.bias.copy_(torch.tensor([2.0, 0.0, 1.0, 3.0, 4.0, 5.0]))
        labels = label_matrix(router_samples)

        metrics = evaluate_router(router, router_samples)

        gaps = labels[:, 1] - labels.min(axis=1)
        assert metrics.regret == pytest.approx(float(gaps.mean()), abs=1e-12)
        assert metrics.accuracy == pytest.approx(float(np.mean(gaps == 0.0)))
        assert metrics.n_samples == len(router_samples)

    def test_no_samples(self):
        with pytest.raises(EmptyDatasetError):
            score_predictions(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_empty_held_out(self, small_arch):
        router = RouterModel(small_arch, m=2, pool_binding="0" * 64)

        with pytest.raises(EmptyDatasetError):
            evaluate_router(router, [])


class TestConstantTargets:
    """Every label is the same constant vector c·1."""

    TARGET = 2.0
    PROMPTS = ([1, 2], [3], [4, 5, 1], [0, 0, 2], [5], [2, 4], [3, 1, 1, 0], [4])
    # One full-batch step per epoch at a small rate keeps Adam from overshooting.
    CONFIG = TrainConfig(
        learning_rate=0.002,
        weight_decay=0.0,
        batch_size=8,
        epochs=800,
        warmup_steps=0,
    )

    def _train(self, loss_mode) -> RouterModel:
        arch = RouterArch(vocab_size=6, embed_dim=4, n_layers=0)
        samples = [RouterSample(tuple(p), (self.TARGET,) * 3) for p in self.PROMPTS]
        return train_router(samples, self.CONFIG, arch, "0" * 64, loss_mode)

    def _settles(self, losses) -> bool:
        """Non-increasing up to one percent of the starting loss."""
        slack = 0.01 * losses[0]
        return all(b <= a + slack for a, b in zip(losses, losses[1:], strict=False))

    def test_mse_predicts_the_constant(self):
        router = self._train("mse")

        predictions = router.predict_many(list(self.PROMPTS))

        assert torch.all((predictions - self.TARGET).abs() < 0.1 * abs(self.TARGET))
        assert self._settles(router.epoch_losses)
        assert router.epoch_losses[-1] < router.epoch_losses[0]

    def test_ce_reaches_the_uniform_target(self):
        """Equal labels soften to a uniform target whose entropy is log m."""
        router = self._train("ce")

        assert self._settles(router.epoch_losses)
        assert router.epoch_losses[-1] <= router.epoch_losses[0]
        assert router.epoch_losses[-1] == pytest.approx(np.log(3), abs=0.05)
