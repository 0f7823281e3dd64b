"""
Unit tests for the benchmark harness.

Tests functions from:
- bench/compare.py
- bench/ablation.py
- bench/heatmap.py
- bench/reports.py
- bench/speedup.py
"""

import logging

import numpy as np
import polars as pl
import pytest

from bench.ablation import ablate_pool_size, ablate_training_loss, nested_pools
from bench.compare import METHOD_ORDER, compare_methods, evaluation_hash
from bench.heatmap import HeatmapTable, compute_heatmap
from bench.reports import emit_reports, write_heatmap, write_table
from bench.speedup import measure_speedup, synthetic_workload
from errors import ConfigError, EmptyWorkloadError, ValidationError
from loaders.block_store import BlockStore
from models.synthetic import random_model
from models.transformer import ModelConfig, OmissionSet
from models.weights_io import save_model
from routing.dataset import build_router_dataset, split_samples
from routing.router_model import RouterArch
from routing.training import TrainConfig, train_router
from scoring.losses import PromptAnswerPair

QUICK_TRAIN = TrainConfig(
    learning_rate=0.01, weight_decay=0.0, batch_size=16, epochs=2, warmup_steps=0
)
FIXTURE_TRAIN = QUICK_TRAIN.model_copy(update={"epochs": 60, "warmup_steps": 10})


def _by_task(datasets):
    return {d.name: list(d.pairs) for d in datasets}


def _flat(datasets):
    return [pair for d in datasets for pair in d.pairs]


@pytest.fixture(scope="module")
def fixture_arch(task_fixture) -> RouterArch:
    return RouterArch(
        vocab_size=task_fixture.model.config.vocab_size, embed_dim=16, n_layers=0
    )


class TestCompareMethods:
    """Test the static vs dynamic comparison table."""

    def test_rows_in_fixed_order(
        self, task_fixture, task_pool, task_eval, pinned_router
    ):
        table = compare_methods(
            task_fixture.model, task_pool, pinned_router, _by_task(task_eval)
        )

        assert [row.method for row in table.rows] == [str(m) for m in METHOD_ORDER]
        assert table.metric == "tl"

    def test_evaluation_hash_is_embedded(
        self, task_fixture, task_pool, task_eval, pinned_router
    ):
        pairs = _by_task(task_eval)

        table = compare_methods(task_fixture.model, task_pool, pinned_router, pairs)
        frame = table.to_frame()

        assert table.evaluation_hash == evaluation_hash(pairs)
        assert frame["evaluation_hash"].unique().to_list() == [table.evaluation_hash]
        assert frame.columns[:4] == ["method", "task_a", "task_b", "task_c"]

    def test_average_is_mean_over_tasks(
        self, task_fixture, task_pool, task_eval, pinned_router
    ):
        table = compare_methods(
            task_fixture.model, task_pool, pinned_router, _by_task(task_eval)
        )

        for row in table.rows:
            values = [value for _, value in row.task_values]
            assert row.average == pytest.approx(float(np.mean(values)), abs=1e-12)

    def test_per_task_static_uses_own_blocks(
        self, task_fixture, task_pool, task_eval, task_calibration, pinned_router
    ):
        table = compare_methods(
            task_fixture.model,
            task_pool,
            pinned_router,
            _by_task(task_eval),
            calibration={d.name: d for d in task_calibration},
        )

        provenance = table.row("static-per-task").provenance
        assert "task_a={1,2}" in provenance
        assert "task_c={5,6}" in provenance

    def test_accuracy_metric(self, task_fixture, task_pool, task_eval, pinned_router):
        table = compare_methods(
            task_fixture.model,
            task_pool,
            pinned_router,
            _by_task(task_eval),
            metric="accuracy",
        )

        # The pinned router always omits task_b's blocks.
        assert table.row("router").value("task_b") == 1.0
        assert all(0.0 <= row.average <= 1.0 for row in table.rows)

    def test_empty_task_skipped(
        self, caplog, task_fixture, task_pool, task_eval, pinned_router
    ):
        pairs = {**_by_task(task_eval[:2]), "empty": []}

        with caplog.at_level(logging.WARNING):
            table = compare_methods(task_fixture.model, task_pool, pinned_router, pairs)

        assert "empty" in caplog.text
        assert [task for task, _ in table.rows[0].task_values] == ["task_a", "task_b"]

    def test_all_tasks_empty(self, task_fixture, task_pool, pinned_router):
        with pytest.raises(ValidationError):
            compare_methods(task_fixture.model, task_pool, pinned_router, {"a": []})

    def test_missing_calibration(
        self, task_fixture, task_pool, task_eval, pinned_router
    ):
        with pytest.raises(ValidationError, match="calibration"):
            compare_methods(
                task_fixture.model,
                task_pool,
                pinned_router,
                _by_task(task_eval),
                calibration={"task_a": task_eval[0]},
            )

    def test_one_token_prompts_fall_back_to_static_global(
        self, task_fixture, task_pool, task_eval, pinned_router
    ):
        full = task_eval[0].pairs[0]
        short = PromptAnswerPair.from_parts(
            full.prompt[-1:], full.answer, full.wrong_answers
        )
        pairs = {"task_a": [short, full]}

        table = compare_methods(task_fixture.model, task_pool, pinned_router, pairs)

        row = table.row("per-prompt-greedy")
        assert "1 one-token prompts used static-global" in row.provenance
        assert np.isfinite(row.average)

    def test_selection_times_kept_out_of_scores(
        self, task_fixture, task_pool, task_eval, pinned_router
    ):
        table = compare_methods(
            task_fixture.model, task_pool, pinned_router, _by_task(task_eval)
        )

        timing = table.timing_frame()
        assert timing["method"].to_list() == [str(m) for m in METHOD_ORDER]
        assert (timing["seconds_per_prompt"] >= 0).all()
        assert "seconds_per_prompt" not in table.to_frame().columns


class TestPoolSizeAblation:
    """Test nested pools and the size sweep."""

    def test_pools_are_nested(self, task_fixture, task_calibration):
        pools = nested_pools(
            task_fixture.model, task_calibration, ["tl", "tld"], [1, 2, 4], k=2, seed=0
        )

        assert [pools[s].m for s in (1, 2, 4)] == [1, 2, 4]
        assert pools[4].sets[:2] == pools[2].sets
        assert pools[2].sets[:1] == pools[1].sets
        assert pools[1].provenance[0].dataset == "all_tasks"

    @pytest.mark.parametrize("size", [0, 7])
    def test_size_out_of_range(self, task_fixture, task_calibration, size):
        with pytest.raises(ConfigError):
            nested_pools(
                task_fixture.model, task_calibration, ["tl", "tld"], [size], k=2, seed=0
            )

    def test_size_one_is_static_global(
        self,
        task_fixture,
        task_pool,
        task_calibration,
        task_train,
        task_eval,
        pinned_router,
        fixture_arch,
    ):
        """A router over a single set always picks the global static set."""
        eval_pairs = _by_task(task_eval)
        frame = ablate_pool_size(
            task_fixture.model,
            task_calibration,
            ["tl"],
            [1],
            k=2,
            train_pairs=_flat(task_train)[:24],
            eval_pairs=eval_pairs,
            train_config=QUICK_TRAIN,
            arch=fixture_arch,
            seed=0,
        )
        table = compare_methods(
            task_fixture.model,
            task_pool,
            pinned_router,
            eval_pairs,
            calibration={d.name: d for d in task_calibration},
        )

        assert frame["routed_average"].item() == table.row("static-global").average
        assert frame["oracle_average"].item() == pytest.approx(
            frame["routed_average"].item(), abs=1e-12
        )

    def test_oracle_never_worsens_as_pool_grows(
        self, task_fixture, task_calibration, task_train, task_eval, fixture_arch
    ):
        """Nested pools: the best available set can only get better."""
        frame = ablate_pool_size(
            task_fixture.model,
            task_calibration,
            ["tl", "tld"],
            [1, 2, 4, 6],
            k=2,
            train_pairs=_flat(task_train)[:24],
            eval_pairs=_by_task(task_eval),
            train_config=QUICK_TRAIN,
            arch=fixture_arch,
            seed=0,
        ).sort("size")

        oracle = frame["oracle_average"].to_list()

        assert frame["m"].to_list() == [1, 2, 4, 6]
        assert all(b <= a + 1e-12 for a, b in zip(oracle, oracle[1:], strict=False))
        assert oracle[-1] < oracle[0]


class TestTrainingLossAblation:
    """Test the objective sweep."""

    def test_one_row_per_variant(
        self, task_fixture, task_pool, task_train, fixture_arch
    ):
        samples = build_router_dataset(task_fixture.model, task_pool, _flat(task_train))
        train, val = split_samples(samples, 0.1, seed=0)

        frame = ablate_training_loss(
            train, val, QUICK_TRAIN, fixture_arch, task_pool.fingerprint()
        )

        assert frame.select("loss_mode", "label_mode").rows() == [
            ("mse", "soft"),
            ("ce", "soft"),
            ("ce", "onehot"),
        ]
        assert frame["val_accuracy"].null_count() == 0

    def test_no_validation_data(
        self, task_fixture, task_pool, task_train, fixture_arch
    ):
        samples = build_router_dataset(
            task_fixture.model, task_pool, _flat(task_train)[:8]
        )

        frame = ablate_training_loss(
            samples, [], QUICK_TRAIN, fixture_arch, task_pool.fingerprint()
        )

        assert frame["val_accuracy"].null_count() == 3


class TestHeatmap:
    """Test per-task pruning rates."""

    def test_rates_of_pinned_router(self, task_pool, task_eval, pinned_router):
        table = compute_heatmap(pinned_router, task_pool, _by_task(task_eval), 6)

        assert table.tasks == ("task_a", "task_b", "task_c")
        expected = np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        for row in table.rates:
            np.testing.assert_array_equal(row, expected)

    def test_each_row_sums_to_k(self, task_pool, task_eval, pinned_router):
        table = compute_heatmap(pinned_router, task_pool, _by_task(task_eval), 6)

        np.testing.assert_allclose(table.rates.sum(axis=1), task_pool.k)

    def test_empty_task_has_no_row(self, task_pool, task_eval, pinned_router):
        pairs = {"task_a": list(task_eval[0].pairs), "empty": []}

        table = compute_heatmap(pinned_router, task_pool, pairs, 6)

        assert table.tasks == ("task_a",)
        assert table.skipped == ("empty",)
        assert table.rates.shape == (1, 6)


class TestReports:
    """Test the CSV, JSON and matrix writers."""

    def test_csv_uses_lf(self, tmp_path):
        frame = pl.DataFrame({"method": ["dense", "router"], "average": [0.5, 0.25]})

        csv_path, json_path = write_table(frame, tmp_path, "compare")

        raw = csv_path.read_bytes()
        assert b"\r" not in raw
        assert raw.decode("utf-8").splitlines()[0] == "method,average"
        assert json_path.exists()

    def test_heatmap_matrix(self, tmp_path):
        table = HeatmapTable(("a", "b"), np.array([[0.5, 0.0], [1.0, 0.25]]))

        paths = write_heatmap(table, tmp_path)

        lines = paths[-1].read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# a b"
        assert lines[1].split() == ["0.500000", "0.000000"]

    def test_emit_reports_in_name_order(self, tmp_path):
        results = {
            "zeta": pl.DataFrame({"x": [1]}),
            "alpha": pl.DataFrame({"x": [2]}),
            "heat": HeatmapTable(("a",), np.array([[1.0]])),
        }

        written = emit_reports(results, tmp_path / "bench")

        assert [p.name for p in written] == [
            "alpha.csv",
            "alpha.json",
            "heat.csv",
            "heat.json",
            "heat.dat",
            "zeta.csv",
            "zeta.json",
        ]


class TestMeasureSpeedup:
    """Test the timing harness."""

    def test_one_row_per_cell(self, weight_file):
        dense, routed = BlockStore(weight_file), BlockStore(weight_file)
        workload = synthetic_workload(16, [3, 5], per_length=2, seed=0)

        frame = measure_speedup(
            dense, routed, workload, [1, 2], omission=OmissionSet.of([2])
        )

        assert frame.select("prompt_length", "gen_length").rows() == [
            (3, 1),
            (3, 2),
            (5, 1),
            (5, 2),
        ]
        assert (frame["router_s"] == 0.0).all()
        assert (frame["total_speedup"] > 0).all()

    def test_empty_workload(self, weight_file):
        store = BlockStore(weight_file)

        with pytest.raises(EmptyWorkloadError):
            measure_speedup(store, store, [], [1])

    def test_too_few_repetitions(self, weight_file):
        store = BlockStore(weight_file)

        with pytest.raises(ValidationError, match="repetitions"):
            measure_speedup(store, store, [(1, 2)], [1], repetitions=4)

    def test_router_needs_pool(self, weight_file, pinned_router):
        store = BlockStore(weight_file)

        with pytest.raises(ValidationError, match="together"):
            measure_speedup(store, store, [(1, 2)], [1], router=pinned_router)


@pytest.mark.slow
class TestEndToEndQuality:
    """The trained router beats static and prompt-only omission on the fixture."""

    def test_router_beats_static_global_and_per_prompt(
        self,
        task_fixture,
        task_pool,
        task_calibration,
        task_train,
        task_eval,
        fixture_arch,
    ):
        samples = build_router_dataset(task_fixture.model, task_pool, _flat(task_train))
        router = train_router(
            samples, FIXTURE_TRAIN, fixture_arch, task_pool.fingerprint()
        )

        table = compare_methods(
            task_fixture.model,
            task_pool,
            router,
            _by_task(task_eval),
            calibration={d.name: d for d in task_calibration},
        )

        routed = table.row("router").average
        assert routed < table.row("static-global").average
        assert routed < table.row("per-prompt-greedy").average
        assert routed < table.row("dense").average


@pytest.mark.slow
class TestDepthSpeedup:
    """Omitting 7 of 32 blocks makes decoding measurably faster."""

    def test_seven_of_thirty_two(self, tmp_path):
        config = ModelConfig(
            vocab_size=64, d_model=64, d_ff=256, n_blocks=32, n_heads=4, max_seq_len=128
        )
        path = save_model(random_model(config, seed=0), tmp_path / "deep.pudw")
        workload = synthetic_workload(64, [64], per_length=4, seed=1)

        frame = measure_speedup(
            BlockStore(path),
            BlockStore(path),
            workload,
            [8],
            omission=OmissionSet.of([3, 9, 12, 17, 20, 26, 30]),
        )

        assert frame["total_speedup"].item() >= 1.10
