"""
Unit tests for routed inference.

Tests functions from:
- pipelines/inference.py
"""

import json

import pytest
from errors import PoolBindingError
from loaders.block_store import BlockStore
from models.transformer import OmissionSet, apply_omission, greedy_decode
from models.weights_io import block_size_bytes, save_model
from pipelines.inference import (
    run_inference,
    timed_greedy_decode,
    write_reports,
)

SECOND_BLOCK_OMITTED = OmissionSet.of([2])


@pytest.fixture
def fixture_store(tmp_path, task_fixture) -> BlockStore:
    path = save_model(task_fixture.model, tmp_path / "fixture.pudw")
    return BlockStore(path, memory_cap=task_fixture.model.n_blocks - 2)


def _prompt(task_fixture, t: int) -> list[int]:
    task = task_fixture.tasks[t]
    return [*task.prompt_tokens[:3], task.query_token]


class TestRunInference:
    """Test one routed prompt end to end."""

    def test_report_fields(self, task_fixture, task_pool, fixture_store, pinned_router):
        prompt = _prompt(task_fixture, 1)

        tokens, report = run_inference(
            fixture_store, pinned_router, task_pool, prompt, max_new=3
        )

        survivors = task_pool.sets[2].survivors(task_fixture.model.n_blocks)
        assert report.routed_index == 3
        assert report.omission_set == task_pool.sets[2]
        assert report.blocks_loaded == survivors
        size = block_size_bytes(task_fixture.model.config)
        assert report.bytes_loaded == len(survivors) * size
        assert report.tokens_generated == 3
        assert len(tokens) == len(prompt) + 3

    def test_tokens_match_pruned_model(
        self, task_fixture, task_pool, fixture_store, pinned_router
    ):
        prompt = _prompt(task_fixture, 1)
        view = apply_omission(task_fixture.model, task_pool.sets[2])

        tokens, _ = run_inference(
            fixture_store, pinned_router, task_pool, prompt, max_new=4
        )

        assert tokens == greedy_decode(view, prompt, 4)

    def test_second_prompt_on_same_set_loads_nothing(
        self, task_fixture, task_pool, fixture_store, pinned_router
    ):
        first = _prompt(task_fixture, 0)
        run_inference(fixture_store, pinned_router, task_pool, first, 1)

        _, report = run_inference(
            fixture_store, pinned_router, task_pool, _prompt(task_fixture, 2), 1
        )

        assert report.bytes_loaded == 0
        assert report.blocks_loaded == ()

    def test_cache_gives_same_tokens(
        self, task_fixture, task_pool, fixture_store, pinned_router
    ):
        prompt = _prompt(task_fixture, 0)

        plain, _ = run_inference(fixture_store, pinned_router, task_pool, prompt, 5)
        cached, _ = run_inference(
            fixture_store, pinned_router, task_pool, prompt, 5, use_cache=True
        )

        assert plain == cached

    def test_store_of_other_model(self, weight_file, task_pool, pinned_router):
        with pytest.raises(PoolBindingError):
            run_inference(BlockStore(weight_file), pinned_router, task_pool, [1, 2], 1)


class TestTiming:
    """Test the pre-fill / generation split."""

    def test_split_at_first_token(self, mocker, tiny_model):
        mocker.patch(
            "pipelines.inference.time.perf_counter", side_effect=[10.0, 10.5, 12.0]
        )
        view = apply_omission(tiny_model, SECOND_BLOCK_OMITTED)

        timing = timed_greedy_decode(view, [1, 2, 3], max_new=3)

        assert timing.prefill_time == pytest.approx(0.5)
        assert timing.generation_time == pytest.approx(1.5)
        assert len(timing.generated) == 3

    def test_no_tokens_no_prefill(self, tiny_model):
        view = apply_omission(tiny_model, SECOND_BLOCK_OMITTED)

        timing = timed_greedy_decode(view, [1, 2], max_new=0)

        assert timing.generated == ()
        assert timing.prefill_time == 0.0


class TestWriteReports:
    """Test the inference report file."""

    def test_no_reports_writes_empty_file(self, tmp_path):
        path = write_reports([], tmp_path / "reports.jsonl")

        assert path.read_text(encoding="utf-8") == ""

    def test_one_line_per_report(
        self, tmp_path, task_fixture, task_pool, fixture_store, pinned_router
    ):
        reports = [
            run_inference(
                fixture_store, pinned_router, task_pool, _prompt(task_fixture, t), 2
            )[1]
            for t in range(3)
        ]

        path = write_reports(reports, tmp_path / "reports.jsonl")

        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 3
        first = json.loads(lines[0])
        assert first["routed_index"] == 3
        assert first["omission_set"] == list(task_pool.sets[2].indices)
        assert first["tokens_generated"] == 2
