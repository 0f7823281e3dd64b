"""
Pytest configuration and fixtures for pudding tests.

Provides reusable fixtures for:
- Tiny random models (learned and rotary positions)
- Weight files written to tmp_path
- Random calibration data
- The synthetic task-dependent fixture and its per-task datasets
- A router pinned to one pool entry
"""

from pathlib import Path

import pytest
import torch

from models.synthetic import (
    TaskFixture,
    build_task_dependent_fixture,
    random_model,
    sample_task_pairs,
)
from models.transformer import ModelConfig, PositionalKind, TransformerModel
from models.weights_io import save_model
from routing.router_model import RouterArch, RouterModel, build_router
from search.calibration import CalibrationDataset, random_pairs, records_to_pairs
from search.pool import CandidatePool, generate_pool


@pytest.fixture(autouse=True)
def _seed_torch():
    """Deterministic global RNG per test."""
    torch.manual_seed(0)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        vocab_size=16, d_model=8, d_ff=16, n_blocks=4, n_heads=2, max_seq_len=32
    )


@pytest.fixture
def tiny_model(tiny_config) -> TransformerModel:
    return random_model(tiny_config, seed=0)


@pytest.fixture
def rotary_model() -> TransformerModel:
    config = ModelConfig(
        vocab_size=16,
        d_model=8,
        d_ff=16,
        n_blocks=3,
        n_heads=2,
        pos_kind=PositionalKind.ROTARY,
        max_seq_len=32,
    )
    return random_model(config, seed=1)


@pytest.fixture
def weight_file(tmp_path, tiny_model) -> Path:
    """The tiny model written as a PUDW file."""
    return save_model(tiny_model, tmp_path / "tiny.pudw")


@pytest.fixture
def tiny_dataset(tiny_config) -> CalibrationDataset:
    """Eight random pairs: 4 prompt tokens, 3 answer tokens, one wrong answer."""
    pairs = random_pairs(tiny_config.vocab_size, n=8, length=7, split_index=4, seed=3)
    return CalibrationDataset("random", tuple(pairs))


@pytest.fixture(scope="session")
def task_fixture() -> TaskFixture:
    """Three tasks over six blocks; each task is repaired by omitting its own two."""
    return build_task_dependent_fixture()


def _task_datasets(fixture: TaskFixture, n: int, seed: int) -> list[CalibrationDataset]:
    return [
        CalibrationDataset(
            task.name, tuple(records_to_pairs(sample_task_pairs(task, n, seed + t)))
        )
        for t, task in enumerate(fixture.tasks)
    ]


@pytest.fixture(scope="session")
def task_calibration(task_fixture) -> list[CalibrationDataset]:
    return _task_datasets(task_fixture, n=12, seed=100)


@pytest.fixture(scope="session")
def task_train(task_fixture) -> list[CalibrationDataset]:
    return _task_datasets(task_fixture, n=40, seed=200)


@pytest.fixture(scope="session")
def task_eval(task_fixture) -> list[CalibrationDataset]:
    return _task_datasets(task_fixture, n=12, seed=300)


@pytest.fixture(scope="session")
def task_pool(task_fixture, task_calibration) -> CandidatePool:
    """Pool searched with tl and tld on each task's calibration data."""
    k = task_fixture.blocks_per_task
    return generate_pool(task_fixture.model, task_calibration, ["tl", "tld"], k)


@pytest.fixture
def pinned_router(task_fixture, task_pool) -> RouterModel:
    """Router whose predictions always favour pool entry 3 (task_b's tl set)."""
    arch = RouterArch(vocab_size=task_fixture.model.config.vocab_size, n_layers=0)
    router = build_router(arch, task_pool.m, task_pool.fingerprint(), seed=0)
    with torch.no_grad():
        router.head.weight.zero_()
        router.head.bias.copy_(torch.tensor([3.0, 3.0, 0.0, 3.0, 3.0, 3.0]))
    return router
