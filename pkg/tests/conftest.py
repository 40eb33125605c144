"""Shared fixtures. The desk-scale dataset and pretrained checkpoint are
session-scoped and only built when an acceptance test asks for them."""

from pathlib import Path

import pytest

from loadvit.downstream import build_task_dataset
from loadvit.model import ModelConfig
from loadvit.pretrain import PretrainConfig, pretrain
from loadvit.synthgen import generate

DATA_DIR = Path(__file__).parent / "data"

SMALL = ModelConfig(encoder_layers=1, encoder_heads=2, encoder_dim=32, decoder_layers=1, decoder_dim=16)

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def small_tasks():
    ds = generate(6, 60, seed=1)
    b = ds.manifest.bounds
    return (build_task_dataset(ds.split("train"), b, stride_days=12),
            build_task_dataset(ds.split("test"), b, stride_days=24))


@pytest.fixture(scope="session")
def desk_dataset():
    return generate(150, 365, seed=0)


@pytest.fixture(scope="session")
def desk_tasks(desk_dataset):
    b = desk_dataset.manifest.bounds
    return (build_task_dataset(desk_dataset.split("train"), b, stride_days=6),
            build_task_dataset(desk_dataset.split("test"), b, stride_days=24))


@pytest.fixture(scope="session")
def desk_pretrained(desk_tasks):
    train, _ = desk_tasks
    cfg = PretrainConfig(steps=600, val_every=0, checkpoint_every=0)
    return pretrain(train.images, cfg).state


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        CRITERIA[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
