import numpy as np
import pytest

from fedsim.config import ExperimentConfig


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    def make(**overrides):
        base = dict(n=400, d=5, num_classes=3, separation=4.0, num_clients=4, rounds=2,
                    epochs=1, batch_size=16, seed=3)
        base.update(overrides)
        return ExperimentConfig(**base).validate()

    return make


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {label}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
