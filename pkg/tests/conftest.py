"""Shared fixtures: keep torch single-threaded so runs are bit-reproducible."""

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_synth():
    """Small deterministic dataset shared by tests that only need real-ish samples."""
    from concealdet.data import SynthConfig, generate_synthetic

    cfg = SynthConfig(image_size=64, n_train=8, n_test=4, texture_seed=7)
    train, test = generate_synthetic(cfg)
    return cfg, train, test


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


CRITERION_LINES: dict[int, str] = {}


@pytest.fixture()
def record_criterion():
    """Collect one PASS/FAIL line per acceptance criterion for the summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        status = "PASS" if passed else "FAIL"
        CRITERION_LINES[number] = f"CRITERION {number}: {status} ({detail})"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERION_LINES):
            terminalreporter.write_line(CRITERION_LINES[number])
