import numpy as np
import pytest
import torch

from p2rec.data import InteractionDataset, SyntheticSpec, generate_synthetic

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="session")
def small_synthetic():
    spec = SyntheticSpec(num_users=120, num_items=40, num_categories=4, sharpness=50.0,
                         seq_len_range=(6, 12), seed=3)
    return generate_synthetic(spec)


def make_dataset(seqs, num_items=None):
    seqs = [np.asarray(s, dtype=np.int64) for s in seqs]
    n = num_items if num_items is not None else int(max(s.max() for s in seqs)) + 1
    return InteractionDataset(num_users=len(seqs), num_items=n, sequences=seqs)
