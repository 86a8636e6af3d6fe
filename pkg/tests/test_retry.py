"""Tests for the reseeding retry loop and the cell orchestrator."""

import threading

import pytest

from tensorar.models import MaxAttemptsExceeded
from tensorar.orchestrator import run_cells
from tensorar.retry import retry_with_reseed


def test_retry_returns_first_success():
    """Attempts are numbered from zero until one is accepted."""
    seen = []

    def operation(attempt):
        seen.append(attempt)
        if attempt < 2:
            raise ValueError("rejected")
        return attempt * 10

    assert retry_with_reseed(operation, 5, "draw") == 20
    assert seen == [0, 1, 2]


def test_retry_gives_up():
    """The last rejection is chained to MaxAttemptsExceeded."""

    def operation(attempt):
        raise ValueError(f"attempt {attempt}")

    with pytest.raises(MaxAttemptsExceeded, match="draw failed after 3 attempts") as info:
        retry_with_reseed(operation, 3, "draw")
    assert isinstance(info.value.__cause__, ValueError)
    assert str(info.value.__cause__) == "attempt 2"


def test_run_cells_inline_keeps_order():
    """A single thread runs cells in order."""
    order = []
    cells = [lambda i=i: order.append(i) or i for i in range(4)]

    assert run_cells(cells, threads=1) == [0, 1, 2, 3]
    assert order == [0, 1, 2, 3]


def test_run_cells_threaded_returns_submission_order():
    """Concurrent results come back in submission order."""
    names = set()

    def make_cell(i):
        def cell():
            names.add(threading.current_thread().name)
            return i * i

        return cell

    results = run_cells([make_cell(i) for i in range(8)], threads=3)

    assert results == [i * i for i in range(8)]
    assert names


def test_run_cells_empty():
    """No cells, no results."""
    assert run_cells([], threads=4) == []
