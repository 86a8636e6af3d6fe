"""Concurrent execution of independent experiment cells."""

import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

logger = logging.getLogger(__name__)

R = TypeVar("R")


async def execute_cells(cells: Sequence[Callable[[], R]], threads: int) -> list[R]:
    """
    Run cells on a thread pool with at most ``threads`` in flight.

    Args:
        cells: Zero-argument callables; each must handle its own failures
        threads: Concurrency cap

    Returns:
        Results in submission order
    """
    logger.debug(f"Executing {len(cells)} cells on {threads} threads")
    semaphore = asyncio.Semaphore(threads)
    loop = asyncio.get_running_loop()

    with ThreadPoolExecutor(max_workers=threads) as executor:

        async def run_with_semaphore(cell: Callable[[], R]) -> R:
            async with semaphore:
                return await loop.run_in_executor(executor, cell)

        tasks = [run_with_semaphore(cell) for cell in cells]
        return list(await asyncio.gather(*tasks, return_exceptions=False))


def run_cells(cells: Sequence[Callable[[], R]], threads: int = 1) -> list[R]:
    """Synchronous entry point for :func:`execute_cells`.

    A single thread runs the cells inline, in order.
    """
    if threads <= 1 or len(cells) <= 1:
        return [cell() for cell in cells]
    return asyncio.run(execute_cells(cells, threads))
