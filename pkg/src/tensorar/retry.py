"""Capped retry loop for randomized constructions."""

import logging
from typing import Callable, TypeVar

from .models import MaxAttemptsExceeded

logger = logging.getLogger(__name__)

T = TypeVar("T")


def retry_with_reseed(
    operation: Callable[[int], T],
    max_attempts: int,
    operation_name: str = "operation",
) -> T:
    """
    Call an operation with attempt numbers 0, 1, ... until it succeeds.

    The operation derives its random stream from the attempt number, so a
    failed draw is replaced by a fresh, reproducible one.

    Args:
        operation: Callable taking the attempt number; raising means reject
        max_attempts: Maximum number of attempts
        operation_name: Name of the operation for logging

    Returns:
        Result of the first successful attempt

    Raises:
        MaxAttemptsExceeded: If every attempt was rejected
    """
    last_exception: Exception | None = None

    for attempt in range(max_attempts):
        try:
            result = operation(attempt)
            if attempt:
                logger.debug(f"{operation_name} accepted after {attempt + 1} attempts")
            return result
        except Exception as e:
            last_exception = e
            logger.debug(
                f"{operation_name} rejected (attempt {attempt + 1}/{max_attempts}): {e}"
            )

    raise MaxAttemptsExceeded(
        f"{operation_name} failed after {max_attempts} attempts: {last_exception}"
    ) from last_exception
