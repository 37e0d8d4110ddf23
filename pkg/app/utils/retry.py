from tenacity import (
    Retrying,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
    wait_none,
)
import logging

from app.exceptions import SolverDivergence

logger = logging.getLogger(__name__)


def create_retry_decorator(max_attempts: int = 5, exceptions=(OSError,)):
    """
    Retry decorator with exponential backoff for transient filesystem errors
    """
    return retry(
        retry=retry_if_exception_type(exceptions),
        wait=wait_exponential(multiplier=0.1, min=0.1, max=5),
        stop=stop_after_attempt(max_attempts),
        reraise=True,
        before_sleep=lambda retry_state: logger.info(
            f"Retrying after {retry_state.next_action.sleep} seconds... (attempt {retry_state.attempt_number})"
        ),
    )


def solver_attempts(max_attempts: int) -> Retrying:
    """
    Attempts for the fixed-point solver; each retry restarts with a smaller damping factor
    """
    return Retrying(
        retry=retry_if_exception_type(SolverDivergence),
        wait=wait_none(),
        stop=stop_after_attempt(max_attempts),
        reraise=True,
        before_sleep=lambda retry_state: logger.debug(
            f"Solver did not converge, retrying with stronger damping (attempt {retry_state.attempt_number})"
        ),
    )
