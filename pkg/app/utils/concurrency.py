from typing import Callable, Iterable, List, TypeVar
import asyncio
import logging

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


async def bounded_map(fn: Callable[[T], R], items: Iterable[T], max_workers: int, label: str = "task") -> List[R]:
    """
    Run fn(item) in worker threads with at most max_workers in flight; results keep input order
    """
    semaphore = asyncio.Semaphore(max(1, max_workers))

    async def guarded(item: T) -> R:
        async with semaphore:
            logger.debug(f"Starting {label} {item!r}")
            try:
                return await asyncio.to_thread(fn, item)
            except Exception as e:
                logger.error(f"{label} {item!r} failed: {e}")
                raise

    return list(await asyncio.gather(*(guarded(item) for item in items)))
