"""
Bounded, order-preserving parallel map over a lazy item stream.
"""

import logging
from collections import deque
from collections.abc import Callable, Iterable, Iterator
from concurrent.futures import Future, ThreadPoolExecutor
from typing import TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(
    fn: Callable[[T], R],
    items: Iterable[T],
    workers: int = 1,
    max_pending: int | None = None,
    check: Callable[[], None] | None = None,
) -> Iterator[R]:
    """
    Apply ``fn`` to ``items`` on a thread pool, yielding results in input order.

    At most ``max_pending`` items (default ``2 * workers``) are submitted
    ahead of the consumer, so memory stays bounded for arbitrarily long
    streams. With one worker everything runs inline.

    Args:
        fn: Function applied to each item
        items: Input stream, consumed lazily
        workers: Thread count
        max_pending: Submitted-but-unconsumed bound
        check: Called before each submission; raise from it to stop early

    Yields:
        ``fn(item)`` for each item, in order
    """
    if workers <= 1:
        for item in items:
            if check is not None:
                check()
            yield fn(item)
        return

    limit = max(max_pending or 2 * workers, 1)
    pending: deque[Future] = deque()
    executor = ThreadPoolExecutor(max_workers=workers)
    try:
        for item in items:
            if check is not None:
                check()
            pending.append(executor.submit(fn, item))
            if len(pending) >= limit:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
    finally:
        for future in pending:
            future.cancel()
        executor.shutdown(wait=True, cancel_futures=True)
