import logging
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Any, Callable, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


class FitPool:
    """Run per-chunk work on a thread pool with scheduling-independent randomness.

    Chunk ``i`` always receives the generator built from the ``i``-th child of
    ``SeedSequence(seed)``, so results do not depend on ``max_workers``.
    """

    def __init__(self, max_workers: int = 4):
        self.max_workers = max(1, int(max_workers))
        self.thread_pool = ThreadPoolExecutor(max_workers=self.max_workers)
        self.tasks: List[Future] = []

    def run_in_thread(self, func: Callable, *args, **kwargs) -> Future:
        """Submit one call to the pool."""
        task = self.thread_pool.submit(func, *args, **kwargs)
        self.tasks.append(task)
        return task

    def map_chunks(self, func: Callable[[slice, np.random.Generator], Any], total: int,
                   chunk_size: int, seed: int) -> List[Any]:
        """Call ``func(chunk_slice, rng)`` for consecutive chunks of ``range(total)``.

        Results come back in chunk order. The first failure is re-raised once
        every chunk has settled, so no chunk outlives the call.
        """
        bounds = [slice(start, min(start + chunk_size, total)) for start in range(0, total, chunk_size)]
        children = np.random.SeedSequence(seed).spawn(len(bounds))
        futures = [self.run_in_thread(func, chunk, np.random.default_rng(child))
                   for chunk, child in zip(bounds, children)]
        logger.debug("submitted %d chunks of <= %d samples to %d workers",
                     len(futures), chunk_size, self.max_workers)
        try:
            return [f.result() for f in futures]
        finally:
            self.wait_all()

    def wait_all(self) -> None:
        """Block until every submitted task has finished, then forget them."""
        for task in self.tasks:
            task.exception()
        self.tasks.clear()

    def cleanup(self) -> None:
        """Cancel pending work and shut the pool down."""
        for task in self.tasks:
            if not task.done():
                task.cancel()
        self.thread_pool.shutdown(wait=True)

    def __enter__(self) -> "FitPool":
        return self

    def __exit__(self, *exc_info: Optional[Any]) -> None:
        self.cleanup()
