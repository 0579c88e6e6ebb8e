import asyncio
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable

logger = logging.getLogger(__name__)

RBMC_WORKERS = int(os.getenv("RBMC_WORKERS", "1"))


async def gather_jobs(fn: Callable[[Any], Any], payloads: list, workers: int | None = None) -> list:
    """Run fn over payloads concurrently, results in payload order.

    Jobs go to a process pool when more than one worker is configured and run
    inline otherwise. Every job finishes before the first failure is re-raised.
    """
    workers = RBMC_WORKERS if workers is None else workers
    if workers <= 1 or len(payloads) <= 1:
        return [fn(payload) for payload in payloads]

    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=min(workers, len(payloads))) as executor:
        tasks = [loop.run_in_executor(executor, fn, payload) for payload in payloads]
        results = await asyncio.gather(*tasks, return_exceptions=True)

    failures = [r for r in results if isinstance(r, Exception)]
    for failure in failures:
        logger.error(f"Job failed: {failure!r}")
    if failures:
        raise failures[0]
    logger.info(f"Finished {len(results)} jobs on {workers} workers")
    return results


def run_jobs(fn: Callable[[Any], Any], payloads: list, workers: int | None = None) -> list:
    """Blocking wrapper around gather_jobs for synchronous callers."""
    return asyncio.run(gather_jobs(fn, payloads, workers))
