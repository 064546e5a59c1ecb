from __future__ import annotations

from concurrent.futures import Future, ThreadPoolExecutor
from typing import Any, Callable, Optional


class Worker:
    """Runs *fn* and settles *future* with its return value or exception."""

    def __init__(self, fn: Callable[[], Any]) -> None:
        self._fn = fn
        self.future: Future = Future()

    def run(self) -> Future:
        try:
            self.future.set_result(self._fn())
        except BaseException as exc:  # surfaced when the caller reads the result
            self.future.set_exception(exc)
        return self.future


class WorkerPool:
    """Thread pool for independent computations; ``parallelism <= 1`` runs inline."""

    def __init__(self, parallelism: int = 1) -> None:
        self.parallelism = parallelism
        self._executor: Optional[ThreadPoolExecutor] = (
            ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix="halos")
            if parallelism > 1 else None
        )

    def submit(self, fn: Callable[[], Any]) -> Future:
        if self._executor is None:
            return Worker(fn).run()
        return self._executor.submit(fn)

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc: object) -> None:
        self.shutdown()
