import queue
import threading
from typing import Callable, Dict, Iterable, List, Optional, TypeVar

from loguru import logger

T = TypeVar("T")
R = TypeVar("R")


class WorkerPool:
    """Daemon worker threads draining a shared task queue; results keep input order."""

    def __init__(self, workers: int = 1, name: str = "DRHGWorker"):
        self.workers = max(1, int(workers))
        self.name = name
        self.stop_event = threading.Event()
        self.threads: Dict[int, threading.Thread] = {}
        self.errors: List[BaseException] = []

    def _work(self, worker_id: int, fn: Callable, tasks: "queue.Queue", results: list) -> None:
        """Thread function: run tasks until the queue is empty or another worker failed"""
        while not self.stop_event.is_set():
            try:
                index, item = tasks.get_nowait()
            except queue.Empty:
                return
            try:
                results[index] = fn(item)
            except Exception as e:
                logger.error(f"{self.name}-{worker_id} failed on item {index}: {e}")
                self.errors.append(e)
                self.stop_event.set()
                return

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]

        tasks: "queue.Queue" = queue.Queue()
        for index, item in enumerate(items):
            tasks.put((index, item))
        results: List[Optional[R]] = [None] * len(items)
        self.stop_event.clear()
        self.errors.clear()

        for worker_id in range(min(self.workers, len(items))):
            self.threads[worker_id] = threading.Thread(
                target=self._work,
                args=(worker_id, fn, tasks, results),
                daemon=True,
                name=f"{self.name}-{worker_id}",
            )
            self.threads[worker_id].start()
        for thread in self.threads.values():
            thread.join()
        self.threads.clear()

        if self.errors:
            raise self.errors[0]
        logger.debug(f"{self.name}: {len(items)} items on {self.workers} workers")
        return results


def run_ordered(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    return WorkerPool(workers).map(fn, items)
