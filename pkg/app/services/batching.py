import queue
import threading
from collections import deque
from typing import Any, Callable, Iterator, Optional

from app.core.config import settings

_DONE = object()


class BatchPrefetcher:
    """Assembles batches for steps ``[start, stop)`` on a worker thread, at most ``depth`` ahead.

    ``make_batch(step)`` must depend on the step alone, so prefetching cannot change
    what a step sees. Use it as a context manager so the worker stops when the
    consumer leaves early, including by an exception.
    """

    def __init__(self, make_batch: Callable[[int], Any], start: int, stop: int, depth: Optional[int] = None):
        self.make_batch = make_batch
        self.start, self.stop = start, stop
        self._queue: queue.Queue = queue.Queue(maxsize=depth or settings.prefetch_depth)
        self._halt = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)

    def _put(self, item) -> bool:
        while not self._halt.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for step in range(self.start, self.stop):
                if not self._put((step, self.make_batch(step))):
                    return
        except BaseException as e:
            self._put(e)
            return
        self._put(_DONE)

    def __iter__(self) -> Iterator[tuple[int, Any]]:
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._halt.set()
        if self._thread.is_alive():
            self._thread.join(timeout=5)

    def __enter__(self) -> "BatchPrefetcher":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


class MovingAverage:
    """Mean of the last ``window`` values, compared window against window."""

    def __init__(self, window: int = 100):
        self.window = window
        self.values: deque = deque(maxlen=window)
        self.previous_mean: Optional[float] = None
        self._count = 0

    def update(self, value: float) -> Optional[bool]:
        """Add a value; at each full window return whether the mean did not increase."""
        self.values.append(value)
        self._count += 1
        if self._count % self.window:
            return None
        mean = sum(self.values) / len(self.values)
        previous, self.previous_mean = self.previous_mean, mean
        return True if previous is None else mean <= previous

    @property
    def mean(self) -> float:
        return sum(self.values) / len(self.values) if self.values else float("nan")
