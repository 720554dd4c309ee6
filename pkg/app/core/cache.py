import threading
from collections import OrderedDict
from typing import Any, Callable, Optional

from app.core.config import settings
from app.utils.logger import logger


class ArtifactCache:
    """Bounded in-process LRU for derived arrays (denoiser outputs, estimator maps)."""

    def __init__(self, max_items: Optional[int] = None):
        self.max_items = max_items or settings.cache_max_items
        self._items: OrderedDict[str, Any] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get_cached_data(self, key: str) -> Optional[Any]:
        with self._lock:
            if key in self._items:
                self._items.move_to_end(key)
                self.hits += 1
                logger.debug(f"Cache HIT for key: {key}")
                return self._items[key]
            self.misses += 1
            logger.debug(f"Cache MISS for key: {key}")
            return None

    def set_cached_data(self, key: str, data: Any) -> None:
        with self._lock:
            self._items[key] = data
            self._items.move_to_end(key)
            while len(self._items) > self.max_items:
                evicted, _ = self._items.popitem(last=False)
                logger.debug(f"Cache EVICTED key: {evicted}")

    def get_or_compute(self, key: str, compute: Callable[[], Any]) -> Any:
        cached = self.get_cached_data(key)
        if cached is not None:
            return cached
        value = compute()
        self.set_cached_data(key, value)
        return value

    def __len__(self) -> int:
        return len(self._items)


artifact_cache = ArtifactCache()
