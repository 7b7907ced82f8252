"""
Cache management module for parsed datasets.
In-process LRU caches with per-entry TTL, keyed by callers (typically by file
fingerprint so a rewritten file is never served stale).
"""

import functools
import threading
import time
from typing import Dict, Any, Callable, TypeVar, Optional, Tuple
import logging

logger = logging.getLogger(__name__)

F = TypeVar('F', bound=Callable[..., Any])

DEFAULT_MAX_SIZE = 32
DEFAULT_TTL = 3600  # seconds; 0 disables expiry
CACHE_SIZES = {
    "idx_datasets": 8,  # Parsed image/label arrays are large
    "default": DEFAULT_MAX_SIZE
}

class Cache:
    """A single cache instance with LRU eviction and per-entry TTL."""
    def __init__(self, name: str, ttl: int = DEFAULT_TTL, max_size: int = DEFAULT_MAX_SIZE):
        self.name = name
        self.data: Dict[str, Tuple[Any, float, Optional[float]]] = {}  # (value, access_time, expiry_time)
        self.default_ttl = ttl
        self.max_size = CACHE_SIZES.get(name, max_size)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def get(self, key: str) -> Any:
        with self._lock:
            if key in self.data:
                value, _, expiry = self.data[key]
                if expiry is None or time.time() < expiry:
                    del self.data[key]
                    self.data[key] = (value, time.time(), expiry)  # most recent last
                    self.hits += 1
                    return value
                del self.data[key]
            self.misses += 1
            return None

    def set(self, key: str, value: Any, ttl: Optional[int] = None) -> None:
        with self._lock:
            if key not in self.data and len(self.data) >= self.max_size:
                self._evict_lru()
            effective = self.default_ttl if ttl is None else ttl
            expiry = time.time() + effective if effective else None
            self.data[key] = (value, time.time(), expiry)

    def _evict_lru(self) -> None:
        if not self.data:
            return
        lru_key = min(self.data, key=lambda k: self.data[k][1])
        del self.data[lru_key]
        logger.debug(f"Cache {self.name}: evicted {lru_key}")

    def stats(self) -> Dict[str, int]:
        return {"hits": self.hits, "misses": self.misses, "size": len(self.data)}

class CacheManager:
    """Holds named caches."""
    def __init__(self):
        self.caches: Dict[str, Cache] = {}
        self._lock = threading.Lock()

    def get_cache(self, cache_name: str, ttl: int = DEFAULT_TTL) -> Cache:
        """Retrieve or create a cache by name."""
        with self._lock:
            if cache_name not in self.caches:
                self.caches[cache_name] = Cache(cache_name, ttl)
                logger.debug(f"Spun up new cache: {cache_name} with TTL {ttl}s")
            return self.caches[cache_name]

    def clear_all(self) -> None:
        with self._lock:
            self.caches.clear()
        logger.debug("All caches cleared.")

cache_manager = CacheManager()

def clear_all_caches() -> None:
    """Clear all caches in the manager."""
    cache_manager.clear_all()

def get_cache_stats(cache_name: str) -> Dict[str, int]:
    """Get hit/miss stats for a cache."""
    return cache_manager.get_cache(cache_name).stats()

def cached(cache_name: str, key_func: Optional[Callable[..., str]] = None, ttl: Optional[int] = DEFAULT_TTL):
    """
    Decorator caching a function's return value.

    Results equal to None are never cached. Keys default to the function name
    plus its arguments' reprs.
    """
    def decorator(func: F) -> F:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            key = key_func(*args, **kwargs) if key_func else f"{func.__name__}:{args!r}:{kwargs!r}"
            cache = cache_manager.get_cache(cache_name, ttl if ttl is not None else DEFAULT_TTL)
            result = cache.get(key)
            if result is not None:
                return result
            result = func(*args, **kwargs)
            if result is not None:
                cache.set(key, result, ttl)
            return result
        return wrapper  # type: ignore[return-value]
    return decorator
