from collections.abc import Callable, Hashable
from threading import Lock

import numpy as np
import numpy.typing as npt
from cachetools import LRUCache
from cachetools.keys import hashkey

from mflead._internal.constants import INTERACTION_CACHE_SIZE
from mflead._internal.state import _GLOBAL_STATE


class InteractionCache:
    """
    Bounded LRU cache of dense interaction matrices between fixed node sets.

    Grid views always present the same spatial nodes, so the bounded-confidence and Gaussian
    concentration matrices only depend on the kernel parameters and the grid. Particle views move
    every step and never reach this cache.
    """

    def __init__(self, maxsize: int = INTERACTION_CACHE_SIZE):
        self.cache: LRUCache = LRUCache(maxsize=maxsize)
        self.lock = Lock()  # Protects insertion

    @staticmethod
    def key(kind: str, params: tuple, target_key: Hashable, source_key: Hashable) -> Hashable:
        return hashkey(kind, params, target_key, source_key)

    def get(self, key: Hashable, build: Callable[[], npt.NDArray[np.float64]]) -> npt.NDArray[np.float64]:
        with self.lock:
            value = self.cache.get(key)
        if value is None:
            _GLOBAL_STATE.logger.debug("Building interaction matrix for %s", key)
            value = build()
            value.setflags(write=False)
            with self.lock:
                self.cache[key] = value
        return value

    def clear(self) -> None:
        with self.lock:
            self.cache.clear()


_INTERACTION_CACHE = InteractionCache()
