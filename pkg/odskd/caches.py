import os

from cachetools import LRUCache
from cachetools.keys import hashkey

# cache at most 64 loaded checkpoints, keyed on (path, mtime)
checkpoint_cache = LRUCache(maxsize=64)


def checkpoint_key(path) -> tuple:
    """Cache key for a checkpoint file, invalidated when the file changes."""
    resolved = os.path.realpath(path)
    return hashkey(resolved, os.stat(resolved).st_mtime_ns)
