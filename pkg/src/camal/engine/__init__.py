from .bloom import BloomFilter, allocation_fprs, design_fpr, monkey_allocate
from .cache import BlockCache
from .storage import FileStore, MemoryStore, StorageError
from .tree import (ConfigError, DeviceModel, IoStats, LsmTree, Run, cumulative_capacity_bytes,
                   level_capacity_entries, projected_level_sizes)

__all__ = [
    "BloomFilter", "allocation_fprs", "design_fpr", "monkey_allocate", "BlockCache", "FileStore",
    "MemoryStore", "StorageError", "ConfigError", "DeviceModel", "IoStats", "LsmTree", "Run",
    "cumulative_capacity_bytes", "level_capacity_entries", "projected_level_sizes",
]
