from __future__ import annotations

from collections import OrderedDict


class BlockCache:
    """LRU cache of decoded blocks keyed by ``(run_id, block_index)``."""

    def __init__(self, capacity_blocks: int):
        self.capacity = max(0, int(capacity_blocks))
        self._blocks: OrderedDict = OrderedDict()

    def __len__(self) -> int:
        return len(self._blocks)

    def get(self, key):
        block = self._blocks.get(key)
        if block is not None:
            self._blocks.move_to_end(key)
        return block

    def put(self, key, block) -> None:
        if self.capacity == 0:
            return
        self._blocks[key] = block
        self._blocks.move_to_end(key)
        while len(self._blocks) > self.capacity:
            self._blocks.popitem(last=False)

    def resize(self, capacity_blocks: int) -> None:
        self.capacity = max(0, int(capacity_blocks))
        while len(self._blocks) > self.capacity:
            self._blocks.popitem(last=False)

    def drop_run(self, run_id: int, n_blocks: int) -> None:
        for b in range(n_blocks):
            self._blocks.pop((run_id, b), None)
