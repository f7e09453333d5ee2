"""Per-rank key/value cache over generation blocks with frame-aligned eviction.

Entries are keyed by block index. Writing the block that is already at the
tail (another denoising step of the same block) overwrites it in place; a new
block index moves the previous tail into history and appends. With a rolling
window, whole frames are dropped from the front of history until the cache
holds at most ``window_frames`` frames.
"""

from __future__ import annotations

import numpy as np

from .errors import AlignmentError, ConfigurationError, EmptyCacheError, ShapeError
from .tensor_core import SEQ, Shape4


class KvCache:
    def __init__(self, grid_hw: int, window_frames: int | None = None):
        if grid_hw < 1:
            raise ConfigurationError(f"grid_hw must be >= 1, got {grid_hw}")
        if window_frames is not None and window_frames < 1:
            raise ConfigurationError(f"window_frames must be >= 1 or None, got {window_frames}")
        self.grid_hw = grid_hw
        self.window_frames = window_frames
        self._past_k: np.ndarray | None = None
        self._past_v: np.ndarray | None = None
        self._cur_k: np.ndarray | None = None
        self._cur_v: np.ndarray | None = None
        self._cur_block: int | None = None

    def __len__(self) -> int:
        return self.seq_len

    @property
    def seq_len(self) -> int:
        n = 0 if self._past_k is None else self._past_k.shape[SEQ]
        return n + (0 if self._cur_k is None else self._cur_k.shape[SEQ])

    @property
    def cached_frames(self) -> int:
        return self.seq_len // self.grid_hw

    @property
    def current_block(self) -> int | None:
        return self._cur_block

    def _check_block(self, k: np.ndarray, v: np.ndarray) -> None:
        sk, sv = Shape4.of(k), Shape4.of(v)
        if sk != sv:
            raise ShapeError(f"key/value block shapes differ: {sk.as_tuple()} vs {sv.as_tuple()}")
        if sk.seq % self.grid_hw:
            raise AlignmentError(f"block length {sk.seq} is not a multiple of {self.grid_hw} tokens per frame")
        ref = self._cur_k if self._cur_k is not None else self._past_k
        if ref is not None:
            b, _, h, d = ref.shape
            if (sk.batch, sk.heads, sk.head_dim) != (b, h, d):
                raise ShapeError(f"block (B, H, D) = {(sk.batch, sk.heads, sk.head_dim)} != cache {(b, h, d)}")
        if self.window_frames is not None and sk.seq // self.grid_hw > self.window_frames:
            raise ConfigurationError(
                f"block of {sk.seq // self.grid_hw} frames does not fit a {self.window_frames}-frame window"
            )

    def update(self, k_block: np.ndarray, v_block: np.ndarray, block_index: int | None = None) -> "KvCache":
        """Store ``k_block``/``v_block`` for ``block_index`` (default: the next block).

        Re-writing the current tail block replaces its contents; block indices
        must otherwise increase.
        """
        self._check_block(k_block, v_block)
        if block_index is None:
            block_index = 0 if self._cur_block is None else self._cur_block + 1
        if self._cur_block is not None and block_index < self._cur_block:
            raise ConfigurationError(f"block {block_index} precedes cached block {self._cur_block}")
        if self._cur_block is not None and block_index != self._cur_block:
            self._past_k = self._cat(self._past_k, self._cur_k)
            self._past_v = self._cat(self._past_v, self._cur_v)
        self._cur_k = np.array(k_block, copy=True)
        self._cur_v = np.array(v_block, copy=True)
        self._cur_block = block_index
        self._evict()
        return self

    @staticmethod
    def _cat(a: np.ndarray | None, b: np.ndarray) -> np.ndarray:
        return b if a is None else np.concatenate([a, b], axis=SEQ)

    def _evict(self) -> None:
        if self.window_frames is None or self._past_k is None:
            return
        excess = self.cached_frames - self.window_frames
        if excess <= 0:
            return
        drop = excess * self.grid_hw
        if drop >= self._past_k.shape[SEQ]:
            self._past_k = self._past_v = None
        else:
            self._past_k = np.ascontiguousarray(self._past_k[:, drop:])
            self._past_v = np.ascontiguousarray(self._past_v[:, drop:])

    def read(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached (keys, values) in chronological order, (B, S_cached, H_shard, D)."""
        if self._cur_k is None:
            raise EmptyCacheError("KV cache is empty")
        if self._past_k is None:
            return self._cur_k, self._cur_v
        return self._cat(self._past_k, self._cur_k), self._cat(self._past_v, self._cur_v)
