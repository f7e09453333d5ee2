import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_sp.errors import AlignmentError, ConfigurationError, EmptyCacheError, ShapeError
from causal_sp.kv_cache import KvCache

HW = 4


def _block(frames, tag, heads=2, d=2):
    # every token carries its (tag, frame) so eviction can be checked by value
    x = np.zeros((1, frames * HW, heads, d))
    for f in range(frames):
        x[:, f * HW:(f + 1) * HW, :, 0] = tag
        x[:, f * HW:(f + 1) * HW, :, 1] = f
    return x


def _frames_of(keys):
    return [(int(keys[0, i * HW, 0, 0]), int(keys[0, i * HW, 0, 1])) for i in range(keys.shape[1] // HW)]


def test_append_to_empty():
    c = KvCache(HW).update(_block(3, 0), _block(3, 0))
    assert (c.cached_frames, c.seq_len, len(c)) == (3, 12, 12)
    k, v = c.read()
    assert k.shape == (1, 12, 2, 2)


def test_rolling_window_sequence():
    c = KvCache(HW, window_frames=6)
    seen = []
    for b in range(3):
        c.update(_block(3, b), _block(3, b), block_index=b)
        seen.append(c.cached_frames)
    assert seen == [3, 6, 6]
    assert _frames_of(c.read()[0]) == [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)]


def test_same_block_overwrites():
    c = KvCache(HW)
    c.update(_block(3, 0), _block(3, 0), block_index=0)
    c.update(_block(3, 1), _block(3, 1), block_index=1)
    new = _block(3, 9)
    c.update(new, new * 2, block_index=1)
    k, v = c.read()
    assert c.seq_len == 24
    np.testing.assert_array_equal(k[:, 12:], new)
    np.testing.assert_array_equal(v[:, 12:], new * 2)
    np.testing.assert_array_equal(k[:, :12], _block(3, 0))
    assert c.current_block == 1


def test_update_copies_inputs():
    k = _block(1, 5)
    c = KvCache(HW).update(k, k)
    k[:] = -1
    assert c.read()[0][0, 0, 0, 0] == 5


def test_default_block_index_advances():
    c = KvCache(HW)
    c.update(_block(1, 0), _block(1, 0))
    c.update(_block(1, 1), _block(1, 1))
    assert c.current_block == 1
    assert c.cached_frames == 2


def test_window_never_evicts_current_block():
    c = KvCache(HW, window_frames=3)
    for b in range(4):
        c.update(_block(3, b), _block(3, b), block_index=b)
        assert _frames_of(c.read()[0]) == [(b, 0), (b, 1), (b, 2)]


def test_partial_frame_eviction_keeps_whole_frames():
    c = KvCache(HW, window_frames=4)
    for b in range(3):
        c.update(_block(3, b), _block(3, b), block_index=b)
    assert _frames_of(c.read()[0]) == [(1, 2), (2, 0), (2, 1), (2, 2)]


@settings(max_examples=60, deadline=None)
@given(
    window=st.one_of(st.none(), st.integers(1, 12)),
    blocks=st.lists(st.tuples(st.integers(1, 3), st.integers(0, 2)), min_size=1, max_size=8),
)
def test_eviction_matches_list_simulation(window, blocks):
    """Compare against a plain list of (block, frame) labels."""
    c = KvCache(HW, window_frames=window)
    past, cur, idx = [], [], -1
    for frames, repeats in blocks:
        if window is not None and frames > window:
            continue
        idx += 1
        for step in range(repeats + 1):
            data = _block(frames, idx)
            c.update(data, data, block_index=idx)
            if step == 0:
                past += cur
            cur = [(idx, f) for f in range(frames)]
            if window is not None:
                while len(past) + len(cur) > window and past:
                    past.pop(0)
            assert _frames_of(c.read()[0]) == past + cur
            assert c.seq_len == c.cached_frames * HW
            if window is not None:
                assert c.cached_frames <= window


def test_replay_determinism(rng):
    blocks = [rng.standard_normal((1, 8, 2, 4)) for _ in range(5)]

    def replay():
        c = KvCache(2, window_frames=5)
        for i, b in enumerate(blocks):
            c.update(b, -b, block_index=i // 2)
        return c.read()

    a, b = replay(), replay()
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


class TestErrors:
    def test_empty_read(self):
        with pytest.raises(EmptyCacheError):
            KvCache(HW).read()

    def test_misaligned_block(self):
        with pytest.raises(AlignmentError):
            KvCache(HW).update(np.zeros((1, 6, 2, 2)), np.zeros((1, 6, 2, 2)))

    def test_kv_shape_mismatch(self):
        with pytest.raises(ShapeError):
            KvCache(HW).update(np.zeros((1, 4, 2, 2)), np.zeros((1, 4, 1, 2)))

    def test_head_shard_mismatch(self):
        c = KvCache(HW).update(_block(1, 0), _block(1, 0))
        with pytest.raises(ShapeError):
            c.update(_block(1, 1, heads=4), _block(1, 1, heads=4))

    def test_block_larger_than_window(self):
        with pytest.raises(ConfigurationError):
            KvCache(HW, window_frames=2).update(_block(3, 0), _block(3, 0))

    def test_block_index_going_backwards(self):
        c = KvCache(HW).update(_block(1, 0), _block(1, 0), block_index=3)
        with pytest.raises(ConfigurationError):
            c.update(_block(1, 0), _block(1, 0), block_index=2)

    @pytest.mark.parametrize("kwargs", [dict(grid_hw=0), dict(grid_hw=4, window_frames=0)])
    def test_bad_construction(self, kwargs):
        with pytest.raises(ConfigurationError):
            KvCache(**kwargs)
