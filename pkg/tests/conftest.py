"""Independent oracles shared by the test modules.

These deliberately avoid the package's own kernels: plain Python loops,
``math`` and built-in complex numbers.
"""

import cmath
import math

import numpy as np
import pytest


def naive_attention(q, k, v):
    """Triple-loop softmax attention, one (batch, head, query) at a time."""
    b_, sq, h_, d = q.shape
    sk = k.shape[1]
    out = np.zeros_like(q)
    for b in range(b_):
        for h in range(h_):
            for i in range(sq):
                logits = [sum(q[b, i, h, x] * k[b, j, h, x] for x in range(d)) / math.sqrt(d) for j in range(sk)]
                m = max(logits)
                w = [math.exp(z - m) for z in logits]
                total = sum(w)
                for x in range(d):
                    out[b, i, h, x] = sum(w[j] * v[b, j, h, x] for j in range(sk)) / total
    return out


def band_angle(position, j, pairs, base):
    return position * base ** (-2.0 * j / (2.0 * pairs))


def complex_rope_oracle(x, grid_fhw, start_frame, band_split, base):
    """Rotate a full block by enumerating (t, h, w) triples and multiplying complex pairs."""
    f_, hg, wg = grid_fhw
    out = np.empty_like(x)
    p_t, p_h, p_w = band_split
    idx = 0
    for t in range(f_):
        for r in range(hg):
            for c in range(wg):
                angles = (
                    [band_angle(t + start_frame, j, p_t, base) for j in range(p_t)]
                    + [band_angle(r, j, p_h, base) for j in range(p_h)]
                    + [band_angle(c, j, p_w, base) for j in range(p_w)]
                )
                for b in range(x.shape[0]):
                    for h in range(x.shape[2]):
                        for j, phi in enumerate(angles):
                            z = complex(x[b, idx, h, 2 * j], x[b, idx, h, 2 * j + 1]) * cmath.exp(1j * phi)
                            out[b, idx, h, 2 * j] = z.real
                            out[b, idx, h, 2 * j + 1] = z.imag
                idx += 1
    return out


def chunk_transfer_count(local_sizes_by_peer):
    """Sum the sizes of every (sender -> other receiver) chunk."""
    p = len(local_sizes_by_peer)
    return sum(local_sizes_by_peer[i][j] for i in range(p) for j in range(p) if i != j)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (title, passed); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {title}")
