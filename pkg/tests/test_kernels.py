import numpy as np
import pytest

from realign_lab import _kernels

BACKENDS = _kernels.available_backends()


def _random_case(rng, n_segments=37, dim=9, vocab=23):
    lengths = rng.integers(1, 6, size=n_segments)
    offsets = np.zeros(n_segments + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(lengths)
    tokens = rng.integers(0, vocab, size=int(offsets[-1])).astype(np.int64)
    table = rng.normal(size=(vocab, dim))
    return table, tokens, offsets


def _reference_mean(table, tokens, offsets):
    out = np.zeros((offsets.size - 1, table.shape[1]))
    for s in range(offsets.size - 1):
        rows = table[tokens[offsets[s] : offsets[s + 1]]]
        out[s] = rows.mean(axis=0)
    return out


def _reference_scatter(grad_seg, tokens, offsets, vocab, dim):
    out = np.zeros((vocab, dim))
    for s in range(offsets.size - 1):
        n = offsets[s + 1] - offsets[s]
        for i in range(offsets[s], offsets[s + 1]):
            out[tokens[i]] += grad_seg[s] / n
    return out


@pytest.fixture(autouse=True)
def _restore_backend():
    before = _kernels.active_backend()
    yield
    _kernels.use_backend(before)


@pytest.mark.parametrize("backend", BACKENDS)
def test_segment_mean_matches_reference(backend):
    _kernels.use_backend(backend)
    rng = np.random.default_rng(5)
    for _ in range(20):
        table, tokens, offsets = _random_case(rng)
        out = _kernels.segment_mean(table, tokens, offsets)
        np.testing.assert_allclose(out, _reference_mean(table, tokens, offsets), atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_scatter_matches_reference(backend):
    _kernels.use_backend(backend)
    rng = np.random.default_rng(6)
    for _ in range(20):
        table, tokens, offsets = _random_case(rng)
        grad_seg = rng.normal(size=(offsets.size - 1, table.shape[1]))
        grad_table = np.zeros_like(table)
        _kernels.segment_mean_scatter(grad_seg, tokens, offsets, grad_table)
        expected = _reference_scatter(grad_seg, tokens, offsets, *table.shape)
        np.testing.assert_allclose(grad_table, expected, atol=1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="numba backend unavailable")
def test_backends_bit_identical():
    rng = np.random.default_rng(7)
    for _ in range(10):
        table, tokens, offsets = _random_case(rng)
        grad_seg = rng.normal(size=(offsets.size - 1, table.shape[1]))

        _kernels.use_backend("numpy")
        mean_np = _kernels.segment_mean(table, tokens, offsets)
        scat_np = np.zeros_like(table)
        _kernels.segment_mean_scatter(grad_seg, tokens, offsets, scat_np)

        _kernels.use_backend("numba")
        mean_nb = _kernels.segment_mean(table, tokens, offsets)
        scat_nb = np.zeros_like(table)
        _kernels.segment_mean_scatter(grad_seg, tokens, offsets, scat_nb)

        assert np.array_equal(mean_np, mean_nb)
        assert np.array_equal(scat_np, scat_nb)


def test_backend_switching():
    assert _kernels.active_backend() in BACKENDS
    for name in BACKENDS:
        _kernels.use_backend(name)
        assert _kernels.active_backend() == name
    with pytest.raises(ValueError, match="unknown kernel backend"):
        _kernels.use_backend("cuda")
