"""Segment gather/scatter kernels: numba fast path with a numpy fallback.

These two operations (per-segment mean of embedding-table rows, and the
matching scatter-add backward) are the indexing-bound inner loops of
document/text encoding. Everything else in the package is BLAS-backed
numpy and gains nothing from JIT.

Backend selection: the numba path is compiled when numba imports and the
environment variable REALIGN_LAB_NUMBA is not "0"/"false"/"off" at import
time; otherwise the numpy path is used. `use_backend()` switches at
runtime (used by tests and by benchmarks/kernel_bench.py).

Both paths accumulate in identical element order, so results are
bit-identical between backends.
"""

from __future__ import annotations

import os

import numpy as np


def _env_wants_numba() -> bool:
    return os.environ.get("REALIGN_LAB_NUMBA", "1").strip().lower() not in (
        "0",
        "false",
        "off",
    )


# ---- numpy fallback ---------------------------------------------------------


def _segment_mean_numpy(table, tokens, offsets):
    n_seg = offsets.size - 1
    lengths = np.diff(offsets)
    out = np.zeros((n_seg, table.shape[1]), dtype=np.float64)
    seg_ids = np.repeat(np.arange(n_seg), lengths)
    np.add.at(out, seg_ids, table[tokens])
    out /= lengths[:, None].astype(np.float64)
    return out


def _segment_mean_backward_numpy(grad_seg, tokens, offsets, grad_table):
    n_seg = offsets.size - 1
    lengths = np.diff(offsets)
    seg_ids = np.repeat(np.arange(n_seg), lengths)
    inv = 1.0 / lengths.astype(np.float64)
    np.add.at(grad_table, tokens, grad_seg[seg_ids] * inv[seg_ids, None])


# ---- numba fast path --------------------------------------------------------

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True)
    def _segment_mean_numba(table, tokens, offsets):
        n_seg = offsets.size - 1
        dim = table.shape[1]
        out = np.zeros((n_seg, dim), dtype=np.float64)
        for s in range(n_seg):
            start = offsets[s]
            stop = offsets[s + 1]
            for i in range(start, stop):
                row = tokens[i]
                for d in range(dim):
                    out[s, d] += table[row, d]
            n = np.float64(stop - start)
            for d in range(dim):
                out[s, d] /= n
        return out

    @njit(cache=True)
    def _segment_mean_backward_numba(grad_seg, tokens, offsets, grad_table):
        n_seg = offsets.size - 1
        dim = grad_table.shape[1]
        for s in range(n_seg):
            start = offsets[s]
            stop = offsets[s + 1]
            inv = 1.0 / np.float64(stop - start)
            for i in range(start, stop):
                row = tokens[i]
                for d in range(dim):
                    grad_table[row, d] += grad_seg[s, d] * inv


_BACKENDS = {
    "numpy": (_segment_mean_numpy, _segment_mean_backward_numpy),
}
if HAVE_NUMBA:
    _BACKENDS["numba"] = (_segment_mean_numba, _segment_mean_backward_numba)

_active = "numba" if (HAVE_NUMBA and _env_wants_numba()) else "numpy"


def active_backend() -> str:
    return _active


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def use_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {sorted(_BACKENDS)}")
    _active = name


def segment_mean(table: np.ndarray, tokens: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Mean of ``table[tokens[start:stop]]`` rows for each offsets segment.

    All segments must be nonempty. Returns (n_segments, dim) float64.
    """
    return _BACKENDS[_active][0](table, tokens, offsets)


def segment_mean_scatter(
    grad_seg: np.ndarray,
    tokens: np.ndarray,
    offsets: np.ndarray,
    grad_table: np.ndarray,
) -> None:
    """Backward of `segment_mean`: adds grad_seg[s]/len(s) into grad_table rows."""
    _BACKENDS[_active][1](grad_seg, tokens, offsets, grad_table)
