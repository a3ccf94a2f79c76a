"""Deterministic dense-vector primitives and probabilistic kernels.

Everything here is fp64 and pure; reduction order inside one call is fixed,
so repeated calls are bit-stable.
"""

from __future__ import annotations

import numpy as np

PROB_SUM_TOL = 1e-9


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Validate and return a finite 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_probability_vector(values, name: str = "distribution") -> np.ndarray:
    """Validate entries >= 0 summing to 1 within PROB_SUM_TOL."""
    arr = as_vector(values, name)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if np.any(arr < 0.0):
        raise ValueError(f"{name} has negative entries")
    total = float(np.sum(arr))
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"{name} sums to {total!r}, not 1")
    return arr


def cosine(u, v) -> float:
    """Cosine similarity dot(u,v)/(|u||v|), clipped to [-1, 1]."""
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero-norm input")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Max-shifted softmax of scores/temperature.

    Scaling happens before the shift, so softmax(s, t) == softmax(s/t, 1)
    bitwise.
    """
    s = as_vector(scores, "scores")
    if s.size == 0:
        raise ValueError("softmax of empty scores")
    if not (temperature > 0.0) or not np.isfinite(temperature):
        raise ValueError(f"temperature must be a positive finite scalar, got {temperature!r}")
    z = s / temperature
    z = z - np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def log_softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """log of `softmax`, computed without underflowing small probabilities."""
    s = as_vector(scores, "scores")
    if s.size == 0:
        raise ValueError("log_softmax of empty scores")
    if not (temperature > 0.0) or not np.isfinite(temperature):
        raise ValueError(f"temperature must be a positive finite scalar, got {temperature!r}")
    z = s / temperature
    z = z - np.max(z)
    return z - np.log(np.sum(np.exp(z)))


def kl_divergence(p, q) -> float:
    """Sum of p_i * ln(p_i / q_i) with the 0*ln(0/q) = 0 convention.

    Caller guarantees q_i > 0 wherever p_i > 0 (true for softmax outputs);
    tiny negative rounding residue near p == q is clamped to 0.
    """
    p = as_probability_vector(p, "p")
    q = as_probability_vector(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    mask = p > 0.0
    with np.errstate(divide="ignore"):
        terms = p[mask] * (np.log(p[mask]) - np.log(q[mask]))
    return max(float(np.sum(terms)), 0.0)
