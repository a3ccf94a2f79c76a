"""Dual encoder: patch grids and token sequences to unit-norm embeddings.

Documents: per-patch mean token embedding + position embedding, one linear
projection, attention pooling against a learned query vector, output
projection, L2 normalize. Texts (queries and descriptions share the path):
mean token embedding, output projection, L2 normalize. The token table and
output projection are shared between both paths.

Forward passes are batched; `backward` consumes the forward cache and
accumulates exact fp64 gradients for every parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .corpus import SyntheticDocument

PARAM_FIELDS = (
    "token_table",
    "patch_projection",
    "position_table",
    "attention_query_vector",
    "output_projection",
)


@dataclass(frozen=True)
class EncoderDims:
    vocab_size: int
    d_model: int
    d_embed: int
    grid_rows: int
    grid_cols: int

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "d_embed", "grid_rows", "grid_cols"):
            if getattr(self, name) <= 0:
                raise ValueError(f"dims.{name} must be positive")

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def to_json_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "d_embed": self.d_embed,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EncoderDims":
        dims = cls(**{k: int(v) for k, v in d.items()})
        dims.validate()
        return dims


@dataclass
class EncoderParams:
    dims: EncoderDims
    token_table: np.ndarray
    patch_projection: np.ndarray
    position_table: np.ndarray
    attention_query_vector: np.ndarray
    output_projection: np.ndarray

    def validate(self) -> None:
        d = self.dims
        expected = {
            "token_table": (d.vocab_size, d.d_model),
            "patch_projection": (d.d_model, d.d_model),
            "position_table": (d.n_patches, d.d_model),
            "attention_query_vector": (d.d_model,),
            "output_projection": (d.d_model, d.d_embed),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"params.{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"params.{name} contains non-finite entries")

    def tensors(self):
        return [(name, getattr(self, name)) for name in PARAM_FIELDS]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.dims, *(getattr(self, name).copy() for name in PARAM_FIELDS)
        )


@dataclass
class EncoderGrads:
    token_table: np.ndarray
    patch_projection: np.ndarray
    position_table: np.ndarray
    attention_query_vector: np.ndarray
    output_projection: np.ndarray

    @classmethod
    def zeros(cls, dims: EncoderDims) -> "EncoderGrads":
        return cls(
            token_table=np.zeros((dims.vocab_size, dims.d_model)),
            patch_projection=np.zeros((dims.d_model, dims.d_model)),
            position_table=np.zeros((dims.n_patches, dims.d_model)),
            attention_query_vector=np.zeros(dims.d_model),
            output_projection=np.zeros((dims.d_model, dims.d_embed)),
        )

    def tensors(self):
        return [(name, getattr(self, name)) for name in PARAM_FIELDS]

    def scale_(self, factor: float) -> None:
        for _, arr in self.tensors():
            arr *= factor

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(arr))) for _, arr in self.tensors())


def init_params(dims: EncoderDims, seed: int) -> EncoderParams:
    """I.i.d. uniform entries in [-1/sqrt(d_model), +1/sqrt(d_model)]."""
    dims.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    bound = 1.0 / np.sqrt(dims.d_model)
    shapes = (
        (dims.vocab_size, dims.d_model),
        (dims.d_model, dims.d_model),
        (dims.n_patches, dims.d_model),
        (dims.d_model,),
        (dims.d_model, dims.d_embed),
    )
    arrays = [rng.uniform(-bound, bound, size=shape) for shape in shapes]
    params = EncoderParams(dims, *arrays)
    params.validate()
    return params


# ---- forward ----------------------------------------------------------------


@dataclass
class DocCache:
    tokens: np.ndarray
    offsets: np.ndarray
    h: np.ndarray  # (B, P, dm) patch mean + position, pre-projection
    z: np.ndarray  # (B, P, dm) projected patch features
    attention: np.ndarray  # (B, P)
    pooled: np.ndarray  # (B, dm)
    y: np.ndarray  # (B, de) pre-normalization
    norms: np.ndarray  # (B,)
    embeddings: np.ndarray  # (B, de)


@dataclass
class TextCache:
    tokens: np.ndarray
    offsets: np.ndarray
    x: np.ndarray  # (B, dm) mean token embedding
    y: np.ndarray
    norms: np.ndarray
    embeddings: np.ndarray


@dataclass
class EncodeOutput:
    embedding: np.ndarray
    attention_weights: np.ndarray | None
    cache: DocCache | TextCache


def _pack_sequences(seqs, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    for i, seq in enumerate(seqs):
        if len(seq) == 0:
            raise ValueError(f"empty token sequence at index {i}")
        offsets[i + 1] = offsets[i] + len(seq)
    tokens = np.fromiter(
        (t for seq in seqs for t in seq), dtype=np.int64, count=int(offsets[-1])
    )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ValueError(
            f"token id out of range [0, {vocab_size}): "
            f"min={tokens.min()}, max={tokens.max()}"
        )
    return tokens, offsets


def _rows_softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _normalize_rows(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(y, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding; cannot normalize")
    return y / norms[:, None], norms


def encode_documents(
    docs, params: EncoderParams
) -> tuple[np.ndarray, np.ndarray, DocCache]:
    """Batched document forward. Returns (embeddings, attention, cache)."""
    dims = params.dims
    n_patches = dims.n_patches
    for doc in docs:
        if doc.grid_rows != dims.grid_rows or doc.grid_cols != dims.grid_cols:
            raise ValueError(
                f"{doc.doc_id}: grid {doc.grid_rows}x{doc.grid_cols} does not "
                f"match encoder grid {dims.grid_rows}x{dims.grid_cols}"
            )
    patch_lists = [patch for doc in docs for patch in doc.patch_tokens]
    tokens, offsets = _pack_sequences(patch_lists, dims.vocab_size)
    batch = len(docs)
    x = _kernels.segment_mean(params.token_table, tokens, offsets)
    h = x.reshape(batch, n_patches, dims.d_model) + params.position_table[None, :, :]
    z = h @ params.patch_projection
    scores = z @ params.attention_query_vector
    attention = _rows_softmax(scores)
    pooled = np.einsum("bp,bpd->bd", attention, z)
    y = pooled @ params.output_projection
    embeddings, norms = _normalize_rows(y)
    cache = DocCache(tokens, offsets, h, z, attention, pooled, y, norms, embeddings)
    return embeddings, attention, cache


def encode_texts(token_seqs, params: EncoderParams) -> tuple[np.ndarray, TextCache]:
    """Batched text forward (bag-of-tokens). Returns (embeddings, cache)."""
    tokens, offsets = _pack_sequences(token_seqs, params.dims.vocab_size)
    x = _kernels.segment_mean(params.token_table, tokens, offsets)
    y = x @ params.output_projection
    embeddings, norms = _normalize_rows(y)
    return embeddings, TextCache(tokens, offsets, x, y, norms, embeddings)


def encode_document(doc: SyntheticDocument, params: EncoderParams) -> EncodeOutput:
    embeddings, attention, cache = encode_documents([doc], params)
    return EncodeOutput(embeddings[0], attention[0], cache)


def encode_text(token_ids, params: EncoderParams) -> EncodeOutput:
    embeddings, cache = encode_texts([token_ids], params)
    return EncodeOutput(embeddings[0], None, cache)


def patch_embeddings(doc: SyntheticDocument, params: EncoderParams) -> np.ndarray:
    """Per-patch pre-pooling features through the output head, unit rows."""
    _, _, cache = encode_documents([doc], params)
    projected = cache.z[0] @ params.output_projection
    normalized, _ = _normalize_rows(projected)
    return normalized


# ---- backward ---------------------------------------------------------------


def _normalize_backward(grad_emb, embeddings, norms):
    inner = np.einsum("bd,bd->b", embeddings, grad_emb)
    return (grad_emb - embeddings * inner[:, None]) / norms[:, None]


def backward(cache, grad_embeddings: np.ndarray, params: EncoderParams, grads: EncoderGrads) -> EncoderGrads:
    """Accumulate parameter gradients for one forward batch into `grads`."""
    if grad_embeddings.shape != cache.embeddings.shape:
        raise ValueError(
            f"grad shape {grad_embeddings.shape} does not match "
            f"batch embeddings {cache.embeddings.shape}"
        )
    if isinstance(cache, DocCache):
        _backward_documents(cache, grad_embeddings, params, grads)
    elif isinstance(cache, TextCache):
        _backward_texts(cache, grad_embeddings, params, grads)
    else:
        raise ValueError(f"unknown cache type {type(cache).__name__}")
    return grads


def _backward_documents(cache: DocCache, grad_emb, params, grads) -> None:
    dims = params.dims
    dy = _normalize_backward(grad_emb, cache.embeddings, cache.norms)
    grads.output_projection += cache.pooled.T @ dy
    dg = dy @ params.output_projection.T
    dw = np.einsum("bpd,bd->bp", cache.z, dg)
    attn = cache.attention
    da = attn * (dw - np.einsum("bp,bp->b", attn, dw)[:, None])
    dz = attn[:, :, None] * dg[:, None, :] + da[:, :, None] * params.attention_query_vector[None, None, :]
    grads.attention_query_vector += np.einsum("bp,bpd->d", da, cache.z)
    dh = dz @ params.patch_projection.T
    batch_patches = cache.h.shape[0] * cache.h.shape[1]
    grads.patch_projection += (
        cache.h.reshape(batch_patches, dims.d_model).T @ dz.reshape(batch_patches, dims.d_model)
    )
    grads.position_table += dh.sum(axis=0)
    _kernels.segment_mean_scatter(
        dh.reshape(batch_patches, dims.d_model), cache.tokens, cache.offsets, grads.token_table
    )


def _backward_texts(cache: TextCache, grad_emb, params, grads) -> None:
    dy = _normalize_backward(grad_emb, cache.embeddings, cache.norms)
    grads.output_projection += cache.x.T @ dy
    dx = dy @ params.output_projection.T
    _kernels.segment_mean_scatter(dx, cache.tokens, cache.offsets, grads.token_table)
