"""Analysis battery: embedding-space stats, attention coverage, IoU, heatmaps.

Coverage and IoU are rank-based (top-fraction sets), so they are invariant
to any strictly monotone rescaling of the underlying scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from .corpus import QueryRecord, SyntheticDocument, rasterize_box
from .mathkernel import cosine


@dataclass
class SpaceStats:
    mean_query_positive_distance: float
    mean_pairwise_doc_distance: float
    sample_size: int

    def to_json_dict(self) -> dict:
        return {
            "mean_query_positive_distance": self.mean_query_positive_distance,
            "mean_pairwise_doc_distance": self.mean_pairwise_doc_distance,
            "sample_size": self.sample_size,
        }


@dataclass
class AttentionReport:
    coverage: list[float]
    iou: list[float]
    top_fraction: float
    coverage_sorted: list[float]

    @property
    def mean_coverage(self) -> float:
        return float(np.mean(self.coverage))

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou))

    def to_json_dict(self) -> dict:
        return {
            "top_fraction": self.top_fraction,
            "mean_coverage": self.mean_coverage,
            "mean_iou": self.mean_iou,
            "coverage": self.coverage,
            "iou": self.iou,
            "coverage_sorted": self.coverage_sorted,
        }


# ---- embedding space --------------------------------------------------------


def alignment_score(query_embeddings, positive_doc_embeddings) -> float:
    """Mean cosine distance (1 - cos) between each query and its positive."""
    q = np.asarray(query_embeddings, dtype=np.float64)
    d = np.asarray(positive_doc_embeddings, dtype=np.float64)
    if q.shape != d.shape:
        raise ValueError(f"unpaired shapes {q.shape} vs {d.shape}")
    cos = np.einsum("bd,bd->b", q, d)
    return float(np.mean(1.0 - cos))


def uniformity_score(doc_embeddings) -> float:
    """Mean cosine distance over all unordered document pairs."""
    d = np.asarray(doc_embeddings, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] < 2:
        raise ValueError("need >= 2 document embeddings")
    gram = d @ d.T
    iu = np.triu_indices(d.shape[0], k=1)
    return float(np.mean(1.0 - gram[iu]))


# ---- attention and relevance ------------------------------------------------


def top_fraction_patches(scores, fraction: float) -> set[int]:
    """Indices of the ceil(fraction*P) highest scores, ties by low index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scores must be a nonempty vector")
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction!r}")
    k = int(np.ceil(fraction * s.size))
    order = np.lexsort((np.arange(s.size), -s))
    return {int(i) for i in order[:k]}


def attention_coverage(
    attention_weights, region_patches: set, fraction: float, denominator: str = "region"
) -> float:
    """Overlap of the region with the top-fraction attention patches.

    denominator="region" (default) divides by the region size;
    denominator="top" divides by the top-set size instead.
    """
    if not region_patches:
        raise ValueError("empty region patch set")
    n = len(np.asarray(attention_weights))
    if any(not (0 <= p < n) for p in region_patches):
        raise ValueError("region patch index out of range")
    top = top_fraction_patches(attention_weights, fraction)
    overlap = len(top & set(region_patches))
    if denominator == "region":
        return overlap / len(region_patches)
    if denominator == "top":
        return overlap / len(top)
    raise ValueError(f"unknown denominator {denominator!r}")


def patch_relevance(query_embedding, patch_embeds) -> np.ndarray:
    """Cosine of the query against each (already unit-norm) patch embedding."""
    q = np.asarray(query_embedding, dtype=np.float64)
    p = np.asarray(patch_embeds, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: query {q.shape}, patches {p.shape}")
    return np.array([cosine(q, row) for row in p])


def set_iou(a: set, b: set) -> float:
    """Jaccard overlap of two index sets; 0.0 when both are empty."""
    union = set(a) | set(b)
    if not union:
        return 0.0
    return len(set(a) & set(b)) / len(union)


def attention_relevance_iou(attention_weights, relevance_scores, fraction: float) -> float:
    """Jaccard overlap of the two top-fraction patch sets."""
    a = np.asarray(attention_weights, dtype=np.float64)
    r = np.asarray(relevance_scores, dtype=np.float64)
    if a.shape != r.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {r.shape}")
    return set_iou(top_fraction_patches(a, fraction), top_fraction_patches(r, fraction))


# ---- description diversity --------------------------------------------------


def description_similarity_stats(groups: dict) -> dict:
    """Mean pairwise cosine within each group and across each group pair.

    groups maps a name to an (n_i, d) array of description embeddings,
    n_i >= 2 per group.
    """
    names = sorted(groups)
    arrays = {}
    for name in names:
        arr = np.asarray(groups[name], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError(f"group {name!r} needs >= 2 embeddings")
        arrays[name] = arr
    within = {}
    for name in names:
        gram = arrays[name] @ arrays[name].T
        iu = np.triu_indices(gram.shape[0], k=1)
        within[name] = float(np.mean(gram[iu]))
    cross = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            cross[f"{a}|{b}"] = float(np.mean(arrays[a] @ arrays[b].T))
    return {"within": within, "cross": cross}


# ---- report assembly --------------------------------------------------------


def compute_space_stats(
    params: enc.EncoderParams,
    documents: list[SyntheticDocument],
    queries: list[QueryRecord],
    doc_embeddings: np.ndarray | None = None,
    doc_ids: list[str] | None = None,
) -> SpaceStats:
    from .evalsuite import encode_corpus

    if doc_embeddings is None:
        doc_embeddings, doc_ids = encode_corpus(documents, params)
    index = {doc_id: i for i, doc_id in enumerate(doc_ids)}
    q_emb, _ = enc.encode_texts([q.token_ids for q in queries], params)
    pos = doc_embeddings[[index[q.positive_doc_id] for q in queries]]
    return SpaceStats(
        mean_query_positive_distance=alignment_score(q_emb, pos),
        mean_pairwise_doc_distance=uniformity_score(doc_embeddings),
        sample_size=len(queries),
    )


def compute_attention_report(
    params: enc.EncoderParams,
    documents: list[SyntheticDocument],
    queries: list[QueryRecord],
    top_fraction: float = 0.2,
    denominator: str = "region",
) -> AttentionReport:
    doc_by_id = {d.doc_id: d for d in documents}
    coverage = []
    iou = []
    for query in queries:
        doc = doc_by_id[query.positive_doc_id]
        region = doc.evidence_regions[query.target_region_index]
        region_patches = rasterize_box(region.box, doc)
        out = enc.encode_document(doc, params)
        coverage.append(
            attention_coverage(out.attention_weights, region_patches, top_fraction, denominator)
        )
        q_emb, _ = enc.encode_texts([query.token_ids], params)
        relevance = patch_relevance(q_emb[0], enc.patch_embeddings(doc, params))
        iou.append(attention_relevance_iou(out.attention_weights, relevance, top_fraction))
    return AttentionReport(
        coverage=coverage,
        iou=iou,
        top_fraction=top_fraction,
        coverage_sorted=sorted(coverage, reverse=True),
    )


def write_diagnostics(out_path, space: SpaceStats, attention: AttentionReport) -> None:
    payload = {"space": space.to_json_dict(), "attention": attention.to_json_dict()}
    Path(out_path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---- heatmap export ---------------------------------------------------------


def export_heatmap(scores, grid_rows: int, grid_cols: int, path) -> tuple[Path, Path]:
    """Write a binary P5 graymap (min-max normalized) and a raw-value CSV.

    A constant score vector normalizes to all-zero pixels. Returns
    (pgm_path, csv_path); `path` supplies the stem.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size != grid_rows * grid_cols:
        raise ValueError(f"scores length {s.size} does not match {grid_rows}x{grid_cols} grid")
    lo = float(s.min())
    hi = float(s.max())
    if hi > lo:
        pixels = np.round((s - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(s.size, dtype=np.uint8)
    path = Path(path)
    pgm_path = path.with_suffix(".pgm")
    csv_path = path.with_suffix(".csv")
    with pgm_path.open("wb") as fh:
        fh.write(f"P5\n{grid_cols} {grid_rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    grid = s.reshape(grid_rows, grid_cols)
    with csv_path.open("w", encoding="utf-8") as fh:
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return pgm_path, csv_path


def read_heatmap_csv(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows, dtype=np.float64)
