"""Corpus-wide ranking plus NDCG@K / Recall@K with deterministic ties.

Search is exhaustive; ties in score break by ascending doc_id, so every
report is reproducible bit-for-bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from .corpus import QueryRecord, SyntheticDocument

_ENCODE_CHUNK = 256


@dataclass
class RankedList:
    query_id: str
    doc_ids: list[str]
    scores: np.ndarray


@dataclass
class MetricsReport:
    per_query: list[dict]
    means: dict
    corpus_size: int
    checkpoint_hash: str
    k_values: list[int]

    def to_json_dict(self) -> dict:
        return {
            "corpus_size": self.corpus_size,
            "checkpoint_hash": self.checkpoint_hash,
            "k_values": self.k_values,
            "means": self.means,
            "per_query": self.per_query,
        }


def rank_corpus(query_embedding, doc_embeddings, doc_ids) -> RankedList:
    """Full sort by descending cosine; exact score ties order by doc_id."""
    q = np.asarray(query_embedding, dtype=np.float64)
    docs = np.asarray(doc_embeddings, dtype=np.float64)
    if docs.ndim != 2 or docs.shape[0] == 0:
        raise ValueError("doc_embeddings must be a nonempty (N, d) array")
    if q.shape != (docs.shape[1],):
        raise ValueError(f"dimension mismatch: query {q.shape}, docs {docs.shape}")
    if len(doc_ids) != docs.shape[0]:
        raise ValueError("doc_ids length does not match embeddings")
    scores = docs @ q
    ids = np.asarray(doc_ids)
    order = np.lexsort((ids, -scores))
    return RankedList(
        query_id="",
        doc_ids=[str(ids[i]) for i in order],
        scores=scores[order],
    )


def ndcg_at_k(ranking: RankedList, relevant: set, k: int) -> float:
    """Binary-gain NDCG with 1/log2(rank+1) discounts, ranks starting at 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = 0.0
    for rank, doc_id in enumerate(ranking.doc_ids[:k], start=1):
        if doc_id in relevant:
            dcg += 1.0 / np.log2(rank + 1)
    ideal = min(k, len(relevant))
    idcg = sum(1.0 / np.log2(r + 1) for r in range(1, ideal + 1))
    return float(dcg / idcg)


def recall_at_k(ranking: RankedList, relevant: set, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for doc_id in ranking.doc_ids[:k] if doc_id in relevant)
    return hits / len(relevant)


def encode_corpus(
    documents: list[SyntheticDocument], params: enc.EncoderParams
) -> tuple[np.ndarray, list[str]]:
    """Embed every document once, in chunks; returns (embeddings, doc_ids)."""
    chunks = []
    for start in range(0, len(documents), _ENCODE_CHUNK):
        embeddings, _, _ = enc.encode_documents(documents[start : start + _ENCODE_CHUNK], params)
        chunks.append(embeddings)
    return np.vstack(chunks), [d.doc_id for d in documents]


def evaluate_retriever(
    params: enc.EncoderParams,
    documents: list[SyntheticDocument],
    queries: list[QueryRecord],
    k_values=(5, 10),
    checkpoint_hash: str = "",
) -> MetricsReport:
    """Encode corpus once, rank per query, aggregate mean NDCG/Recall."""
    if not queries:
        raise ValueError("empty query set")
    k_values = [int(k) for k in k_values]
    doc_embeddings, doc_ids = encode_corpus(documents, params)
    per_query = []
    for query in queries:
        q_emb, _ = enc.encode_texts([query.token_ids], params)
        ranking = rank_corpus(q_emb[0], doc_embeddings, doc_ids)
        ranking.query_id = query.query_id
        relevant = {query.positive_doc_id}
        row = {"query_id": query.query_id}
        for k in k_values:
            row[f"ndcg@{k}"] = ndcg_at_k(ranking, relevant, k)
            row[f"recall@{k}"] = recall_at_k(ranking, relevant, k)
        per_query.append(row)
    means = {}
    for k in k_values:
        means[f"ndcg@{k}"] = float(np.mean([r[f"ndcg@{k}"] for r in per_query]))
        means[f"recall@{k}"] = float(np.mean([r[f"recall@{k}"] for r in per_query]))
    return MetricsReport(
        per_query=per_query,
        means=means,
        corpus_size=len(documents),
        checkpoint_hash=checkpoint_hash,
        k_values=k_values,
    )


def write_metrics(out_dir, report: MetricsReport) -> tuple[Path, Path]:
    """metrics.json plus metrics.csv (per-query rows and a summary row)."""
    out_dir = Path(out_dir)
    json_path = out_dir / "metrics.json"
    csv_path = out_dir / "metrics.csv"
    json_path.write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    metric_cols = [f"{m}@{k}" for k in report.k_values for m in ("ndcg", "recall")]
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", *metric_cols])
        for row in report.per_query:
            writer.writerow([row["query_id"], *(repr(row[c]) for c in metric_cols)])
        writer.writerow(["MEAN", *(repr(report.means[c]) for c in metric_cols)])
    return json_path, csv_path
