from __future__ import annotations

import pytest

from realign_lab import oracle
from realign_lab.corpus import CorpusManifest, generate_corpus, split_queries


@pytest.fixture(scope="session")
def small_manifest():
    return CorpusManifest(
        seed=101,
        doc_count=80,
        train_query_count=60,
        eval_query_count=20,
    )


@pytest.fixture(scope="session")
def small_corpus(small_manifest):
    documents, queries = generate_corpus(small_manifest)
    train_queries, eval_queries = split_queries(queries, small_manifest)
    return documents, train_queries, eval_queries


@pytest.fixture(scope="session")
def region_triplets(small_manifest, small_corpus):
    documents, train_queries, _ = small_corpus
    backend = oracle.SyntheticOracle(
        documents, noise_vocab=small_manifest.background_vocab, seed=small_manifest.seed
    )
    triplets, _ = oracle.synthesize_dataset(
        train_queries, documents, backend, seed=small_manifest.seed
    )
    return triplets
