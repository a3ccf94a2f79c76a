import numpy as np
import pytest

from realign_lab import encoder as enc
from realign_lab.corpus import BoundingBox, EvidenceRegion, SyntheticDocument


def _dims(vocab=12, d_model=5, d_embed=4, rows=2, cols=2):
    return enc.EncoderDims(vocab, d_model, d_embed, rows, cols)


def _random_doc(rng, dims, tokens_per_patch=3, doc_id="doc-x"):
    patches = [
        tuple(int(t) for t in rng.integers(0, dims.vocab_size, size=tokens_per_patch))
        for _ in range(dims.n_patches)
    ]
    return SyntheticDocument(
        doc_id=doc_id,
        grid_rows=dims.grid_rows,
        grid_cols=dims.grid_cols,
        patch_tokens=patches,
        evidence_regions=[EvidenceRegion(BoundingBox(0, 0, 28, 28), (patches[0][0],))],
        image_width=dims.grid_cols * 28,
        image_height=dims.grid_rows * 28,
    )


class TestInitParams:
    def test_same_seed_identical(self):
        a = enc.init_params(_dims(), 3)
        b = enc.init_params(_dims(), 3)
        for (_, ta), (_, tb) in zip(a.tensors(), b.tensors()):
            assert np.array_equal(ta, tb)

    def test_different_seeds_differ(self):
        a = enc.init_params(_dims(), 3)
        b = enc.init_params(_dims(), 4)
        assert not np.array_equal(a.token_table, b.token_table)

    def test_entry_bounds(self):
        dims = _dims(d_model=16)
        params = enc.init_params(dims, 0)
        bound = 1.0 / np.sqrt(dims.d_model)
        for _, arr in params.tensors():
            assert np.all(np.abs(arr) <= bound)


class TestForward:
    def test_document_determinism(self):
        rng = np.random.default_rng(0)
        dims = _dims()
        params = enc.init_params(dims, 1)
        doc = _random_doc(rng, dims)
        a = enc.encode_document(doc, params)
        b = enc.encode_document(doc, params)
        assert np.array_equal(a.embedding, b.embedding)
        assert np.array_equal(a.attention_weights, b.attention_weights)

    def test_unit_norm_and_attention_distribution(self):
        rng = np.random.default_rng(1)
        dims = _dims(rows=3, cols=4)
        params = enc.init_params(dims, 2)
        docs = [_random_doc(rng, dims, doc_id=f"d{i}") for i in range(5)]
        embeddings, attention, _ = enc.encode_documents(docs, params)
        np.testing.assert_allclose(np.linalg.norm(embeddings, axis=1), 1.0, atol=1e-9)
        assert attention.shape == (5, dims.n_patches)
        np.testing.assert_allclose(attention.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(attention >= 0.0)

    def test_one_patch_difference_changes_embedding(self):
        dims = _dims(vocab=30)
        rng = np.random.default_rng(2)
        hits = 0
        for trial in range(100):
            params = enc.init_params(dims, trial)
            doc_a = _random_doc(np.random.default_rng(50), dims, doc_id="a")
            patches = list(doc_a.patch_tokens)
            patches[2] = tuple((t + 1) % dims.vocab_size for t in patches[2])
            doc_b = SyntheticDocument(
                "b", dims.grid_rows, dims.grid_cols, patches,
                doc_a.evidence_regions, doc_a.image_width, doc_a.image_height,
            )
            ea = enc.encode_document(doc_a, params).embedding
            eb = enc.encode_document(doc_b, params).embedding
            if np.max(np.abs(ea - eb)) > 1e-12:
                hits += 1
        assert hits == 100

    def test_single_token_text(self):
        dims = _dims()
        params = enc.init_params(dims, 5)
        k = 7
        out = enc.encode_text([k], params)
        expected = params.token_table[k] @ params.output_projection
        expected = expected / np.linalg.norm(expected)
        np.testing.assert_allclose(out.embedding, expected, atol=1e-12)
        assert out.attention_weights is None

    def test_text_permutation_invariant(self):
        dims = _dims()
        params = enc.init_params(dims, 6)
        a = enc.encode_text([1, 2, 3, 4], params).embedding
        b = enc.encode_text([4, 2, 3, 1], params).embedding
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_query_equals_description_embedding(self):
        dims = _dims()
        params = enc.init_params(dims, 7)
        tokens = [3, 1, 9]
        assert np.array_equal(
            enc.encode_text(tokens, params).embedding,
            enc.encode_text(tokens, params).embedding,
        )

    def test_errors(self):
        dims = _dims()
        params = enc.init_params(dims, 8)
        with pytest.raises(ValueError, match="empty token sequence"):
            enc.encode_text([], params)
        with pytest.raises(ValueError, match="out of range"):
            enc.encode_text([dims.vocab_size], params)
        doc = _random_doc(np.random.default_rng(3), _dims(rows=3, cols=3))
        with pytest.raises(ValueError, match="grid"):
            enc.encode_document(doc, params)

    def test_injectivity_on_corpus(self, small_corpus):
        documents, _, _ = small_corpus
        doc = documents[0]
        dims = enc.EncoderDims(512, 64, 32, doc.grid_rows, doc.grid_cols)
        params = enc.init_params(dims, 99)
        embeddings, _, _ = enc.encode_documents(documents, params)
        gram = embeddings @ embeddings.T
        np.fill_diagonal(gram, -1.0)
        # distinct documents never collide: max off-diagonal cosine < 1 - 1e-9
        assert float(gram.max()) < 1.0 - 1e-9

    def test_patch_embeddings_unit_rows(self):
        dims = _dims(rows=3, cols=2)
        params = enc.init_params(dims, 11)
        doc = _random_doc(np.random.default_rng(4), dims)
        rows = enc.patch_embeddings(doc, params)
        assert rows.shape == (dims.n_patches, dims.d_embed)
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-12)


class TestBackward:
    def _setup(self, seed=0):
        dims = _dims()
        params = enc.init_params(dims, seed)
        rng = np.random.default_rng(seed)
        docs = [_random_doc(rng, dims, doc_id=f"d{i}") for i in range(3)]
        texts = [[1, 2], [5], [0, 3, 4]]
        return dims, params, docs, texts

    def test_zero_upstream_gives_zero_grads(self):
        dims, params, docs, texts = self._setup()
        _, _, dcache = enc.encode_documents(docs, params)
        _, tcache = enc.encode_texts(texts, params)
        grads = enc.EncoderGrads.zeros(dims)
        enc.backward(dcache, np.zeros((3, dims.d_embed)), params, grads)
        enc.backward(tcache, np.zeros((3, dims.d_embed)), params, grads)
        assert grads.max_abs() == 0.0

    def test_linearity_in_upstream(self):
        dims, params, docs, texts = self._setup(1)
        _, _, dcache = enc.encode_documents(docs, params)
        upstream = np.random.default_rng(2).normal(size=(3, dims.d_embed))
        g1 = enc.EncoderGrads.zeros(dims)
        enc.backward(dcache, upstream, params, g1)
        g2 = enc.EncoderGrads.zeros(dims)
        enc.backward(dcache, 2.0 * upstream, params, g2)
        for name in enc.PARAM_FIELDS:
            np.testing.assert_allclose(
                getattr(g2, name), 2.0 * getattr(g1, name), atol=1e-12
            )

    def test_shape_mismatch_errors(self):
        dims, params, docs, _ = self._setup(2)
        _, _, dcache = enc.encode_documents(docs, params)
        grads = enc.EncoderGrads.zeros(dims)
        with pytest.raises(ValueError, match="does not match"):
            enc.backward(dcache, np.zeros((2, dims.d_embed)), params, grads)

    def test_gradients_match_finite_differences(self):
        """Linear-functional loss over doc+text embeddings, full-tensor FD."""
        dims, params, docs, texts = self._setup(3)
        rng = np.random.default_rng(9)
        w_doc = rng.normal(size=(3, dims.d_embed))
        w_text = rng.normal(size=(3, dims.d_embed))

        def loss(p):
            d_emb, _, _ = enc.encode_documents(docs, p)
            t_emb, _ = enc.encode_texts(texts, p)
            return float(np.sum(d_emb * w_doc) + np.sum(t_emb * w_text))

        grads = enc.EncoderGrads.zeros(dims)
        _, _, dcache = enc.encode_documents(docs, params)
        _, tcache = enc.encode_texts(texts, params)
        enc.backward(dcache, w_doc, params, grads)
        enc.backward(tcache, w_text, params, grads)

        h = 1e-6
        for name in enc.PARAM_FIELDS:
            tensor = getattr(params, name)
            analytic = getattr(grads, name).reshape(-1)
            flat = tensor.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = loss(params)
                flat[idx] = orig - h
                down = loss(params)
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                assert abs(analytic[idx] - fd) / max(abs(analytic[idx]), abs(fd), 1e-6) < 1e-4
