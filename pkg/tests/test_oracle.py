import json
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from realign_lab import oracle
from realign_lab.corpus import BoundingBox, EvidenceRegion, QueryRecord, SyntheticDocument
from realign_lab.oracle import (
    EndpointConfig,
    NoMatchingRegionError,
    OracleParseError,
    OracleSchemaError,
    OracleTransportError,
    OracleValidationError,
    RegionEvidence,
    build_prompt,
    parse_vlm_response,
    request_regions_external,
    sample_description,
    synthesize_dataset,
    synthesize_regions_synthetic,
    tokenize_text,
    whole_page_description,
)

VALID_BODY = json.dumps(
    {
        "think": "the value sits in the top-left table cell",
        "boxes": [
            {"area": [10, 10, 120, 80], "description": "table cell with the answer"},
            {"area": [200, 40, 300, 90], "description": "axis label for context"},
        ],
    }
)


def _doc_with_regions(regions, doc_id="doc-0"):
    patches = [(1, 2) for _ in range(144)]
    return SyntheticDocument(
        doc_id=doc_id,
        grid_rows=12,
        grid_cols=12,
        patch_tokens=patches,
        evidence_regions=regions,
        image_width=336,
        image_height=336,
    )


class TestSyntheticBackend:
    def test_single_region_forced(self, small_corpus):
        documents, train_queries, _ = small_corpus
        by_id = {d.doc_id: d for d in documents}
        query = train_queries[0]
        doc = by_id[query.positive_doc_id]
        regions = synthesize_regions_synthetic(query, doc)
        target = doc.evidence_regions[query.target_region_index]
        assert any(r.box == target.box for r in regions)
        for r in regions:
            assert set(r.description) & set(query.token_ids) or set(r.description)

    def test_multi_region_overlap_returns_all(self):
        regions = [
            EvidenceRegion(BoundingBox(0, 0, 56, 56), (300, 301)),
            EvidenceRegion(BoundingBox(112, 112, 168, 168), (301, 302)),
        ]
        doc = _doc_with_regions(regions)
        query = QueryRecord("q0", (301, 5), "doc-0", 0)
        out = synthesize_regions_synthetic(query, doc)
        assert len(out) == 2

    def test_zero_overlap_errors(self):
        doc = _doc_with_regions([EvidenceRegion(BoundingBox(0, 0, 56, 56), (300,))])
        query = QueryRecord("q0", (400, 401), "doc-0", 0)
        with pytest.raises(NoMatchingRegionError):
            synthesize_regions_synthetic(query, doc)

    def test_wrong_document_errors(self):
        doc = _doc_with_regions([EvidenceRegion(BoundingBox(0, 0, 56, 56), (300,))])
        query = QueryRecord("q0", (300,), "other-doc", 0)
        with pytest.raises(ValueError, match="not the query's positive"):
            synthesize_regions_synthetic(query, doc)

    def test_descriptions_stay_in_region_plus_noise_vocab(self, small_manifest, small_corpus):
        documents, train_queries, _ = small_corpus
        by_id = {d.doc_id: d for d in documents}
        noise_vocab = small_manifest.background_vocab
        for query in train_queries[:20]:
            doc = by_id[query.positive_doc_id]
            for region in synthesize_regions_synthetic(
                query, doc, noise_rate=0.5, noise_vocab=noise_vocab, seed=3
            ):
                allowed = set(
                    next(
                        r.tokens for r in doc.evidence_regions if r.box == region.box
                    )
                ) | set(range(noise_vocab))
                assert set(region.description) <= allowed


class TestWholePage:
    def test_budget_saturation_returns_all_distinct(self, small_corpus):
        documents, _, _ = small_corpus
        doc = documents[0]
        distinct = sorted({t for p in doc.patch_tokens for t in p})
        assert whole_page_description(doc, 10_000) == tuple(distinct)

    def test_budget_one_stable(self, small_corpus):
        documents, _, _ = small_corpus
        doc = documents[0]
        assert whole_page_description(doc, 1) == whole_page_description(doc, 1)

    def test_budget_positive(self, small_corpus):
        with pytest.raises(ValueError, match="budget"):
            whole_page_description(small_corpus[0][0], 0)

    def test_mostly_background_tokens(self, small_manifest, small_corpus):
        """Whole-page sampling is dominated by background vocabulary."""
        documents, _, _ = small_corpus
        fractions = []
        for doc in documents:
            tokens = whole_page_description(doc, 32)
            background = sum(1 for t in tokens if t < small_manifest.background_vocab)
            fractions.append(background / len(tokens))
        assert float(np.mean(fractions)) >= 0.6


class TestSampleDescription:
    def test_single_candidate(self):
        cand = RegionEvidence(BoundingBox(0, 0, 5, 5), (1,))
        assert sample_description([cand], 0) is cand

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="no candidate"):
            sample_description([], 0)

    def test_uniform_over_seeds(self):
        candidates = [
            RegionEvidence(BoundingBox(0, 0, 5, 5), (i,)) for i in range(10)
        ]
        counts = Counter(
            sample_description(candidates, [4, i]).description[0] for i in range(10_000)
        )
        for token in range(10):
            assert abs(counts[token] - 1000) <= 100


class TestPrompt:
    def test_contains_guidelines_and_query(self):
        out = build_prompt("Q")
        assert "think step by step to find regions" in out
        assert "Region-selection guidelines" in out
        assert out.endswith("Query: Q")
        assert "{ query }" not in out

    def test_empty_query_errors(self):
        with pytest.raises(ValueError, match="empty query"):
            build_prompt("")

    def test_braces_preserved(self):
        out = build_prompt("what is {x} in {y}?")
        assert "what is {x} in {y}?" in out

    def test_output_format_line_verbatim(self):
        out = build_prompt("Q")
        assert '"boxes": [{ "area": [x1, y1, x2, y2]' in out


class TestParseResponse:
    def test_valid_fixture(self):
        parsed = parse_vlm_response(VALID_BODY, 336, 336)
        assert parsed.think == "the value sits in the top-left table cell"
        assert len(parsed.regions) == 2
        assert parsed.regions[0].box == BoundingBox(10, 10, 120, 80)
        assert parsed.dropped_boxes == 0

    def test_tolerates_fences_and_prose(self):
        raw = "Sure, here you go:\n```json\n" + VALID_BODY + "\n```\ndone"
        parsed = parse_vlm_response(raw, 336, 336)
        assert len(parsed.regions) == 2

    def test_missing_boxes_key(self):
        with pytest.raises(OracleSchemaError, match="boxes"):
            parse_vlm_response('{"think": "hm"}', 336, 336)

    def test_boxes_not_a_list(self):
        with pytest.raises(OracleSchemaError, match="list"):
            parse_vlm_response('{"boxes": 3}', 336, 336)

    def test_no_json_at_all(self):
        with pytest.raises(OracleParseError):
            parse_vlm_response("no structured content here", 336, 336)

    def test_degenerate_box_dropped(self):
        body = json.dumps(
            {
                "boxes": [
                    {"area": [50, 50, 40, 60], "description": "inverted"},
                    {"area": [0, 0, 30, 30], "description": "fine"},
                ]
            }
        )
        parsed = parse_vlm_response(body, 336, 336)
        assert len(parsed.regions) == 1
        assert parsed.dropped_boxes == 1

    def test_only_invalid_boxes_errors(self):
        body = json.dumps({"boxes": [{"area": [50, 50, 40, 60], "description": "x"}]})
        with pytest.raises(OracleValidationError):
            parse_vlm_response(body, 336, 336)

    def test_out_of_range_boxes_clamped(self):
        body = json.dumps({"boxes": [{"area": [-5, -9, 400, 100], "description": "x"}]})
        parsed = parse_vlm_response(body, 336, 336)
        assert parsed.regions[0].box == BoundingBox(0, 0, 336, 100)

    def test_missing_description_dropped(self):
        body = json.dumps(
            {
                "boxes": [
                    {"area": [0, 0, 10, 10]},
                    {"area": [0, 0, 10, 10], "description": "ok"},
                ]
            }
        )
        parsed = parse_vlm_response(body, 336, 336)
        assert len(parsed.regions) == 1


class _StubHandler(BaseHTTPRequestHandler):
    behavior = {"mode": "ok", "fail_first": 0, "calls": 0}

    def do_POST(self):
        cls = type(self)
        cls.behavior["calls"] += 1
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        if cls.behavior["mode"] == "always_500" or (
            cls.behavior["calls"] <= cls.behavior["fail_first"]
        ):
            self.send_response(500)
            self.end_headers()
            self.wfile.write(b"server exploded")
            return
        body = cls.behavior.get("body", VALID_BODY).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.behavior = {"mode": "ok", "fail_first": 0, "calls": 0, "body": VALID_BODY}
    yield f"http://127.0.0.1:{server.server_port}", _StubHandler.behavior
    server.shutdown()
    thread.join(timeout=2)


class TestExternalTransport:
    def _cfg(self, base_url, retries=2):
        return EndpointConfig(
            base_url=base_url,
            model="stub",
            timeout_s=5.0,
            max_retries=retries,
            backoff_s=0.0,
        )

    def test_fixed_body_round_trip(self, stub_server):
        base_url, _ = stub_server
        raw = request_regions_external("Q", "img.png", self._cfg(base_url))
        assert raw == VALID_BODY

    def test_chat_envelope_content_extracted(self, stub_server):
        base_url, behavior = stub_server
        behavior["body"] = json.dumps(
            {"choices": [{"message": {"content": VALID_BODY}}]}
        )
        raw = request_regions_external("Q", "img.png", self._cfg(base_url))
        assert raw == VALID_BODY

    def test_retry_until_success(self, stub_server):
        base_url, behavior = stub_server
        behavior["fail_first"] = 2
        raw, attempts = oracle._request_with_attempts("Q", "img.png", self._cfg(base_url, retries=3))
        assert raw == VALID_BODY
        assert attempts == 3

    def test_exhaustion_raises_with_attempts(self, stub_server):
        base_url, behavior = stub_server
        behavior["mode"] = "always_500"
        with pytest.raises(OracleTransportError) as err:
            request_regions_external("Q", "img.png", self._cfg(base_url, retries=2))
        assert err.value.attempts == 3

    def test_unreachable_endpoint(self):
        cfg = EndpointConfig(
            base_url="http://127.0.0.1:9", model="stub", timeout_s=0.2,
            max_retries=0, backoff_s=0.0,
        )
        with pytest.raises(OracleTransportError):
            request_regions_external("Q", "img.png", cfg)


class _FlakyBackend:
    """Fails for a fixed subset of queries."""

    source = "region_reasoning"
    max_parallel = 1
    vocab_size = 512

    def __init__(self, failing):
        self.failing = failing

    def regions_for(self, query):
        if query.query_id in self.failing:
            raise OracleValidationError("injected failure")
        return [RegionEvidence(BoundingBox(0, 0, 28, 28), (1, 2, 3))], {}


class TestSynthesizeDataset:
    def test_synthetic_backend_all_described(self, small_manifest, small_corpus):
        documents, train_queries, _ = small_corpus
        backend = oracle.SyntheticOracle(
            documents, noise_vocab=small_manifest.background_vocab, seed=0
        )
        triplets, report = synthesize_dataset(train_queries, documents, backend, seed=0)
        assert len(triplets) == len(train_queries)
        assert all(t.description_tokens is not None for t in triplets)
        assert all(t.source == "region_reasoning" for t in triplets)
        assert all(r["status"] == "ok" for r in report)

    def test_failures_masked_not_fatal(self, small_corpus):
        documents, train_queries, _ = small_corpus
        queries = train_queries[:10]
        failing = {q.query_id for q in queries[:3]}
        triplets, report = synthesize_dataset(
            queries, documents, _FlakyBackend(failing), seed=0
        )
        assert len(triplets) == 10
        without = [t for t in triplets if t.source == "none"]
        with_desc = [t for t in triplets if t.description_tokens is not None]
        assert len(without) == 3
        assert len(with_desc) == 7
        assert sum(1 for r in report if r["status"] == "failed") == 3

    def test_whole_page_backend_tags_source(self, small_corpus):
        documents, train_queries, _ = small_corpus
        backend = oracle.WholePageOracle(documents, budget=16)
        triplets, _ = synthesize_dataset(train_queries[:5], documents, backend, seed=0)
        assert all(t.source == "whole_page" for t in triplets)

    def test_output_order_matches_query_order(self, small_corpus):
        documents, train_queries, _ = small_corpus
        backend = oracle.WholePageOracle(documents, budget=8)
        triplets, _ = synthesize_dataset(train_queries[:8], documents, backend, seed=0)
        assert [t.query_id for t in triplets] == [q.query_id for q in train_queries[:8]]

    def test_sampling_referentially_stable(self, small_manifest, small_corpus):
        documents, train_queries, _ = small_corpus
        backend = oracle.SyntheticOracle(
            documents, noise_vocab=small_manifest.background_vocab, seed=0
        )
        a, _ = synthesize_dataset(train_queries[:20], documents, backend, seed=9)
        b, _ = synthesize_dataset(train_queries[:20], documents, backend, seed=9)
        assert a == b


class TestTokenize:
    def test_stable_and_bounded(self):
        a = tokenize_text("Table cell with The Answer", 512)
        b = tokenize_text("table cell with the answer", 512)
        assert a == b
        assert all(0 <= t < 512 for t in a)

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="empty"):
            tokenize_text("   ", 512)
