"""Region-guided supervision synthesis.

Three backends produce (bounding box, description) candidates per query:
a ground-truth synthetic backend that reads planted evidence regions, a
whole-page baseline that verbalizes the entire page without query
conditioning, and an external chat-completions-style VLM endpoint. One
candidate is then sampled uniformly per query and written as a training
triplet; backend failures degrade to description-less triplets instead of
aborting the run, so the output always has exactly one record per query.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import requests

from .corpus import BoundingBox, QueryRecord, SyntheticDocument, TripletRecord

_SAMPLE_STREAM = 23
_NOISE_STREAM = 29


class OracleError(Exception):
    pass


class OracleParseError(OracleError):
    """No JSON object could be extracted from the raw response."""


class OracleSchemaError(OracleError):
    """JSON extracted but the required keys are missing or mistyped."""


class OracleValidationError(OracleError):
    """Every box in the response was degenerate after clamping."""


class NoMatchingRegionError(OracleError):
    """Query tokens overlap no evidence region; the corpus is malformed."""


class OracleTransportError(OracleError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


@dataclass
class RegionEvidence:
    box: BoundingBox
    description: tuple | str  # token ids (synthetic backends) or raw text (external)

    def __post_init__(self) -> None:
        if isinstance(self.description, str):
            if not self.description:
                raise ValueError("empty region description")
        elif not self.description:
            raise ValueError("empty region description tokens")


@dataclass
class OracleResponse:
    think: str
    regions: list
    dropped_boxes: int = 0


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    timeout_s: float = 30.0
    max_retries: int = 2
    max_parallel_requests: int = 1
    chat_path: str = "/v1/chat/completions"
    image_mode: str = "path"
    backoff_s: float = 0.5

    def validate(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_parallel_requests < 1:
            raise ValueError("max_parallel_requests must be >= 1")
        if self.image_mode not in ("path", "base64"):
            raise ValueError(f"unknown image_mode {self.image_mode!r}")


PROMPT_TEMPLATE = (
    "Task: Given an image and a question, think step by step to find regions "
    "containing all evidence needed to answer. Each crop must be "
    "self-contained—able to answer the query on its own. When unsure, use larger "
    "boxes to ensure completeness and readability.\n"
    "\n"
    "Region-selection guidelines:\n"
    "1. Fully cover key evidence plus immediate context; do not clip text, "
    "numbers, or symbols.\n"
    "2. Prefer complete information units (full words/lines; entire signs/labels; "
    "for charts include legend, axes, units, titles/notes).\n"
    "3. Tables: include the header and relevant rows/columns with necessary "
    "context; avoid single-cell crops.\n"
    "4. If evidence spans multiple parts, use multiple boxes—or one larger box "
    "if they’re adjacent.\n"
    "5. Images/illustrations: include nearby numeric values or captions required "
    "by the question.\n"
    "\n"
    'Output format: { "think": "your step-by-step reasoning", "boxes": [{ "area": '
    '[x1, y1, x2, y2], "description": "a description of this region and why it is '
    'relevant" }]}\n'
    "\n"
    "Query: { query }"
)

_QUERY_SLOT = "{ query }"


def _stable_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def build_prompt(query_text: str) -> str:
    """Fill the prompt template; query braces pass through untouched."""
    if not query_text:
        raise ValueError("empty query")
    head, _, tail = PROMPT_TEMPLATE.rpartition(_QUERY_SLOT)
    return head + query_text + tail


# ---- synthetic backends -----------------------------------------------------


def synthesize_regions_synthetic(
    query: QueryRecord,
    doc: SyntheticDocument,
    noise_rate: float = 0.0,
    noise_vocab: int = 0,
    seed: int = 0,
) -> list[RegionEvidence]:
    """Every evidence region overlapping the query tokens, with token
    descriptions; optional extra noise tokens at `noise_rate` per region.
    """
    if doc.doc_id != query.positive_doc_id:
        raise ValueError(
            f"{query.query_id}: document {doc.doc_id} is not the query's positive"
        )
    query_tokens = set(query.token_ids)
    out = []
    for region in doc.evidence_regions:
        if not (set(region.tokens) & query_tokens):
            continue
        tokens = region.tokens
        if noise_rate > 0.0 and noise_vocab > 0:
            rng = np.random.Generator(
                np.random.PCG64(
                    np.random.SeedSequence([seed, _NOISE_STREAM, _stable_seed(query.query_id)])
                )
            )
            n_noise = int(round(noise_rate * len(tokens)))
            extra = rng.integers(0, noise_vocab, size=n_noise)
            tokens = tokens + tuple(int(t) for t in extra)
        out.append(RegionEvidence(box=region.box, description=tokens))
    if not out:
        raise NoMatchingRegionError(
            f"{query.query_id}: no evidence region overlaps the query tokens"
        )
    return out


def whole_page_description(doc: SyntheticDocument, budget: int) -> tuple:
    """Up to `budget` distinct tokens sampled from all patches, seeded by doc_id."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    distinct = sorted({t for patch in doc.patch_tokens for t in patch})
    if budget >= len(distinct):
        return tuple(distinct)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(_stable_seed(doc.doc_id))))
    picked = rng.choice(np.asarray(distinct), size=budget, replace=False)
    return tuple(int(t) for t in picked)


def sample_description(candidates, rng_seed) -> RegionEvidence:
    """Uniform seeded choice among candidates."""
    if not candidates:
        raise ValueError("no candidate descriptions to sample from")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    return candidates[int(rng.integers(0, len(candidates)))]


# ---- external endpoint ------------------------------------------------------


def _query_text(query: QueryRecord) -> str:
    return " ".join(f"tok{t}" for t in query.token_ids)


def tokenize_text(text: str, vocab_size: int) -> tuple:
    """Stable word-hash tokenizer for external descriptions."""
    words = text.split()
    if not words:
        raise ValueError("cannot tokenize empty description")
    return tuple(_stable_seed(w.lower()) % vocab_size for w in words)


def _extract_json_object(raw: str) -> dict:
    """First balanced top-level JSON object in `raw` (fences/prose tolerated)."""
    start = raw.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(raw)):
            ch = raw[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(raw[start : i + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = raw.find("{", start + 1)
    raise OracleParseError("no JSON object found in response")


def parse_vlm_response(raw: str, image_width: int, image_height: int) -> OracleResponse:
    """Extract think text and boxes; clamp boxes, drop degenerate ones.

    Raises OracleSchemaError when "boxes" is missing/mistyped and
    OracleValidationError when no box survives clamping.
    """
    obj = _extract_json_object(raw)
    if "boxes" not in obj:
        raise OracleSchemaError('response JSON lacks a "boxes" key')
    boxes = obj["boxes"]
    if not isinstance(boxes, list):
        raise OracleSchemaError('"boxes" must be a list')
    think = str(obj.get("think", ""))
    regions = []
    dropped = 0
    for entry in boxes:
        region = _validate_box_entry(entry, image_width, image_height)
        if region is None:
            dropped += 1
        else:
            regions.append(region)
    if not regions:
        raise OracleValidationError(f"all {len(boxes)} boxes were invalid")
    return OracleResponse(think=think, regions=regions, dropped_boxes=dropped)


def _validate_box_entry(entry, width: int, height: int) -> RegionEvidence | None:
    if not isinstance(entry, dict):
        return None
    area = entry.get("area")
    description = entry.get("description")
    if not isinstance(area, list) or len(area) != 4:
        return None
    if not isinstance(description, str) or not description.strip():
        return None
    try:
        coords = [int(round(float(v))) for v in area]
    except (TypeError, ValueError):
        return None
    x1 = min(max(coords[0], 0), width)
    y1 = min(max(coords[1], 0), height)
    x2 = min(max(coords[2], 0), width)
    y2 = min(max(coords[3], 0), height)
    if x1 >= x2 or y1 >= y2:
        return None
    return RegionEvidence(box=BoundingBox(x1, y1, x2, y2), description=description)


def _request_with_attempts(query_text: str, image_reference: str, cfg: EndpointConfig):
    cfg.validate()
    prompt = build_prompt(query_text)
    if cfg.image_mode == "base64":
        image_part = {
            "type": "image_url",
            "image_url": {"url": f"data:image/png;base64,{image_reference}"},
        }
    else:
        image_part = {"type": "image_url", "image_url": {"url": image_reference}}
    payload = {
        "model": cfg.model,
        "messages": [
            {"role": "user", "content": [{"type": "text", "text": prompt}, image_part]}
        ],
    }
    url = cfg.base_url.rstrip("/") + cfg.chat_path
    attempts = 0
    last_error = ""
    for attempt in range(cfg.max_retries + 1):
        attempts += 1
        try:
            resp = requests.post(url, json=payload, timeout=cfg.timeout_s)
        except requests.RequestException as exc:
            last_error = f"{type(exc).__name__}: {exc}"
        else:
            if 200 <= resp.status_code < 300:
                return _response_text(resp), attempts
            last_error = f"HTTP {resp.status_code}"
        if attempt < cfg.max_retries and cfg.backoff_s > 0:
            time.sleep(cfg.backoff_s * (2**attempt))
    raise OracleTransportError(
        f"endpoint failed after {attempts} attempt(s): {last_error}", attempts=attempts
    )


def _response_text(resp) -> str:
    try:
        body = resp.json()
    except ValueError:
        return resp.text
    try:
        return body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        return resp.text


def request_regions_external(query_text: str, image_reference: str, cfg: EndpointConfig) -> str:
    """POST the prompt to a chat-completions endpoint with retry/backoff."""
    text, _ = _request_with_attempts(query_text, image_reference, cfg)
    return text


# ---- dataset assembly -------------------------------------------------------


class SyntheticOracle:
    """Ground-truth backend reading planted evidence regions."""

    source = "region_reasoning"

    def __init__(self, documents, noise_rate: float = 0.0, noise_vocab: int = 0, seed: int = 0):
        self.doc_by_id = {d.doc_id: d for d in documents}
        self.noise_rate = noise_rate
        self.noise_vocab = noise_vocab
        self.seed = seed
        self.max_parallel = 1

    def regions_for(self, query: QueryRecord):
        doc = self.doc_by_id[query.positive_doc_id]
        regions = synthesize_regions_synthetic(
            query, doc, self.noise_rate, self.noise_vocab, self.seed
        )
        return regions, {}


class WholePageOracle:
    """Query-agnostic baseline: one full-page description per document."""

    source = "whole_page"

    def __init__(self, documents, budget: int = 32):
        self.doc_by_id = {d.doc_id: d for d in documents}
        self.budget = budget
        self.max_parallel = 1

    def regions_for(self, query: QueryRecord):
        doc = self.doc_by_id[query.positive_doc_id]
        box = BoundingBox(0, 0, doc.image_width, doc.image_height)
        tokens = whole_page_description(doc, self.budget)
        return [RegionEvidence(box=box, description=tokens)], {}


class ExternalOracle:
    """Chat-completions VLM endpoint backend; descriptions come back as text."""

    source = "region_reasoning"

    def __init__(self, documents, cfg: EndpointConfig, vocab_size: int, image_dir: str = ""):
        cfg.validate()
        self.doc_by_id = {d.doc_id: d for d in documents}
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.image_dir = image_dir
        self.max_parallel = cfg.max_parallel_requests

    def _image_reference(self, doc: SyntheticDocument) -> str:
        name = f"{doc.doc_id}.png"
        return f"{self.image_dir.rstrip('/')}/{name}" if self.image_dir else name

    def regions_for(self, query: QueryRecord):
        doc = self.doc_by_id[query.positive_doc_id]
        raw, attempts = _request_with_attempts(
            _query_text(query), self._image_reference(doc), self.cfg
        )
        parsed = parse_vlm_response(raw, doc.image_width, doc.image_height)
        return parsed.regions, {"attempts": attempts, "dropped_boxes": parsed.dropped_boxes}


def synthesize_dataset(
    queries, documents, backend, seed: int = 0
) -> tuple[list[TripletRecord], list[dict]]:
    """One TripletRecord per query, plus a per-query synthesis report.

    Backend failures yield source="none" triplets (no description) rather
    than aborting; the report row records the error. External requests run
    with the backend's bounded parallelism, results re-ordered by query
    index.
    """
    doc_by_id = {d.doc_id: d for d in documents}
    for q in queries:
        if q.positive_doc_id not in doc_by_id:
            raise ValueError(f"{q.query_id}: positive document missing from corpus")
    vocab_size = getattr(backend, "vocab_size", 0)

    def one(item):
        index, query = item
        try:
            regions, meta = backend.regions_for(query)
            chosen = sample_description(regions, [seed, _SAMPLE_STREAM, index])
            description = chosen.description
            if isinstance(description, str):
                description = tokenize_text(description, vocab_size)
            triplet = TripletRecord(
                query_id=query.query_id,
                doc_id=query.positive_doc_id,
                description_tokens=tuple(int(t) for t in description),
                source=backend.source,
            )
            report = {
                "query_id": query.query_id,
                "status": "ok",
                "candidates": len(regions),
                "attempts": meta.get("attempts", 1),
                "dropped_boxes": meta.get("dropped_boxes", 0),
            }
        except (OracleError, ValueError) as exc:
            triplet = TripletRecord(
                query_id=query.query_id,
                doc_id=query.positive_doc_id,
                description_tokens=None,
                source="none",
            )
            attempts = getattr(exc, "attempts", 1)
            report = {
                "query_id": query.query_id,
                "status": "failed",
                "error": f"{type(exc).__name__}: {exc}",
                "attempts": attempts,
            }
        triplet.validate()
        return triplet, report

    items = list(enumerate(queries))
    workers = max(1, getattr(backend, "max_parallel", 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]
    triplets = [r[0] for r in results]
    reports = [r[1] for r in results]
    return triplets, reports
