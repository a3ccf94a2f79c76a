"""Synthetic visual-document corpus: patch grids with planted evidence regions.

A document is a grid of patches, each carrying a few vocabulary token ids.
1-3 rectangular evidence regions per page carry small document-specific
token sets; the rest of the page carries background distractor tokens, a
configurable fraction of which come from a small pool shared across the
whole corpus. Queries draw mostly from one evidence region of their
positive document plus shared-pool distractors, so relevance is decided by
localized content while most of the page is noise.

Corpora and training triplets persist as line-delimited JSON records.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

_DOC_STREAM = 1
_QUERY_STREAM = 2

TRIPLET_SOURCES = ("region_reasoning", "whole_page", "none")


class RecordParseError(Exception):
    """A line in a record file failed to parse or validate."""


# ---- domain types -----------------------------------------------------------


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box; (x1, y1) top-left inclusive, (x2, y2) exclusive."""

    x1: int
    y1: int
    x2: int
    y2: int

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x1 < self.x2 <= width and 0 <= self.y1 < self.y2 <= height):
            raise ValueError(
                f"invalid box {self.as_list()} for {width}x{height} image"
            )

    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, raw) -> "BoundingBox":
        if len(raw) != 4:
            raise ValueError(f"box needs 4 coordinates, got {raw!r}")
        return cls(*(int(v) for v in raw))


@dataclass(frozen=True)
class EvidenceRegion:
    box: BoundingBox
    tokens: tuple[int, ...]


@dataclass
class SyntheticDocument:
    doc_id: str
    grid_rows: int
    grid_cols: int
    patch_tokens: list[tuple[int, ...]]
    evidence_regions: list[EvidenceRegion]
    image_width: int
    image_height: int

    def validate(self) -> None:
        if len(self.patch_tokens) != self.grid_rows * self.grid_cols:
            raise ValueError(
                f"{self.doc_id}: {len(self.patch_tokens)} patches for a "
                f"{self.grid_rows}x{self.grid_cols} grid"
            )
        if self.image_width % self.grid_cols or self.image_height % self.grid_rows:
            raise ValueError(f"{self.doc_id}: image dims not divisible by grid")
        if not self.evidence_regions:
            raise ValueError(f"{self.doc_id}: no evidence regions")
        for region in self.evidence_regions:
            region.box.validate(self.image_width, self.image_height)
            if not region.tokens:
                raise ValueError(f"{self.doc_id}: empty evidence token set")
        for patch in self.patch_tokens:
            if not patch:
                raise ValueError(f"{self.doc_id}: empty patch")

    @property
    def patch_width(self) -> int:
        return self.image_width // self.grid_cols

    @property
    def patch_height(self) -> int:
        return self.image_height // self.grid_rows

    def to_json_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "patch_tokens": [list(p) for p in self.patch_tokens],
            "evidence_regions": [
                {"box": r.box.as_list(), "tokens": list(r.tokens)}
                for r in self.evidence_regions
            ],
            "image_width": self.image_width,
            "image_height": self.image_height,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticDocument":
        doc = cls(
            doc_id=str(d["doc_id"]),
            grid_rows=int(d["grid_rows"]),
            grid_cols=int(d["grid_cols"]),
            patch_tokens=[tuple(int(t) for t in p) for p in d["patch_tokens"]],
            evidence_regions=[
                EvidenceRegion(
                    box=BoundingBox.from_list(r["box"]),
                    tokens=tuple(int(t) for t in r["tokens"]),
                )
                for r in d["evidence_regions"]
            ],
            image_width=int(d["image_width"]),
            image_height=int(d["image_height"]),
        )
        doc.validate()
        return doc


@dataclass
class QueryRecord:
    query_id: str
    token_ids: tuple[int, ...]
    positive_doc_id: str
    target_region_index: int

    def validate(self) -> None:
        if not self.token_ids:
            raise ValueError(f"{self.query_id}: empty token_ids")
        if self.target_region_index < 0:
            raise ValueError(f"{self.query_id}: negative target_region_index")

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "token_ids": list(self.token_ids),
            "positive_doc_id": self.positive_doc_id,
            "target_region_index": self.target_region_index,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "QueryRecord":
        rec = cls(
            query_id=str(d["query_id"]),
            token_ids=tuple(int(t) for t in d["token_ids"]),
            positive_doc_id=str(d["positive_doc_id"]),
            target_region_index=int(d["target_region_index"]),
        )
        rec.validate()
        return rec


@dataclass
class TripletRecord:
    query_id: str
    doc_id: str
    description_tokens: tuple[int, ...] | None
    source: str

    def validate(self) -> None:
        if self.source not in TRIPLET_SOURCES:
            raise ValueError(f"unknown triplet source {self.source!r}")
        if (self.source == "none") != (self.description_tokens is None):
            raise ValueError(
                f"{self.query_id}: source={self.source} inconsistent with "
                f"description_tokens={'absent' if self.description_tokens is None else 'present'}"
            )
        if self.description_tokens is not None and not self.description_tokens:
            raise ValueError(f"{self.query_id}: empty description_tokens")

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "description_tokens": (
                None if self.description_tokens is None else list(self.description_tokens)
            ),
            "source": self.source,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TripletRecord":
        raw = d["description_tokens"]
        rec = cls(
            query_id=str(d["query_id"]),
            doc_id=str(d["doc_id"]),
            description_tokens=None if raw is None else tuple(int(t) for t in raw),
            source=str(d["source"]),
        )
        rec.validate()
        return rec


@dataclass
class CorpusManifest:
    """Seed plus every knob the generator reads."""

    seed: int = 0
    vocab_size: int = 512
    doc_count: int = 2000
    grid_rows: int = 12
    grid_cols: int = 12
    patch_pixels: int = 28
    tokens_per_patch: int = 4
    region_count_min: int = 1
    region_count_max: int = 3
    region_size_min: int = 2
    region_size_max: int = 4
    region_token_count: int = 6
    distractor_overlap_rate: float = 0.3
    noise_rate: float = 0.1
    shared_distractor_pool: int = 32
    background_vocab_size: int = 0  # 0 means vocab_size // 2
    doc_background_tokens: int = 12  # per-document private background sub-vocab
    train_query_count: int = 1000
    eval_query_count: int = 200
    query_token_count: int = 6
    query_evidence_tokens: int = 4

    def validate(self) -> None:
        positive = (
            "vocab_size",
            "doc_count",
            "grid_rows",
            "grid_cols",
            "patch_pixels",
            "tokens_per_patch",
            "region_count_min",
            "region_count_max",
            "region_size_min",
            "region_size_max",
            "region_token_count",
            "shared_distractor_pool",
            "train_query_count",
            "query_token_count",
            "query_evidence_tokens",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"manifest.{name} must be positive")
        if self.eval_query_count < 0:
            raise ValueError("manifest.eval_query_count must be >= 0")
        for name in ("distractor_overlap_rate", "noise_rate"):
            rate = getattr(self, name)
            if not (0.0 <= rate <= 1.0):
                raise ValueError(f"manifest.{name} must be in [0, 1]")
        if self.region_count_min > self.region_count_max:
            raise ValueError("manifest region count range is inverted")
        if self.region_size_min > self.region_size_max:
            raise ValueError("manifest region size range is inverted")
        if self.region_size_max > min(self.grid_rows, self.grid_cols):
            raise ValueError(
                f"region size {self.region_size_max} exceeds "
                f"{self.grid_rows}x{self.grid_cols} grid"
            )
        if self.vocab_size < 4:
            raise ValueError("vocab_size too small to split into background/evidence")
        if self.background_vocab_size < 0 or self.background_vocab_size >= self.vocab_size:
            raise ValueError("background_vocab_size must be in [0, vocab_size)")
        if not (0 < self.doc_background_tokens <= self.background_vocab):
            raise ValueError("doc_background_tokens must be in (0, background vocab]")
        if self.region_token_count > self.vocab_size - self.background_vocab:
            raise ValueError("region_token_count exceeds evidence vocabulary")
        if self.shared_distractor_pool > self.background_vocab:
            raise ValueError("shared_distractor_pool exceeds background vocabulary")
        if self.query_evidence_tokens > self.query_token_count:
            raise ValueError("query_evidence_tokens exceeds query_token_count")

    @property
    def background_vocab(self) -> int:
        """Background token ids are [0, background_vocab)."""
        return self.background_vocab_size or self.vocab_size // 2

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "CorpusManifest":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown manifest key(s): {', '.join(unknown)}")
        manifest = cls(**d)
        manifest.validate()
        return manifest


# ---- geometry ---------------------------------------------------------------


def rasterize_box(box: BoundingBox, doc: SyntheticDocument) -> set[int]:
    """Row-major patch indices covered >= 50% by the box (ties included).

    Integer area arithmetic, so the 50% tie is exact.
    """
    box.validate(doc.image_width, doc.image_height)
    pw = doc.patch_width
    ph = doc.patch_height
    patch_area = pw * ph
    out: set[int] = set()
    for r in range(box.y1 // ph, min((box.y2 + ph - 1) // ph, doc.grid_rows)):
        oh = min(box.y2, (r + 1) * ph) - max(box.y1, r * ph)
        if oh <= 0:
            continue
        for c in range(box.x1 // pw, min((box.x2 + pw - 1) // pw, doc.grid_cols)):
            ow = min(box.x2, (c + 1) * pw) - max(box.x1, c * pw)
            if ow > 0 and 2 * ow * oh >= patch_area:
                out.add(r * doc.grid_cols + c)
    return out


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union


# ---- generation -------------------------------------------------------------


def _doc_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _DOC_STREAM, index])))


def _query_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _QUERY_STREAM, index])))


def _place_regions(rng: np.random.Generator, m: CorpusManifest) -> list[tuple[int, int, int, int]]:
    """Disjoint (row, col, height, width) rectangles in patch units."""
    count = int(rng.integers(m.region_count_min, m.region_count_max + 1))
    placed: list[tuple[int, int, int, int]] = []
    taken: set[tuple[int, int]] = set()
    for _ in range(count):
        for _attempt in range(200):
            h = int(rng.integers(m.region_size_min, m.region_size_max + 1))
            w = int(rng.integers(m.region_size_min, m.region_size_max + 1))
            r0 = int(rng.integers(0, m.grid_rows - h + 1))
            c0 = int(rng.integers(0, m.grid_cols - w + 1))
            cells = {(r, c) for r in range(r0, r0 + h) for c in range(c0, c0 + w)}
            if not (cells & taken):
                placed.append((r0, c0, h, w))
                taken |= cells
                break
        # no room left: keep the regions placed so far (always >= 1)
    return placed


def _generate_document(index: int, m: CorpusManifest) -> SyntheticDocument:
    rng = _doc_rng(m.seed, index)
    rows, cols, tpp = m.grid_rows, m.grid_cols, m.tokens_per_patch
    n_patches = rows * cols
    n_background = m.background_vocab
    evidence_lo = n_background

    rects = _place_regions(rng, m)
    token_sets = [
        tuple(
            sorted(
                int(t)
                for t in rng.choice(
                    np.arange(evidence_lo, m.vocab_size), size=m.region_token_count, replace=False
                )
            )
        )
        for _ in rects
    ]

    # background fill: shared-pool draws at the overlap rate, otherwise the
    # page's private background sub-vocabulary (pages differ in their
    # non-evidence content, like real boilerplate)
    private = rng.choice(np.arange(n_background), size=m.doc_background_tokens, replace=False)
    use_shared = rng.random((n_patches, tpp)) < m.distractor_overlap_rate
    shared = rng.integers(0, m.shared_distractor_pool, size=(n_patches, tpp))
    own = private[rng.integers(0, private.size, size=(n_patches, tpp))]
    grid = np.where(use_shared, shared, own)

    for rect, tokens in zip(rects, token_sets):
        r0, c0, h, w = rect
        token_arr = np.array(tokens)
        patch_ids = [(r0 + r) * cols + (c0 + c) for r in range(h) for c in range(w)]
        draws = token_arr[rng.integers(0, token_arr.size, size=(len(patch_ids), tpp))]
        noisy = rng.random((len(patch_ids), tpp)) < m.noise_rate
        noise_tokens = private[rng.integers(0, private.size, size=(len(patch_ids), tpp))]
        draws = np.where(noisy, noise_tokens, draws)
        # pin the full token set into the region's leading slots so every
        # evidence token is physically present on the page
        flat = draws.reshape(-1)
        flat[: token_arr.size] = token_arr
        draws = flat.reshape(len(patch_ids), tpp)
        for row, pid in enumerate(patch_ids):
            grid[pid] = draws[row]

    patch_pixels = m.patch_pixels
    regions = [
        EvidenceRegion(
            box=BoundingBox(
                x1=c0 * patch_pixels,
                y1=r0 * patch_pixels,
                x2=(c0 + w) * patch_pixels,
                y2=(r0 + h) * patch_pixels,
            ),
            tokens=tokens,
        )
        for (r0, c0, h, w), tokens in zip(rects, token_sets)
    ]
    doc = SyntheticDocument(
        doc_id=f"doc-{index:05d}",
        grid_rows=rows,
        grid_cols=cols,
        patch_tokens=[tuple(int(t) for t in grid[p]) for p in range(n_patches)],
        evidence_regions=regions,
        image_width=cols * patch_pixels,
        image_height=rows * patch_pixels,
    )
    doc.validate()
    return doc


def _generate_query(
    index: int, split: str, split_index: int, m: CorpusManifest, documents: list[SyntheticDocument]
) -> QueryRecord:
    """Mostly target-region evidence plus shared-pool distractor tokens."""
    rng = _query_rng(m.seed, index)
    doc = documents[int(rng.integers(0, len(documents)))]
    region_index = int(rng.integers(0, len(doc.evidence_regions)))
    region_tokens = np.array(doc.evidence_regions[region_index].tokens)
    n_evidence = min(m.query_evidence_tokens, region_tokens.size)
    evidence = rng.choice(region_tokens, size=n_evidence, replace=False)
    n_distract = m.query_token_count - n_evidence
    distract = rng.integers(0, m.shared_distractor_pool, size=n_distract)
    rec = QueryRecord(
        query_id=f"q-{split}-{split_index:05d}",
        token_ids=tuple(int(t) for t in evidence) + tuple(int(t) for t in distract),
        positive_doc_id=doc.doc_id,
        target_region_index=region_index,
    )
    rec.validate()
    return rec


def generate_corpus(
    manifest: CorpusManifest, threads: int = 1
) -> tuple[list[SyntheticDocument], list[QueryRecord]]:
    """Generate documents and queries. Deterministic given the manifest.

    Every document/query draws from its own counter-based RNG stream, so
    output is bit-identical regardless of `threads`. Queries come back
    train split first (ids "q-train-*"), eval split after ("q-eval-*").
    """
    manifest.validate()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            documents = list(
                pool.map(lambda i: _generate_document(i, manifest), range(manifest.doc_count))
            )
    else:
        documents = [_generate_document(i, manifest) for i in range(manifest.doc_count)]

    queries: list[QueryRecord] = []
    for j in range(manifest.train_query_count):
        queries.append(_generate_query(j, "train", j, manifest, documents))
    for j in range(manifest.eval_query_count):
        queries.append(
            _generate_query(manifest.train_query_count + j, "eval", j, manifest, documents)
        )
    return documents, queries


def split_queries(
    queries: list[QueryRecord], manifest: CorpusManifest
) -> tuple[list[QueryRecord], list[QueryRecord]]:
    """Split generate_corpus output back into (train, eval) lists."""
    n_train = manifest.train_query_count
    return queries[:n_train], queries[n_train:]


# ---- persistence ------------------------------------------------------------


def write_records(path, records) -> None:
    """One JSON record per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), separators=(",", ":")) + "\n")


def read_records(path, record_type):
    """Read a JSONL file of `record_type`; malformed lines name their line number."""
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(record_type.from_json_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise RecordParseError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_manifest(path, manifest: CorpusManifest) -> None:
    Path(path).write_text(
        json.dumps(manifest.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_manifest(path) -> CorpusManifest:
    try:
        return CorpusManifest.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise RecordParseError(f"{path}: {exc}") from exc
