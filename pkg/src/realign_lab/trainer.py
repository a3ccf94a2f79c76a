"""Optimization loop: batching, AdamW, warmup/decay schedule, checkpoints.

Training is fp64 and fully deterministic: batch plans for every epoch are
derived from (seed, epoch) up front, gradient accumulation reduces in fixed
micro-batch order, and checkpoints carry parameters, optimizer moments,
and the resume cursor, so a resumed run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import encoder as enc
from .corpus import QueryRecord, SyntheticDocument, TripletRecord
from .objective import BatchScores, total_loss

_EPOCH_STREAM = 17

CHECKPOINT_MAGIC = b"RLABCK01"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is unreadable, corrupt, or incompatible."""


class TrainingDiverged(Exception):
    """Loss became non-finite; carries the optimizer step index."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 5
    logical_batch: int = 64
    accumulation_steps: int = 4
    peak_lr: float = 1e-4
    warmup_ratio: float = 0.1
    lambda_: float = 0.2
    temperature: float = 0.05
    teacher_detached: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    d_model: int = 64
    d_embed: int = 32

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.logical_batch < 2:
            raise ValueError("logical_batch must be >= 2")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ValueError("warmup_ratio must be in [0, 1)")
        for name in ("peak_lr", "temperature", "eps"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_ < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must be in (0, 1)")
        if self.d_model < 1 or self.d_embed < 1:
            raise ValueError("model dims must be positive")

    def to_json_dict(self) -> dict:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            out[key] = getattr(self, f.name)
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        known = {("lambda" if f.name == "lambda_" else f.name): f.name for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown train config key(s): {', '.join(unknown)}")
        cfg = cls(**{known[k]: v for k, v in d.items()})
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        canon = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class OptimizerState:
    m: enc.EncoderGrads
    v: enc.EncoderGrads
    t: int = 0

    @classmethod
    def zeros(cls, dims: enc.EncoderDims) -> "OptimizerState":
        return cls(m=enc.EncoderGrads.zeros(dims), v=enc.EncoderGrads.zeros(dims), t=0)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: enc.EncoderParams
    opt: OptimizerState
    step: int
    micro_cursor: int  # micro-batches consumed across all epochs


# ---- batching and schedule --------------------------------------------------


def make_batches(triplets, logical_batch: int, epoch_seed) -> list[list[TripletRecord]]:
    """Seeded shuffle, then greedy batches with distinct positive documents.

    A triplet colliding with its current batch is deferred to later
    batches; the final short remainder is dropped so every batch carries
    exactly logical_batch - 1 in-batch negatives per row.
    """
    triplets = list(triplets)
    if len({t.doc_id for t in triplets}) < logical_batch:
        raise ValueError(
            f"need >= {logical_batch} distinct positive documents, "
            f"got {len({t.doc_id for t in triplets})}"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(epoch_seed)))
    pool = [triplets[i] for i in rng.permutation(len(triplets))]
    batches: list[list[TripletRecord]] = []
    while True:
        batch: list[TripletRecord] = []
        used: set[str] = set()
        rest: list[TripletRecord] = []
        for t in pool:
            if len(batch) < logical_batch and t.doc_id not in used:
                batch.append(t)
                used.add(t.doc_id)
            else:
                rest.append(t)
        if len(batch) < logical_batch:
            break
        batches.append(batch)
        pool = rest
    return batches


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0->peak over ceil(warmup_ratio*total) steps, then peak->0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} out of range [0, {total_steps}]")
    warmup = math.ceil(cfg.warmup_ratio * total_steps)
    if warmup > 0 and step <= warmup:
        return cfg.peak_lr * step / warmup
    return cfg.peak_lr * (total_steps - step) / (total_steps - warmup)


def adamw_step(
    params: enc.EncoderParams,
    grads: enc.EncoderGrads,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update, in place, fixed tensor order."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name in enc.PARAM_FIELDS:
        p = getattr(params, name)
        g = getattr(grads, name)
        if p.shape != g.shape:
            raise ValueError(f"grad shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p)


# ---- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_records: list[dict]
    total_steps: int


def _epoch_plans(triplets, cfg: TrainConfig) -> list[list[list[TripletRecord]]]:
    return [
        make_batches(triplets, cfg.logical_batch, [cfg.seed, _EPOCH_STREAM, e])
        for e in range(cfg.epochs)
    ]


def planned_steps(triplets, cfg: TrainConfig) -> int:
    """Optimizer steps the schedule will run (partial final groups flush)."""
    return sum(
        math.ceil(len(plan) / cfg.accumulation_steps) for plan in _epoch_plans(triplets, cfg)
    )


def train(
    documents: list[SyntheticDocument],
    queries: list[QueryRecord],
    triplets: list[TripletRecord],
    cfg: TrainConfig,
    vocab_size: int,
    resume: Checkpoint | None = None,
    stop_after_steps: int | None = None,
) -> TrainResult:
    """Run the full loop; returns the final checkpoint plus per-step logs.

    `resume` continues bit-exactly from a previous checkpoint of the same
    config; `stop_after_steps` halts after that many optimizer steps in
    this invocation's schedule (counted from step 0 of the whole run).
    """
    cfg.validate()
    doc_by_id = {d.doc_id: d for d in documents}
    query_by_id = {q.query_id: q for q in queries}
    for t in triplets:
        if t.doc_id not in doc_by_id:
            raise ValueError(f"triplet references unknown document {t.doc_id}")
        if t.query_id not in query_by_id:
            raise ValueError(f"triplet references unknown query {t.query_id}")

    grid = (documents[0].grid_rows, documents[0].grid_cols)
    dims = enc.EncoderDims(
        vocab_size=vocab_size,
        d_model=cfg.d_model,
        d_embed=cfg.d_embed,
        grid_rows=grid[0],
        grid_cols=grid[1],
    )

    if resume is not None:
        if resume.config.config_hash() != cfg.config_hash():
            raise CheckpointError("resume checkpoint was trained with a different config")
        params = resume.params.copy()
        opt = OptimizerState(
            m=_copy_grads(resume.opt.m), v=_copy_grads(resume.opt.v), t=resume.opt.t
        )
        step = resume.step
        cursor_target = resume.micro_cursor
    else:
        params = enc.init_params(dims, cfg.seed)
        opt = OptimizerState.zeros(dims)
        step = 0
        cursor_target = 0

    plans = _epoch_plans(triplets, cfg)
    total_steps = sum(math.ceil(len(plan) / cfg.accumulation_steps) for plan in plans)
    log_records: list[dict] = []
    micro_cursor = 0

    for plan in plans:
        for group_start in range(0, len(plan), cfg.accumulation_steps):
            group = plan[group_start : group_start + cfg.accumulation_steps]
            if micro_cursor + len(group) <= cursor_target:
                micro_cursor += len(group)
                continue
            grads = enc.EncoderGrads.zeros(dims)
            sums = {"contrastive": 0.0, "kl": 0.0, "total": 0.0}
            mask_total = 0
            for micro in group:
                breakdown = _micro_step(micro, doc_by_id, query_by_id, params, cfg, grads)
                if not math.isfinite(breakdown.total):
                    raise TrainingDiverged(
                        step, f"non-finite loss {breakdown.total!r} at optimizer step {step}"
                    )
                sums["contrastive"] += breakdown.contrastive
                sums["kl"] += breakdown.kl
                sums["total"] += breakdown.total
                mask_total += breakdown.kl_mask_count
                micro_cursor += 1
            grads.scale_(1.0 / len(group))
            lr = lr_at(step, total_steps, cfg)
            adamw_step(params, grads, opt, lr, cfg)
            step += 1
            n = len(group)
            log_records.append(
                {
                    "step": step,
                    "lr": lr,
                    "contrastive": sums["contrastive"] / n,
                    "kl": sums["kl"] / n,
                    "total": sums["total"] / n,
                    "kl_mask_count": mask_total,
                }
            )
            if stop_after_steps is not None and step >= stop_after_steps:
                ckpt = Checkpoint(cfg, params, opt, step, micro_cursor)
                return TrainResult(ckpt, log_records, total_steps)

    ckpt = Checkpoint(cfg, params, opt, step, micro_cursor)
    return TrainResult(ckpt, log_records, total_steps)


def _copy_grads(g: enc.EncoderGrads) -> enc.EncoderGrads:
    return enc.EncoderGrads(**{name: getattr(g, name).copy() for name in enc.PARAM_FIELDS})


def _micro_step(micro, doc_by_id, query_by_id, params, cfg, grads):
    docs = [doc_by_id[t.doc_id] for t in micro]
    query_tokens = [query_by_id[t.query_id].token_ids for t in micro]
    d_emb, _, d_cache = enc.encode_documents(docs, params)
    q_emb, q_cache = enc.encode_texts(query_tokens, params)

    desc_rows = [i for i, t in enumerate(micro) if t.description_tokens is not None]
    t_emb = None
    t_cache = None
    mask = np.zeros(len(micro), dtype=bool)
    if desc_rows and cfg.lambda_ > 0.0:
        desc_emb, t_cache = enc.encode_texts(
            [micro[i].description_tokens for i in desc_rows], params
        )
        t_emb = np.zeros_like(q_emb)
        t_emb[desc_rows] = desc_emb
        mask[desc_rows] = True

    batch = BatchScores(
        query_embeddings=q_emb,
        document_embeddings=d_emb,
        temperature=cfg.temperature,
        description_embeddings=t_emb,
        description_mask=mask,
    )
    breakdown, bgrads = total_loss(batch, cfg.lambda_, cfg.teacher_detached)
    enc.backward(d_cache, bgrads.d_document, params, grads)
    enc.backward(q_cache, bgrads.d_query, params, grads)
    if t_cache is not None:
        enc.backward(t_cache, bgrads.d_description[desc_rows], params, grads)
    return breakdown


# ---- checkpoint container ---------------------------------------------------


def _tensor_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"params/{name}", getattr(ckpt.params, name)) for name in enc.PARAM_FIELDS]
    entries += [(f"opt_m/{name}", getattr(ckpt.opt.m, name)) for name in enc.PARAM_FIELDS]
    entries += [(f"opt_v/{name}", getattr(ckpt.opt.v, name)) for name in enc.PARAM_FIELDS]
    return entries


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Versioned container: magic, JSON manifest, fp64 LE blobs, sha256."""
    entries = _tensor_entries(ckpt)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_json_dict(),
        "config_hash": ckpt.config.config_hash(),
        "dims": ckpt.params.dims.to_json_dict(),
        "step": ckpt.step,
        "micro_cursor": ckpt.micro_cursor,
        "adam_t": ckpt.opt.t,
        "rng": {"seed": ckpt.config.seed},
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += len(manifest_bytes).to_bytes(8, "little")
    body += manifest_bytes
    for _, arr in entries:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += hashlib.sha256(bytes(body)).digest()
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    if body[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    manifest_len = int.from_bytes(body[off : off + 8], "little")
    off += 8
    try:
        manifest = json.loads(body[off : off + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    off += manifest_len
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {manifest.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    cfg = TrainConfig.from_json_dict(manifest["config"])
    dims = enc.EncoderDims.from_json_dict(manifest["dims"])

    arrays = {}
    for spec in manifest["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape)) * 8
        chunk = body[off : off + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: tensor {spec['name']} truncated")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensors")

    params = enc.EncoderParams(dims, *(arrays[f"params/{n}"] for n in enc.PARAM_FIELDS))
    params.validate()
    opt = OptimizerState(
        m=enc.EncoderGrads(**{n: arrays[f"opt_m/{n}"] for n in enc.PARAM_FIELDS}),
        v=enc.EncoderGrads(**{n: arrays[f"opt_v/{n}"] for n in enc.PARAM_FIELDS}),
        t=int(manifest["adam_t"]),
    )
    return Checkpoint(
        config=cfg,
        params=params,
        opt=opt,
        step=int(manifest["step"]),
        micro_cursor=int(manifest["micro_cursor"]),
    )


def params_digest(params: enc.EncoderParams) -> str:
    """sha256 over the parameter tensors, for tagging evaluation reports."""
    h = hashlib.sha256()
    for _, arr in params.tensors():
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def write_train_log(path, records) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
