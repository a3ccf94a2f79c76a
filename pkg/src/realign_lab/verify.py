"""Cross-module verification: finite-difference gradient oracle, brute-force
metric oracle, and the multi-seed ablation experiment behind the acceptance
suite.

The gradient oracle perturbs every parameter entry of small random
encoder/batch configurations and compares central differences of the total
loss against the analytic backward pass. With a detached teacher the
analytic gradient is the exact gradient of the frozen-teacher surrogate
(teacher distribution held at its unperturbed value), so that is the
function being differenced in that mode.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import evalsuite, oracle
from .corpus import (
    BoundingBox,
    CorpusManifest,
    EvidenceRegion,
    QueryRecord,
    SyntheticDocument,
    generate_corpus,
    split_queries,
)
from .diagnostics import compute_attention_report, compute_space_stats
from .objective import BatchScores, contrastive_loss
from .trainer import TrainConfig, train


@dataclass
class OracleReport:
    suite: str
    cases: int
    max_rel_error: float
    tolerance: float
    passed: bool
    seeds: list[int]

    def to_json_dict(self) -> dict:
        return {
            "suite": self.suite,
            "cases": self.cases,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "seeds": self.seeds,
        }


def write_oracle_report(path, reports) -> None:
    payload = [r.to_json_dict() for r in reports]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---- gradient oracle --------------------------------------------------------


def _random_case(rng: np.random.Generator):
    vocab = int(rng.integers(8, 16))
    d_model = int(rng.integers(4, 7))
    d_embed = int(rng.integers(3, 6))
    rows, cols = 2, int(rng.integers(2, 4))
    tokens_per_patch = int(rng.integers(1, 4))
    batch = int(rng.integers(2, 5))

    dims = enc.EncoderDims(vocab, d_model, d_embed, rows, cols)
    params = enc.init_params(dims, int(rng.integers(0, 2**31)))

    docs = []
    for b in range(batch):
        patch_tokens = [
            tuple(int(t) for t in rng.integers(0, vocab, size=tokens_per_patch))
            for _ in range(rows * cols)
        ]
        docs.append(
            SyntheticDocument(
                doc_id=f"case-doc-{b}",
                grid_rows=rows,
                grid_cols=cols,
                patch_tokens=patch_tokens,
                evidence_regions=[
                    EvidenceRegion(
                        box=BoundingBox(0, 0, 28, 28), tokens=(patch_tokens[0][0],)
                    )
                ],
                image_width=cols * 28,
                image_height=rows * 28,
            )
        )
    queries = [
        tuple(int(t) for t in rng.integers(0, vocab, size=int(rng.integers(2, 5))))
        for _ in range(batch)
    ]
    # vary masking: all described, some described, none described
    style = int(rng.integers(0, 3))
    desc_rows = {0: list(range(batch)), 1: [0], 2: []}[style]
    descriptions = {
        i: tuple(int(t) for t in rng.integers(0, vocab, size=int(rng.integers(1, 5))))
        for i in desc_rows
    }
    return dims, params, docs, queries, descriptions


def _forward_loss(params, docs, queries, descriptions, lambda_, temperature, frozen_log_p=None):
    """Total loss; with frozen_log_p the teacher term uses those constants."""
    d_emb, _, _ = enc.encode_documents(docs, params)
    q_emb, _ = enc.encode_texts(queries, params)
    batch = len(docs)
    scores_q = (q_emb @ d_emb.T) / temperature
    log_p = scores_q - scores_q.max(axis=1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    contrast = float(-np.mean(np.diag(log_p)))
    if lambda_ == 0.0 or not descriptions:
        return contrast
    rows = sorted(descriptions)
    t_emb, _ = enc.encode_texts([descriptions[i] for i in rows], params)
    scores_t = (t_emb @ d_emb.T) / temperature
    log_s = scores_t - scores_t.max(axis=1, keepdims=True)
    log_s = log_s - np.log(np.exp(log_s).sum(axis=1, keepdims=True))
    teacher = frozen_log_p[rows] if frozen_log_p is not None else log_p[rows]
    p = np.exp(teacher)
    kl_rows = np.einsum("bj,bj->b", p, teacher - log_s)
    return contrast + lambda_ * float(np.sum(kl_rows) / len(rows))


def _analytic_param_grads(params, docs, queries, descriptions, lambda_, temperature, teacher_detached):
    from .objective import total_loss

    d_emb, _, d_cache = enc.encode_documents(docs, params)
    q_emb, q_cache = enc.encode_texts(queries, params)
    batch = len(docs)
    rows = sorted(descriptions)
    t_emb = None
    mask = np.zeros(batch, dtype=bool)
    t_cache = None
    if rows and lambda_ > 0.0:
        emb, t_cache = enc.encode_texts([descriptions[i] for i in rows], params)
        t_emb = np.zeros_like(q_emb)
        t_emb[rows] = emb
        mask[rows] = True
    scores = BatchScores(
        query_embeddings=q_emb,
        document_embeddings=d_emb,
        temperature=temperature,
        description_embeddings=t_emb,
        description_mask=mask,
    )
    breakdown, bgrads = total_loss(scores, lambda_, teacher_detached)
    grads = enc.EncoderGrads.zeros(params.dims)
    enc.backward(d_cache, bgrads.d_document, params, grads)
    enc.backward(q_cache, bgrads.d_query, params, grads)
    if t_cache is not None:
        enc.backward(t_cache, bgrads.d_description[rows], params, grads)
    return breakdown, grads


def run_gradient_oracle(
    case_count: int = 100,
    seed: int = 0,
    lambdas=(0.0, 0.2, 1.0),
    tolerance: float = 1e-4,
    fd_step: float = 1e-5,
    fault: str | None = None,
) -> OracleReport:
    """Analytic total-loss parameter gradients vs central finite differences.

    Per-entry relative error |a - f| / max(|a|, |f|, 1e-6); fault="scale"
    doubles the analytic gradient to prove the harness catches bugs.
    """
    if case_count < 1:
        raise ValueError("case_count must be >= 1")
    rng = np.random.default_rng(seed)
    temperatures = (1.0, 0.2, 0.05)
    max_rel = 0.0
    for case in range(case_count):
        dims, params, docs, queries, descriptions = _random_case(rng)
        lambda_ = lambdas[case % len(lambdas)]
        temperature = temperatures[case % len(temperatures)]
        teacher_detached = bool(case % 2)

        _, grads = _analytic_param_grads(
            params, docs, queries, descriptions, lambda_, temperature, teacher_detached
        )
        if fault == "scale":
            grads.scale_(2.0)

        frozen_log_p = None
        if teacher_detached and lambda_ > 0.0 and descriptions:
            d_emb, _, _ = enc.encode_documents(docs, params)
            q_emb, _ = enc.encode_texts(queries, params)
            s = (q_emb @ d_emb.T) / temperature
            frozen_log_p = s - s.max(axis=1, keepdims=True)
            frozen_log_p = frozen_log_p - np.log(
                np.exp(frozen_log_p).sum(axis=1, keepdims=True)
            )

        for name in enc.PARAM_FIELDS:
            tensor = getattr(params, name)
            analytic = getattr(grads, name)
            flat = tensor.reshape(-1)
            a_flat = analytic.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + fd_step
                up = _forward_loss(
                    params, docs, queries, descriptions, lambda_, temperature, frozen_log_p
                )
                flat[idx] = orig - fd_step
                down = _forward_loss(
                    params, docs, queries, descriptions, lambda_, temperature, frozen_log_p
                )
                flat[idx] = orig
                fd = (up - down) / (2.0 * fd_step)
                rel = abs(a_flat[idx] - fd) / max(abs(a_flat[idx]), abs(fd), 1e-6)
                if rel > max_rel:
                    max_rel = rel
    return OracleReport(
        suite="gradient",
        cases=case_count,
        max_rel_error=float(max_rel),
        tolerance=tolerance,
        passed=bool(max_rel < tolerance),
        seeds=[seed],
    )


# ---- metric oracle ----------------------------------------------------------


def _brute_ndcg(ordered_ids, relevant, k: int) -> float:
    gains = [1.0 if doc_id in relevant else 0.0 for doc_id in ordered_ids]
    dcg = 0.0
    for position in range(min(k, len(gains))):
        dcg += gains[position] / math.log2(position + 2)
    ideal = sorted(gains, reverse=True)
    idcg = 0.0
    for position in range(min(k, len(ideal))):
        idcg += ideal[position] / math.log2(position + 2)
    return dcg / idcg if idcg > 0 else 0.0


def _brute_recall(ordered_ids, relevant, k: int) -> float:
    return len(set(ordered_ids[:k]) & relevant) / len(relevant)


def run_metric_oracle(
    case_count: int = 1000,
    seed: int = 0,
    tolerance: float = 1e-9,
    fault: str | None = None,
) -> OracleReport:
    """NDCG/Recall vs explicit permutation scoring on random ranked lists.

    fault="rank_shift" corrupts the brute-force ranking by one position.
    """
    rng = np.random.default_rng(seed)
    max_err = 0.0
    for _ in range(case_count):
        n = int(rng.integers(3, 41))
        scores = np.round(rng.normal(size=n), 1)  # coarse values force ties
        ids = [f"d{i:03d}" for i in rng.permutation(n)]
        dim = 4
        # build embeddings whose dot against a fixed anchor equals `scores`
        anchor = np.zeros(dim)
        anchor[0] = 1.0
        docs = np.zeros((n, dim))
        docs[:, 0] = scores
        docs[:, 1] = 1.0
        ranking = evalsuite.rank_corpus(anchor, docs, ids)
        n_rel = int(rng.integers(1, min(4, n + 1)))
        relevant = set(rng.choice(ids, size=n_rel, replace=False).tolist())
        ordered = list(ranking.doc_ids)
        if fault == "rank_shift":
            ordered = ordered[1:] + ordered[:1]
        for k in (5, 10):
            err = abs(evalsuite.ndcg_at_k(ranking, relevant, k) - _brute_ndcg(ordered, relevant, k))
            max_err = max(max_err, err)
            err = abs(
                evalsuite.recall_at_k(ranking, relevant, k) - _brute_recall(ordered, relevant, k)
            )
            max_err = max(max_err, err)
    return OracleReport(
        suite="metric",
        cases=case_count,
        max_rel_error=float(max_err),
        tolerance=tolerance,
        passed=bool(max_err < tolerance),
        seeds=[seed],
    )


# ---- ablation experiment ----------------------------------------------------

# Desk-scale training recipe used by the ablation/acceptance experiments.
# The TrainConfig defaults mirror the published fine-tuning setup, which
# assumes a pretrained multi-billion-parameter backbone; a from-scratch
# 64-dim encoder needs more optimizer steps and a larger step size to
# converge at all. See the run's config hash for the exact values.
DESK_TRAIN_OVERRIDES: dict = {
    "epochs": 10,
    "accumulation_steps": 1,
    "peak_lr": 0.02,
}


@dataclass
class AblationConfig:
    manifest: CorpusManifest = field(default_factory=CorpusManifest)
    seeds: tuple = (0, 1, 2, 3, 4)
    arms: tuple = ("infonce", "wopr", "realign")
    lambda_grid: tuple = ()
    train_overrides: dict = field(default_factory=dict)
    k_values: tuple = (5, 10)
    top_fraction: float = 0.2
    coverage_sample: int = 200
    threads: int = 1


@dataclass
class ArmResult:
    arm: str
    seed: int
    metrics: dict
    alignment: float
    uniformity: float
    coverage: float
    iou: float


@dataclass
class AblationResult:
    rows: list[ArmResult]
    means: dict

    def mean_of(self, arm: str, key: str) -> float:
        return self.means[arm][key]


def _arm_lambda(arm: str, base_lambda: float) -> float:
    if arm == "infonce":
        return 0.0
    if arm.startswith("lambda_"):
        return float(arm.split("_", 1)[1])
    return base_lambda


def run_ablation_experiment(config: AblationConfig, out_dir=None) -> AblationResult:
    """Train every (arm, seed), evaluate NDCG/Recall plus diagnostics.

    Arms: infonce (lambda 0), wopr (whole-page triplets), realign (region
    triplets), plus lambda_<v> grid arms on region triplets. Writes
    ablation_table.csv under out_dir when given.
    """
    manifest = config.manifest
    documents, queries = generate_corpus(manifest, threads=config.threads)
    train_queries, eval_queries = split_queries(queries, manifest)
    if not eval_queries:
        raise ValueError("ablation needs manifest.eval_query_count > 0")

    region_backend = oracle.SyntheticOracle(
        documents, noise_vocab=manifest.background_vocab, seed=manifest.seed
    )
    region_triplets, _ = oracle.synthesize_dataset(
        train_queries, documents, region_backend, seed=manifest.seed
    )
    page_backend = oracle.WholePageOracle(documents)
    page_triplets, _ = oracle.synthesize_dataset(
        train_queries, documents, page_backend, seed=manifest.seed
    )

    base_payload = TrainConfig().to_json_dict()
    base_payload.update(config.train_overrides or DESK_TRAIN_OVERRIDES)
    base_lambda = base_payload["lambda"]

    arms = list(config.arms) + [f"lambda_{v:g}" for v in config.lambda_grid]
    jobs = [(arm, seed) for arm in arms for seed in config.seeds]

    def run_one(job):
        arm, seed = job
        payload = dict(base_payload)
        payload["lambda"] = _arm_lambda(arm, base_lambda)
        payload["seed"] = seed
        cfg = TrainConfig.from_json_dict(payload)
        triplets = page_triplets if arm == "wopr" else region_triplets
        result = train(
            documents, train_queries, triplets, cfg, vocab_size=manifest.vocab_size
        )
        params = result.checkpoint.params
        report = evalsuite.evaluate_retriever(
            params, documents, eval_queries, k_values=config.k_values
        )
        # embedding-space stats and IoU on held-out queries; coverage on a
        # training-instance sample (the regions whose descriptions supervised
        # the run), mirroring the analysis protocol
        space = compute_space_stats(params, documents, eval_queries)
        att_train = compute_attention_report(
            params,
            documents,
            train_queries[: config.coverage_sample],
            top_fraction=config.top_fraction,
        )
        att_eval = compute_attention_report(
            params, documents, eval_queries, top_fraction=config.top_fraction
        )
        return ArmResult(
            arm=arm,
            seed=seed,
            metrics=report.means,
            alignment=space.mean_query_positive_distance,
            uniformity=space.mean_pairwise_doc_distance,
            coverage=att_train.mean_coverage,
            iou=att_eval.mean_iou,
        )

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            rows = list(pool.map(run_one, jobs))
    else:
        rows = [run_one(job) for job in jobs]

    means: dict = {}
    for arm in arms:
        arm_rows = [r for r in rows if r.arm == arm]
        entry = {
            key: float(np.mean([r.metrics[key] for r in arm_rows]))
            for key in arm_rows[0].metrics
        }
        entry["alignment"] = float(np.mean([r.alignment for r in arm_rows]))
        entry["uniformity"] = float(np.mean([r.uniformity for r in arm_rows]))
        entry["coverage"] = float(np.mean([r.coverage for r in arm_rows]))
        entry["iou"] = float(np.mean([r.iou for r in arm_rows]))
        means[arm] = entry

    result = AblationResult(rows=rows, means=means)
    if out_dir is not None:
        write_ablation_table(Path(out_dir) / "ablation_table.csv", result)
    return result


def write_ablation_table(path, result: AblationResult) -> None:
    metric_keys = sorted(result.rows[0].metrics)
    extra = ("alignment", "uniformity", "coverage", "iou")
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "seed", *metric_keys, *extra])
        for row in result.rows:
            writer.writerow(
                [
                    row.arm,
                    row.seed,
                    *(repr(row.metrics[k]) for k in metric_keys),
                    repr(row.alignment),
                    repr(row.uniformity),
                    repr(row.coverage),
                    repr(row.iou),
                ]
            )
        for arm, entry in result.means.items():
            writer.writerow(
                ["MEAN/" + arm, "", *(repr(entry[k]) for k in metric_keys + list(extra))]
            )
