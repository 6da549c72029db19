"""Retrieval evaluation: mAP and top-k hit rates over sampled galleries,
weight/feature-subset sweeps, the k-reciprocal baseline, and a small
inference-overhead microbenchmark.

A query is one labeled person instance; its gallery is a seeded sample of
whole images (never the query's own image) forced to contain at least one
true match. Candidates are every person row of the sampled images, ranked
by the fused scores. Score components are cached per query so that sweeps
over the fusion weight or feature subsets re-rank without re-running the
attention head.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .head import UNLABELED, AcaeParams, acae_forward
from .linalg import l2_normalize_rows
from .rerank import k_reciprocal_rerank
from .similarity import FusionConfig, ScoredGallery, contextual_similarity, fuse, score_query

_QUERY_SALT = 0xE7A1
_GALLERY_SALT = 0x6A11
_BENCH_SALT = 0xBE9C


@dataclass(frozen=True)
class EvalProtocol:
    """How galleries are sampled and which metrics are reported."""

    gallery_size: int = 50
    seed: int = 0
    max_queries: int = 0  # 0 keeps every valid query
    topk: tuple = (1, 5, 10)

    def __post_init__(self):
        if self.gallery_size < 1:
            raise ValueError("gallery size must be at least 1")


@dataclass
class QueryRecord:
    image_index: int
    row: int
    identity: int


@dataclass
class QueryScores:
    """Cached scoring state of one query against its sampled gallery."""

    record: QueryRecord
    scored: ScoredGallery
    relevant: np.ndarray
    query_feat: np.ndarray | None = None
    candidate_feats: np.ndarray | None = None


@dataclass
class ScoreTable:
    queries: list
    protocol: EvalProtocol
    appearance_seconds: float
    head_seconds: float


@dataclass
class EvalReport:
    label: str
    fusion: FusionConfig | None
    map: float
    topk: dict
    n_queries: int
    per_query_ap: np.ndarray
    appearance_seconds: float = 0.0
    head_seconds: float = 0.0

    def row(self) -> list:
        cells = [self.label, f"{100 * self.map:.2f}"]
        cells += [f"{100 * self.topk[k]:.2f}" for k in sorted(self.topk)]
        return cells


def average_precision(flags) -> float:
    """Mean of precision-at-k over the relevant ranks of a binary ranking."""
    flags = np.asarray(flags, dtype=np.float64)
    n_rel = flags.sum()
    if n_rel == 0:
        raise ValueError("ranking contains no relevant item")
    cum = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    return float(np.sum((cum / ranks) * flags) / n_rel)


def select_queries(dataset, protocol: EvalProtocol) -> list:
    """Labeled instances with at least one labeled match in another image."""
    images_with = {}
    for idx, img in enumerate(dataset.images):
        for t in set(int(x) for x in img.labels if x != UNLABELED):
            images_with.setdefault(t, []).append(idx)

    queries = []
    for idx, img in enumerate(dataset.images):
        for row in range(img.n):
            t = int(img.labels[row])
            if t == UNLABELED:
                continue
            if any(other != idx for other in images_with.get(t, [])):
                queries.append(QueryRecord(image_index=idx, row=row, identity=t))

    if protocol.max_queries and len(queries) > protocol.max_queries:
        rng = np.random.default_rng([protocol.seed, _QUERY_SALT])
        keep = rng.choice(len(queries), size=protocol.max_queries, replace=False)
        queries = [queries[i] for i in sorted(keep)]
    return queries


def sample_gallery(dataset, query: QueryRecord, position: int,
                   protocol: EvalProtocol) -> list:
    """Seeded image sample for one query, forced to hold a true match."""
    rng = np.random.default_rng([protocol.seed, _GALLERY_SALT, position])
    candidates = [i for i in range(len(dataset.images)) if i != query.image_index]
    true_imgs = [i for i in candidates
                 if query.identity in dataset.images[i].labels]
    if not true_imgs:
        raise ValueError(f"identity {query.identity} has no gallery match")

    size = min(protocol.gallery_size, len(candidates))
    picked = list(rng.choice(candidates, size=size, replace=False))
    if not any(i in true_imgs for i in picked):
        slot = int(rng.integers(size))
        picked[slot] = int(true_imgs[int(rng.integers(len(true_imgs)))])
    return [int(i) for i in picked]


def build_score_table(dataset, params: AcaeParams | None,
                      protocol: EvalProtocol, keep_features: bool = False) -> ScoreTable:
    """Score every query once, caching all components for later re-blends."""
    build_cfg = FusionConfig()  # all stages on; reblended later
    if params is None:
        build_cfg = replace(build_cfg, lam=0.0)
    queries = select_queries(dataset, protocol)
    if not queries:
        raise ValueError("dataset yields no valid queries")

    appearance_cfg = replace(build_cfg, lam=0.0)
    entries = []
    t_app = 0.0
    t_head = 0.0
    for pos, q in enumerate(queries):
        gallery_ids = sample_gallery(dataset, q, pos, protocol)
        gallery = [dataset.images[i] for i in gallery_ids]
        qimg = dataset.images[q.image_index]

        t0 = time.perf_counter()
        score_query(qimg, q.row, gallery, None, appearance_cfg)
        t1 = time.perf_counter()
        scored = score_query(qimg, q.row, gallery, params, build_cfg)
        t2 = time.perf_counter()
        t_app += t1 - t0
        t_head += t2 - t1

        relevant = np.concatenate([
            (img.labels == q.identity).astype(np.float64) for img in gallery
        ])
        entry = QueryScores(record=q, scored=scored, relevant=relevant)
        if keep_features:
            entry.query_feat = l2_normalize_rows(
                qimg.features[q.row:q.row + 1])[0]
            entry.candidate_feats = l2_normalize_rows(
                np.vstack([img.features for img in gallery]))
        entries.append(entry)
    return ScoreTable(queries=entries, protocol=protocol,
                      appearance_seconds=t_app, head_seconds=t_head)


def _rank_metrics(order_scores: np.ndarray, relevant: np.ndarray, topk) -> tuple:
    order = np.argsort(-order_scores, kind="stable")
    flags = relevant[order]
    if flags.sum() == 0:
        return None, {}
    ap = average_precision(flags)
    hits = {k: float(flags[:k].sum() > 0) for k in topk}
    return ap, hits


def metrics_from_table(table: ScoreTable, cfg: FusionConfig,
                       label: str | None = None) -> EvalReport:
    """Re-rank the cached components under one fusion config."""
    aps = []
    hitlists = {k: [] for k in table.protocol.topk}
    for entry in table.queries:
        scores = entry.scored.reblend(cfg)
        ap, hits = _rank_metrics(scores, entry.relevant, table.protocol.topk)
        if ap is None:
            warnings.warn(f"query {entry.record} has no relevant candidate; skipped")
            continue
        aps.append(ap)
        for k in hitlists:
            hitlists[k].append(hits[k])
    aps = np.asarray(aps)
    return EvalReport(
        label=label or _describe(cfg),
        fusion=cfg,
        map=float(aps.mean()),
        topk={k: float(np.mean(v)) for k, v in hitlists.items()},
        n_queries=len(aps),
        per_query_ap=aps,
        appearance_seconds=table.appearance_seconds,
        head_seconds=table.head_seconds,
    )


def _describe(cfg: FusionConfig) -> str:
    if cfg.lam == 0:
        return "baseline"
    stages = "+".join(cfg.enabled_stages())
    tail = " rescaled" if cfg.rescale else ""
    return f"lam={cfg.lam:g} {stages}{tail}"


def evaluate(dataset, params: AcaeParams | None, protocol: EvalProtocol,
             cfg: FusionConfig, label: str | None = None) -> EvalReport:
    """One-shot evaluation; prefer build_score_table + metrics_from_table
    when several configs are compared on the same dataset/model."""
    table = build_score_table(dataset, params if cfg.lam > 0 else None, protocol)
    return metrics_from_table(table, cfg, label=label)


def sweep_lambda(table: ScoreTable, lambdas, base_cfg: FusionConfig) -> list:
    """One report per fusion weight, components shared across the sweep."""
    reports = []
    for lam in lambdas:
        cfg = replace(base_cfg, lam=float(lam))
        reports.append(metrics_from_table(table, cfg, label=f"lam={lam:g}"))
    return reports


SUBSET_ROWS = (
    ("baseline", (False, False, False)),
    ("intra-only", (True, False, False)),
    ("inter-only", (False, True, False)),
    ("final-only", (False, False, True)),
    ("intra-excluded", (False, True, True)),
    ("inter-excluded", (True, False, True)),
    ("final-excluded", (True, True, False)),
    ("overall", (True, True, True)),
)


def sweep_subsets(table: ScoreTable, base_cfg: FusionConfig) -> list:
    """The eight feature-subset rows: baseline plus every nonempty subset.

    The baseline row is plain appearance ranking (no fusion, no rescaling);
    the seven subset rows inherit the weight and rescaling of ``base_cfg``.
    """
    reports = []
    for label, (ui, ue, uf) in SUBSET_ROWS:
        if label == "baseline":
            cfg = replace(base_cfg, lam=0.0, rescale=False,
                          use_intra=True, use_inter=True, use_final=True)
        else:
            cfg = replace(base_cfg, use_intra=ui, use_inter=ue, use_final=uf)
        reports.append(metrics_from_table(table, cfg, label=label))
    return reports


def rerank_metrics(table: ScoreTable, k1: int, k2: int, blend: float) -> EvalReport:
    """Evaluate k-reciprocal re-ranked appearance distances per query."""
    aps = []
    hitlists = {k: [] for k in table.protocol.topk}
    for entry in table.queries:
        if entry.candidate_feats is None:
            raise ValueError("score table was built without keep_features")
        dist = k_reciprocal_rerank(entry.query_feat[None, :],
                                   entry.candidate_feats,
                                   k1=k1, k2=k2, blend=blend)[0]
        ap, hits = _rank_metrics(-dist, entry.relevant, table.protocol.topk)
        if ap is None:
            continue
        aps.append(ap)
        for k in hitlists:
            hitlists[k].append(hits[k])
    aps = np.asarray(aps)
    return EvalReport(
        label=f"k-reciprocal k1={k1} k2={k2} blend={blend:g}",
        fusion=None,
        map=float(aps.mean()),
        topk={k: float(np.mean(v)) for k, v in hitlists.items()},
        n_queries=len(aps),
        per_query_ap=aps,
    )


DEFAULT_RERANK_GRID = tuple(
    (k1, k2, blend)
    for k1 in (10, 20, 30)
    for k2 in (3, 6)
    for blend in (0.3, 0.5, 0.7)
)


def rerank_search(table: ScoreTable, grid=DEFAULT_RERANK_GRID) -> tuple:
    """Grid-search the re-ranking hyperparameters; best by (mAP + top-1)/2."""
    reports = [rerank_metrics(table, k1, k2, blend) for k1, k2, blend in grid]
    best = max(reports, key=lambda r: (r.map + r.topk.get(1, 0.0)) / 2.0)
    return best, reports


@dataclass
class BenchReport:
    repeats: int
    appearance_ms: tuple = (0.0, 0.0)  # mean, std per image pair
    with_head_ms: tuple = (0.0, 0.0)

    @property
    def delta_ms(self) -> float:
        return self.with_head_ms[0] - self.appearance_ms[0]

    def rows(self) -> list:
        if self.repeats == 0:
            return []
        return [
            ("appearance only", f"{self.appearance_ms[0]:.3f}", f"{self.appearance_ms[1]:.3f}"),
            ("with attention head", f"{self.with_head_ms[0]:.3f}", f"{self.with_head_ms[1]:.3f}"),
            ("head overhead", f"{self.delta_ms:.3f}", ""),
        ]


def bench_overhead(dataset, params: AcaeParams, repeats: int,
                   seed: int = 0) -> BenchReport:
    """Wall time per image pair: appearance scoring alone vs with the head.

    Absolute numbers are hardware-relative; only the positive overhead of
    the head is meaningful across machines.
    """
    if repeats == 0:
        return BenchReport(repeats=0)
    rng = np.random.default_rng([seed, _BENCH_SALT])
    n = len(dataset.images)
    cfg = FusionConfig()
    app_times = []
    head_times = []
    for _ in range(repeats):
        i, j = rng.choice(n, size=2, replace=False)
        a, b = dataset.images[int(i)], dataset.images[int(j)]

        t0 = time.perf_counter()
        fa = l2_normalize_rows(a.features)
        fb = l2_normalize_rows(b.features)
        _ = fa @ fb.T
        t1 = time.perf_counter()
        app_times.append(t1 - t0)

        t0 = time.perf_counter()
        fa = l2_normalize_rows(a.features)
        fb = l2_normalize_rows(b.features)
        s_a = fa @ fb.T
        emb_a, emb_b, _ = acae_forward(a, b, params)
        s_c = contextual_similarity(emb_a, emb_b, cfg)
        _ = fuse(s_c, s_a, cfg.lam)
        t1 = time.perf_counter()
        head_times.append(t1 - t0)

    app = np.asarray(app_times) * 1e3
    full = np.asarray(head_times) * 1e3
    return BenchReport(
        repeats=repeats,
        appearance_ms=(float(app.mean()), float(app.std())),
        with_head_ms=(float(full.mean()), float(full.std())),
    )
