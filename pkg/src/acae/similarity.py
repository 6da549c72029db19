"""Turning embedding triplets into retrieval scores.

Contextual similarity averages the dot products of the enabled embedding
stages (intra, inter, final) for a node pair; it is blended with the plain
appearance similarity by a weight ``lam`` and, optionally, rescaled within
each gallery image so that at most one candidate per image keeps its full
score. Rows are L2-normalised before any dot product by default, making
every score a cosine in [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .head import FeatureSet, AcaeParams, ContextualEmbeddings, acae_forward
from .linalg import DimensionError, l2_normalize_rows, softmax_rows


@dataclass(frozen=True)
class FusionConfig:
    """Weighting and feature-subset choices for scored retrieval."""

    lam: float = 0.4
    use_intra: bool = True
    use_inter: bool = True
    use_final: bool = True
    rescale: bool = True
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("fusion weight must lie in [0, 1]")
        if self.lam > 0 and not (self.use_intra or self.use_inter or self.use_final):
            raise ValueError("at least one feature subset must be enabled")

    def enabled_stages(self) -> tuple:
        return tuple(name for name, on in (
            ("intra", self.use_intra),
            ("inter", self.use_inter),
            ("final", self.use_final),
        ) if on)


def contextual_similarity(ea: ContextualEmbeddings, eb: ContextualEmbeddings,
                          cfg: FusionConfig) -> np.ndarray:
    """(n, m) matrix: mean dot product over the enabled embedding stages."""
    stages = cfg.enabled_stages()
    if not stages:
        raise ValueError("cannot compute contextual similarity with no stages enabled")
    total = None
    for stage in stages:
        left = getattr(ea, stage)
        right = getattr(eb, stage)
        if left.shape[1] != right.shape[1]:
            raise DimensionError("embedding widths differ between the two images")
        if cfg.normalize:
            left = l2_normalize_rows(left)
            right = l2_normalize_rows(right)
        term = left @ right.T
        total = term if total is None else total + term
    return total / len(stages)


def fuse(s_context: np.ndarray, s_appearance: np.ndarray, lam: float) -> np.ndarray:
    """Convex blend lam * context + (1 - lam) * appearance."""
    s_context = np.asarray(s_context, dtype=np.float64)
    s_appearance = np.asarray(s_appearance, dtype=np.float64)
    if s_context.shape != s_appearance.shape:
        raise DimensionError(
            f"score shapes differ: {s_context.shape} vs {s_appearance.shape}"
        )
    if not 0.0 <= lam <= 1.0:
        raise ValueError("fusion weight must lie in [0, 1]")
    return lam * s_context + (1.0 - lam) * s_appearance


def rescale_factors(scores: np.ndarray) -> np.ndarray:
    """Softmax-over-the-group confidences divided by the group maximum.

    Factors lie in (0, 1] and equal 1 for the argmax candidate; they are
    invariant to shifting every score in the group by a constant.
    """
    scores = np.asarray(scores, dtype=np.float64)
    conf = softmax_rows(scores[None, :])[0]
    return conf / conf.max()


def rescale_gallery(scores: np.ndarray, groups) -> np.ndarray:
    """Rescale candidate scores within each gallery image independently.

    ``groups`` is an iterable of index arrays partitioning ``scores`` by the
    gallery image the candidate came from; empty groups are skipped.
    Candidates in different images never interact. Note that when every
    score in a group is negative the shrink-toward-zero can lift a very
    negative score above a mildly negative one; with normalised features
    the group maximum is positive in practice and the argmax is preserved.
    """
    scores = np.asarray(scores, dtype=np.float64)
    out = scores.copy()
    for group in groups:
        idx = np.asarray(group, dtype=np.int64)
        if idx.size == 0:
            continue
        out[idx] = rescale_factors(scores[idx]) * scores[idx]
    return out


@dataclass
class ScoredGallery:
    """Per-candidate score components for one query against one gallery.

    Candidates are the concatenated person rows of the gallery images;
    ``group_slices[g] = (start, stop)`` delimits image g's rows. The raw
    appearance and contextual components are kept so ablations can re-blend
    without re-running the head.
    """

    gallery_image_ids: list
    group_slices: list
    appearance: np.ndarray
    context_intra: np.ndarray
    context_inter: np.ndarray
    context_final: np.ndarray
    fused: np.ndarray
    rescaled: np.ndarray

    def groups(self) -> list:
        return [np.arange(start, stop) for start, stop in self.group_slices]

    def final_scores(self, rescale: bool) -> np.ndarray:
        return self.rescaled if rescale else self.fused

    def context_mean(self, cfg: FusionConfig) -> np.ndarray:
        stages = cfg.enabled_stages()
        if not stages:
            raise ValueError("no feature subset enabled")
        parts = [getattr(self, f"context_{s}") for s in stages]
        return sum(parts) / len(parts)

    def reblend(self, cfg: FusionConfig) -> np.ndarray:
        """Final scores under a different fusion config (same components)."""
        scores = fuse(self.context_mean(cfg), self.appearance, cfg.lam) \
            if cfg.lam > 0 else self.appearance.copy()
        if cfg.rescale:
            scores = rescale_gallery(scores, self.groups())
        return scores


def score_query(query: FeatureSet, query_row: int, gallery: list,
                params: AcaeParams | None, cfg: FusionConfig) -> ScoredGallery:
    """Score one query person against every candidate of a gallery.

    The query image is paired with each gallery image independently through
    the head, so the query's contextual embedding adapts to each candidate
    image. ``params`` may be None when ``cfg.lam == 0`` (appearance-only
    scoring; contextual components come back as zeros).
    """
    if not 0 <= query_row < query.n:
        raise IndexError(f"query row {query_row} out of range for {query.n} persons")
    if params is None and cfg.lam > 0:
        raise ValueError("contextual fusion requested but no head parameters given")

    qfeat = query.features[query_row:query_row + 1]
    if cfg.normalize:
        qfeat = l2_normalize_rows(qfeat)

    slices, ids = [], []
    appearance, c_intra, c_inter, c_final = [], [], [], []
    offset = 0
    for gal in gallery:
        ids.append(gal.image_id)
        slices.append((offset, offset + gal.n))
        offset += gal.n
        gal_feats = l2_normalize_rows(gal.features) if cfg.normalize else gal.features
        appearance.append((qfeat @ gal_feats.T)[0])
        if params is not None:
            emb_q, emb_g, _ = acae_forward(query, gal, params)
            row_cfg = replace(cfg, use_intra=True, use_inter=True, use_final=True)
            for name, store in (("intra", c_intra), ("inter", c_inter),
                                ("final", c_final)):
                only = replace(row_cfg, use_intra=name == "intra",
                               use_inter=name == "inter",
                               use_final=name == "final")
                store.append(contextual_similarity(emb_q, emb_g, only)[query_row])
        else:
            for store in (c_intra, c_inter, c_final):
                store.append(np.zeros(gal.n))

    def cat(parts):
        return np.concatenate(parts) if parts else np.zeros(0)

    sg = ScoredGallery(
        gallery_image_ids=ids,
        group_slices=slices,
        appearance=cat(appearance),
        context_intra=cat(c_intra),
        context_inter=cat(c_inter),
        context_final=cat(c_final),
        fused=np.zeros(offset),
        rescaled=np.zeros(offset),
    )
    sg.fused = fuse(sg.context_mean(cfg), sg.appearance, cfg.lam) \
        if cfg.lam > 0 else sg.appearance.copy()
    sg.rescaled = rescale_gallery(sg.fused, sg.groups()) if cfg.rescale else sg.fused.copy()
    return sg
