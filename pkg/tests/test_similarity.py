import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acae.head import AcaeParams, ContextualEmbeddings, FeatureSet, acae_forward
from acae.linalg import DimensionError, l2_normalize_rows
from acae.similarity import (
    FusionConfig,
    contextual_similarity,
    fuse,
    rescale_factors,
    rescale_gallery,
    score_query,
)

from oracles import oracle_acae_forward


def embeddings_from(*matrices):
    return ContextualEmbeddings(*[np.asarray(m, dtype=float) for m in matrices])


def test_contextual_similarity_identical_unit_vectors():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    ea = embeddings_from(e, e, e)
    s = contextual_similarity(ea, ea, FusionConfig())
    assert np.allclose(np.diag(s), 1.0)


def test_contextual_similarity_orthogonal():
    ea = embeddings_from([[1.0, 0.0]], [[1.0, 0.0]], [[1.0, 0.0]])
    eb = embeddings_from([[0.0, 1.0]], [[0.0, 1.0]], [[0.0, 1.0]])
    s = contextual_similarity(ea, eb, FusionConfig())
    assert np.allclose(s, 0.0)


def test_contextual_similarity_empty_subset_rejected():
    e = embeddings_from([[1.0, 0.0]], [[1.0, 0.0]], [[1.0, 0.0]])
    cfg = FusionConfig(lam=0.0, use_intra=False, use_inter=False, use_final=False)
    with pytest.raises(ValueError):
        contextual_similarity(e, e, cfg)


def test_final_only_matches_oracle_embeddings():
    p = AcaeParams.initialize(4, heads=1, seed=17)
    rng = np.random.default_rng(3)
    a = FeatureSet(0, l2_normalize_rows(rng.standard_normal((2, 4))), [0, 1])
    b = FeatureSet(1, l2_normalize_rows(rng.standard_normal((3, 4))), [0, 1, 2])
    ea, eb, _ = acae_forward(a, b, p)
    cfg = FusionConfig(use_intra=False, use_inter=False, use_final=True)
    s = contextual_similarity(ea, eb, cfg)

    ref = oracle_acae_forward(a.features, b.features, p)
    fa = l2_normalize_rows(ref["a"][2])
    fb = l2_normalize_rows(ref["b"][2])
    assert np.max(np.abs(s - fa @ fb.T)) < 1e-9


def test_three_term_mean():
    ea = embeddings_from([[1.0, 0.0]], [[0.0, 1.0]], [[1.0, 0.0]])
    eb = embeddings_from([[1.0, 0.0]], [[0.0, 1.0]], [[0.0, 1.0]])
    s = contextual_similarity(ea, eb, FusionConfig())
    assert np.allclose(s, (1.0 + 1.0 + 0.0) / 3.0)


def test_fuse_reductions():
    rng = np.random.default_rng(11)
    s_c = rng.standard_normal((3, 4))
    s_a = rng.standard_normal((3, 4))
    assert np.array_equal(fuse(s_c, s_a, 0.0), s_a)
    assert np.array_equal(fuse(s_c, s_a, 1.0), s_c)
    mixed = fuse(s_c, s_a, 0.4)
    assert np.allclose(mixed, 0.4 * s_c + 0.6 * s_a)


def test_fuse_shape_mismatch():
    with pytest.raises(DimensionError):
        fuse(np.ones((2, 2)), np.ones((2, 3)), 0.5)


def test_default_fusion_weight_is_point_four():
    assert FusionConfig().lam == 0.4


@given(
    st.integers(min_value=1, max_value=5),
    st.floats(min_value=0.0, max_value=1.0),
    st.integers(min_value=0, max_value=10_000),
)
@settings(max_examples=100, deadline=None)
def test_fuse_is_affine(n, lam, seed):
    rng = np.random.default_rng(seed)
    s_c, s_a = rng.standard_normal((2, n, n))
    t_c, t_a = rng.standard_normal((2, n, n))
    lhs = fuse(s_c, s_a, lam) + fuse(t_c, t_a, lam)
    rhs = fuse(s_c + t_c, s_a + t_a, lam)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_rescale_singleton_group_unchanged():
    scores = np.array([0.3])
    out = rescale_gallery(scores, [np.array([0])])
    assert np.array_equal(out, scores)


def test_rescale_tied_group_unchanged():
    scores = np.array([0.7, 0.7])
    out = rescale_gallery(scores, [np.array([0, 1])])
    assert np.array_equal(out, scores)


def test_rescale_two_candidate_group_values():
    out = rescale_gallery(np.array([2.0, 1.0]), [np.array([0, 1])])
    # confidences softmax([2,1]) = [0.7311, 0.2689]; factors [1, 1/e]
    assert abs(out[0] - 2.0) < 1e-12
    assert abs(out[1] - math.exp(-1.0)) < 1e-12
    conf = math.exp(2.0) / (math.exp(2.0) + math.exp(1.0))
    assert abs(conf - 0.7310585786300049) < 1e-12


def test_rescale_groups_do_not_interact():
    scores = np.array([2.0, 1.0, 5.0])
    out = rescale_gallery(scores, [np.array([0, 1]), np.array([2])])
    assert out[2] == 5.0
    assert abs(out[1] - math.exp(-1.0)) < 1e-12


def test_rescale_argmax_score_unchanged_and_factors_bounded():
    rng = np.random.default_rng(5)
    for _ in range(50):
        scores = rng.standard_normal(6) + 0.5
        factors = rescale_factors(scores)
        assert np.all(factors > 0.0) and np.all(factors <= 1.0)
        top = np.argmax(scores)
        assert factors[top] == 1.0
        out = rescale_gallery(scores, [np.arange(6)])
        assert out[top] == scores[top]
        if scores.max() >= 0:
            assert np.argmax(out) == top


@given(
    st.lists(st.floats(min_value=-5, max_value=5), min_size=1, max_size=6),
    st.floats(min_value=-10, max_value=10),
)
@settings(max_examples=150, deadline=None)
def test_rescale_factors_shift_invariant(group, c):
    scores = np.array(group)
    assert np.max(np.abs(rescale_factors(scores) - rescale_factors(scores + c))) < 1e-9


def make_pair_scene(seed, d=8):
    rng = np.random.default_rng(seed)
    query = FeatureSet(0, l2_normalize_rows(rng.standard_normal((3, d))), [0, 1, 2])
    gallery = [
        FeatureSet(i + 1,
                   l2_normalize_rows(rng.standard_normal((2 + i % 2, d))),
                   np.arange(2 + i % 2))
        for i in range(3)
    ]
    return query, gallery


def test_score_query_baseline_matches_plain_dot_products():
    query, gallery = make_pair_scene(3)
    cfg = FusionConfig(lam=0.0, rescale=False)
    scored = score_query(query, 1, gallery, None, cfg)
    qf = query.features[1]
    expected = np.concatenate([g.features @ qf for g in gallery])
    assert np.allclose(scored.final_scores(rescale=False), expected, atol=1e-12)
    order = np.argsort(-scored.final_scores(rescale=False), kind="stable")
    assert np.array_equal(order, np.argsort(-expected, kind="stable"))


def test_score_query_overall_flags_reproduce_three_term_mean():
    query, gallery = make_pair_scene(4)
    p = AcaeParams.initialize(8, heads=2, seed=4)
    cfg = FusionConfig(lam=1.0, rescale=False)
    scored = score_query(query, 0, gallery, p, cfg)
    manual = []
    for g in gallery:
        ea, eb, _ = acae_forward(query, g, p)
        manual.append(contextual_similarity(ea, eb, cfg)[0])
    assert np.allclose(scored.fused, np.concatenate(manual), atol=1e-12)


def test_score_query_matches_composed_oracle_pipeline():
    query, gallery = make_pair_scene(5)
    p = AcaeParams.initialize(8, heads=1, seed=5)
    cfg = FusionConfig(lam=0.4, rescale=True)
    scored = score_query(query, 2, gallery, p, cfg)

    expected = []
    qf = query.features[2]
    for g in gallery:
        ref = oracle_acae_forward(query.features, g.features, p)
        s_a = g.features @ qf
        s_c = np.zeros(g.n)
        for (qa, ga) in zip(ref["a"], ref["b"]):
            qa = l2_normalize_rows(np.asarray(qa))
            ga = l2_normalize_rows(np.asarray(ga))
            s_c += (qa[2] @ ga.T)
        s_c /= 3.0
        fused = 0.4 * s_c + 0.6 * s_a
        conf = np.exp(fused - fused.max())
        conf = conf / conf.sum()
        expected.append((conf / conf.max()) * fused)
    assert np.max(np.abs(scored.rescaled - np.concatenate(expected))) < 1e-8


def test_score_query_requires_params_for_context():
    query, gallery = make_pair_scene(6)
    with pytest.raises(ValueError):
        score_query(query, 0, gallery, None, FusionConfig(lam=0.4))


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(lam=1.5)
    with pytest.raises(ValueError):
        FusionConfig(lam=0.4, use_intra=False, use_inter=False, use_final=False)
    FusionConfig(lam=0.0, use_intra=False, use_inter=False, use_final=False)
