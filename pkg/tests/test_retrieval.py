import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from san.dataset import SplitSpec, SynthConfig, make_split, synth_generate
from san.errors import ConfigError, ModeError, PrerequisiteError, ShapeError, StateError
from san.models import build_siamese, build_stage1, build_stage2
from san.retrieval import (Pipeline, ProjectedGallery, average_precision_at_k, embed_gallery,
                           embed_queries, embed_query, embedding_dump, evaluate,
                           precision_at_k, rank, variant_name)
from san.training import StageCheckpoint, StageConfig


def _ckpts(dim=8, seed=0):
    s1 = StageCheckpoint(1, dim, StageConfig.defaults(1, seed), build_stage1(dim, seed=seed).named(), 0)
    s2 = StageCheckpoint(2, dim, StageConfig.defaults(2, seed), build_stage2(dim, seed=seed).named(), 0)
    s3 = StageCheckpoint(3, dim, StageConfig.defaults(3, seed), build_siamese(dim, seed=seed).named(), 0)
    return s1, s2, s3


@pytest.fixture(scope="module")
def small():
    store = synth_generate(SynthConfig(classes=6, per_class_sketches=4, per_class_images=6,
                                       feature_dim=8, seed=3))
    split = make_split(store, SplitSpec(range(4), range(4, 6)))
    return store, split, _ckpts(8)


def test_rank_ties_by_id():
    g = ProjectedGallery(np.array([30, 10, 20, 5], dtype=np.uint64), np.zeros(4),
                         np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [3.0, 0.0]]))
    np.testing.assert_array_equal(rank(np.zeros(2), g), [10, 20, 30, 5])


def test_rank_isometry_invariant():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(30, 2))
    g = ProjectedGallery(np.arange(1, 31, dtype=np.uint64), np.zeros(30), emb)
    q = rng.normal(size=2)
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shift = np.array([3.0, -2.0])
    moved = ProjectedGallery(g.ids, g.labels, emb @ rot.T + shift)
    np.testing.assert_array_equal(rank(q, g), rank(rot @ q + shift, moved))


def test_precision_and_ap_hand_values():
    # relevant at ranks 1, 3, 5 of 6; R = 3
    ranked = [1, 0, 1, 0, 1, 0]
    assert precision_at_k(ranked, 1, 4) == 0.5
    assert average_precision_at_k(ranked, 1, 6) == pytest.approx((1 + 2 / 3 + 3 / 5) / 3)
    # relevant at ranks 1 and 3 -> (1 + 2/3) / 2 = 5/6
    assert average_precision_at_k([7, 2, 7, 2], 7, 4) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision_at_k([7, 7, 7], 7, 3) == 1.0
    assert average_precision_at_k([2, 2, 2], 7, 3) == 0.0


def test_ap_denominator_variants():
    ranked = [1] * 10 + [0] * 5
    assert average_precision_at_k(ranked, 1, 5) == 1.0
    assert average_precision_at_k(ranked, 1, 5, min_denominator=False) == 0.5


def test_k_larger_than_gallery():
    assert precision_at_k([1, 0, 1], 1, 200) == pytest.approx(2 / 3)
    with pytest.raises(ConfigError):
        precision_at_k([1], 1, 0)
    with pytest.raises(ShapeError):
        precision_at_k([], 1, 3)


def _brute_precision(labels, q, k):
    top = list(labels)[:k]
    return sum(1 for x in top if x == q) / len(top)


def _brute_ap(labels, q, k, total_relevant):
    hits, acc = 0, 0.0
    for r, lab in enumerate(list(labels)[:k], start=1):
        if lab == q:
            hits += 1
            acc += hits / r
    denom = min(total_relevant, k)
    return acc / denom if denom else 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=50), st.integers(0, 4),
       st.integers(1, 20))
def test_metrics_match_brute_force(labels, q, k):
    arr = np.array(labels)
    assert precision_at_k(arr, q, k) == _brute_precision(labels, q, k)
    assert average_precision_at_k(arr, q, k) == pytest.approx(
        _brute_ap(labels, q, k, labels.count(q)), rel=0, abs=1e-15)


def test_pipeline_validation(small):
    s1, s2, s3 = small[2]
    with pytest.raises(PrerequisiteError):
        Pipeline(None)
    with pytest.raises(StateError):
        Pipeline(s2)
    with pytest.raises(ConfigError):
        Pipeline(s1, None, s3)
    assert Pipeline(s1).name == "G1"
    assert Pipeline(s1, s2, s3).name == "G1+G2+MMD+P"
    assert variant_name(True, False, False) == "G1+G2"


def test_embed_shapes(small):
    store, split, (s1, s2, s3) = small
    full = Pipeline(s1, s2, s3)
    g = embed_gallery(full, store.vectors_of(split.test_gallery_images),
                      split.test_gallery_images, store.labels_of(split.test_gallery_images))
    assert g.embeddings.shape == (12, 2)
    q = embed_query(full, store.vectors_of(split.test_query_sketches[:1]), n_z=3, seed=1)
    assert q.vector.shape == (2,) and q.n_noise == 3
    raw = embed_queries(Pipeline(s1), store.vectors_of(split.test_query_sketches), seed=1)
    assert raw.shape == (8, 8)
    with pytest.raises(ShapeError):
        embed_gallery(full, np.zeros((0, 8)), [], [])
    with pytest.raises(ConfigError):
        embed_queries(full, np.zeros((1, 8)), n_z=0)


def test_noise_averaging_reduces_variance(small):
    store, split, (s1, s2, s3) = small
    pipe = Pipeline(s1, s2)
    c = store.vectors_of(split.test_query_sketches[:1])
    single = np.stack([embed_queries(pipe, c, 1, seed=s)[0] for s in range(60)])
    averaged = np.stack([embed_queries(pipe, c, 16, seed=s)[0] for s in range(60)])
    assert averaged.var(axis=0).sum() < single.var(axis=0).sum()


def test_evaluate_report(small):
    store, split, (s1, s2, s3) = small
    report = evaluate(Pipeline(s1, s2, s3), split, store, k=5, seed=2)
    assert report.query_count == 8 and report.gallery_size == 12
    assert set(report.per_class) == {4, 5}
    text = report.to_text()
    assert "precision@5: " in text and "map@5: " in text
    assert report.to_tsv().splitlines()[0] == "scope\tlabel\tqueries\tprecision@5\tmap@5"
    again = evaluate(Pipeline(s1, s2, s3), split, store, k=5, seed=2)
    assert again.to_text() == text
    with pytest.raises(ModeError):
        evaluate(Pipeline(s1), split, store, mode="gzsl")


def test_permutation_null_near_chance():
    store = synth_generate(SynthConfig(classes=10, per_class_sketches=10, per_class_images=20,
                                       feature_dim=8, seed=0))
    split = make_split(store, SplitSpec(range(5), range(5, 10)))
    s1 = _ckpts(8)[0]
    values = [evaluate(Pipeline(s1), split, store, k=20, seed=s,
                       shuffle_gallery_labels=True).mean_precision for s in range(5)]
    assert abs(np.mean(values) - 0.2) < 0.05


def test_embedding_dump(small):
    store, split, (s1, s2, s3) = small
    lines = embedding_dump(Pipeline(s1, s2, s3), split, store).splitlines()
    assert lines[0] == "kind\tid\tlabel\te0\te1"
    assert len(lines) == 1 + 8 + 12
