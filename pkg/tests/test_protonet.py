import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare, special_ortho_group

from fewshot_dpi.encoder import EmbeddingMatrix
from fewshot_dpi.protonet import (
    Episode,
    FewShotProtocol,
    InsufficientSamplesError,
    ProtoHead,
    Prototypes,
    aggregate_reports,
    classify_queries,
    classify_query,
    compute_prototypes,
    confusion_matrix,
    episode_distances,
    episode_loss,
    episode_loss_terms,
    evaluate,
    metrics_from_confusion,
    sample_episode,
    split_per_class,
    squared_distances,
    train_fewshot,
)
from fewshot_dpi.synthetic import gaussian_clusters, nearest_centroid_accuracy

from oracles import neg_log_softmax_of_neg_distance


def pool(counts, dim=4, seed=0):
    r = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    return EmbeddingMatrix(r.normal(size=(len(labels), dim)), labels, [f"c{i}" for i in range(len(counts))])


def random_episode(way, shot, query, dim, seed):
    r = np.random.default_rng(seed)
    return Episode(list(range(way)), r.normal(size=(way, shot, dim)), r.normal(size=(way, query, dim)),
                   np.zeros((way, shot), int), np.zeros((way, query), int))


# -- sampling ----------------------------------------------------------------


def test_exact_population_uses_every_row():
    emb = pool([7, 7, 7])
    ep = sample_episode(emb, 3, 5, 2, np.random.default_rng(0))
    for k in range(3):
        used = set(ep.support_index[k]) | set(ep.query_index[k])
        assert used == set(np.flatnonzero(emb.labels == ep.classes[k]))
        assert not set(ep.support_index[k]) & set(ep.query_index[k])
    assert ep.support.shape == (3, 5, 4) and ep.query.shape == (3, 2, 4)
    np.testing.assert_array_equal(ep.support, emb.rows[ep.support_index])


def test_same_rng_state_same_episode():
    emb = pool([20, 20, 20, 20])
    a = sample_episode(emb, 3, 5, 5, np.random.default_rng(42))
    b = sample_episode(emb, 3, 5, 5, np.random.default_rng(42))
    assert a.classes == b.classes
    np.testing.assert_array_equal(a.support_index, b.support_index)
    np.testing.assert_array_equal(a.query_index, b.query_index)


def test_insufficient_class_named():
    emb = pool([10, 6, 10])
    with pytest.raises(InsufficientSamplesError, match=r"c1.*10"):
        sample_episode(emb, 3, 5, 5, np.random.default_rng(0))
    with pytest.raises(InsufficientSamplesError):
        sample_episode(pool([10, 10]), 3, 1, 1, np.random.default_rng(0))


def test_sampler_uniformity_chi_square():
    emb = pool([12, 12, 12, 12, 12])
    rng = np.random.default_rng(2024)
    class_hits = np.zeros(5)
    row_hits = np.zeros(len(emb))
    n = 10_000
    for _ in range(n):
        ep = sample_episode(emb, 3, 2, 2, rng)
        class_hits[ep.classes] += 1
        row_hits[ep.support_index.ravel()] += 1
        row_hits[ep.query_index.ravel()] += 1
    expected = n * 3 / 5
    sigma = math.sqrt(n * (3 / 5) * (2 / 5))
    assert np.abs(class_hits - expected).max() < 3 * sigma
    assert chisquare(class_hits).pvalue > 0.01
    # within a class every row is drawn with probability 4/12 when the class is chosen
    for c in range(5):
        hits = row_hits[emb.labels == c]
        assert chisquare(hits).pvalue > 0.01
        assert hits.sum() == class_hits[c] * 4


# -- prototypes ----------------------------------------------------------------


def test_single_support_prototype_is_projection():
    head = ProtoHead(4, 3, seed=1)
    ep = random_episode(2, 1, 1, 4, 0)
    protos = compute_prototypes(ep, head)
    np.testing.assert_allclose(protos.vectors, head.project(ep.support[:, 0]), atol=1e-12)


def test_identity_mean_example():
    ep = Episode([0], np.array([[[0.0, 0.0], [2.0, 2.0]]]), np.zeros((1, 1, 2)), np.zeros((1, 2), int),
                 np.zeros((1, 1), int))
    protos = compute_prototypes(ep, ProtoHead.identity(2))
    assert protos.vectors.tolist() == [[1.0, 1.0]]


def test_prototypes_match_scripted_mean_and_permutation_invariance():
    head = ProtoHead(6, 4, seed=3)
    ep = random_episode(3, 5, 2, 6, 7)
    protos = compute_prototypes(ep, head)
    scripted = np.stack([np.mean([ep.support[k, i] @ head.weight.data + head.bias.data for i in range(5)], axis=0)
                         for k in range(3)])
    np.testing.assert_allclose(protos.vectors, scripted, atol=1e-6)
    perm = np.random.default_rng(0).permutation(5)
    shuffled = Episode(ep.classes, ep.support[:, perm], ep.query, ep.support_index, ep.query_index)
    np.testing.assert_allclose(compute_prototypes(shuffled, head).vectors, protos.vectors, atol=1e-12)


def test_n_classes_normalisation_option():
    ep = random_episode(3, 5, 2, 4, 1)
    head = ProtoHead.identity(4)
    mean = compute_prototypes(ep, head, "mean").vectors
    alt = compute_prototypes(ep, head, "n_classes").vectors
    np.testing.assert_allclose(alt, mean * 5 / 3, atol=1e-12)


# -- classification ------------------------------------------------------------


def test_query_on_prototype_and_tie_rule():
    head = ProtoHead.identity(2)
    protos = Prototypes(np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]]), [0, 1, 2])
    cls, d = classify_query(np.array([2.0, 0.0]), protos, head)
    assert cls == 1 and d[1] == 0.0
    cls, _ = classify_query(np.array([1.0, 0.0]), protos, head)  # equidistant from 0 and 1
    assert cls == 0


def test_brute_force_scan_agreement():
    r = np.random.default_rng(5)
    head = ProtoHead(8, 5, seed=2)
    protos = Prototypes(r.normal(size=(4, 5)), [0, 1, 2, 3])
    queries = r.normal(size=(200, 8))
    preds, _ = classify_queries(queries, protos, head)
    for q, p in zip(queries, preds):
        z = head.project(q)
        dists = [sum((z[j] - c[j]) ** 2 for j in range(5)) for c in protos.vectors]
        assert p == min(range(4), key=lambda k: (dists[k], k))
        assert classify_query(q, protos, head)[0] == p


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_isometry_invariance(seed):
    r = np.random.default_rng(seed)
    head = ProtoHead.identity(5)
    centres = r.normal(size=(3, 5)) * 3
    queries = r.normal(size=(20, 5)) * 3
    rot = special_ortho_group.rvs(5, random_state=r.integers(2**31))
    shift = r.normal(size=5) * 10
    before, _ = classify_queries(queries, Prototypes(centres, [0, 1, 2]), head)
    after, _ = classify_queries(queries @ rot + shift, Prototypes(centres @ rot + shift, [0, 1, 2]), head)
    d = squared_distances(queries, centres)
    gaps = np.sort(d, axis=1)
    clear = gaps[:, 1] - gaps[:, 0] > 1e-6  # skip numerically tied queries
    np.testing.assert_array_equal(before[clear], after[clear])


# -- loss ----------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_loss_term_is_neg_log_softmax(way, shot, query, seed):
    ep = random_episode(way, shot, query, 6, seed)
    head = ProtoHead(6, 4, seed=seed % 1000)
    d = episode_distances(ep, head).data
    terms = episode_loss_terms(ep, head).data
    want = neg_log_softmax_of_neg_distance(d, ep.query_targets())
    assert np.abs(terms - want).max() < 1e-9
    total = episode_loss(ep, head).item()
    assert total == pytest.approx(want.sum() / (way * query), abs=1e-9)


def test_equal_distances_give_ln_k():
    way, query = 4, 3
    support = np.zeros((way, 2, 3))
    ep = Episode(list(range(way)), support, np.zeros((way, query, 3)), np.zeros((way, 2), int),
                 np.zeros((way, query), int))
    head = ProtoHead.identity(3)
    terms = episode_loss_terms(ep, head).data
    assert np.abs(terms - math.log(way)).max() < 1e-9
    assert episode_loss(ep, head).item() == pytest.approx(math.log(way), abs=1e-12)


def test_far_prototypes_loss_vanishes():
    way = 3
    centres = np.eye(3) * 1e3
    ep = Episode([0, 1, 2], centres[:, None, :].repeat(2, axis=1), centres[:, None, :].repeat(2, axis=1),
                 np.zeros((3, 2), int), np.zeros((3, 2), int))
    assert episode_loss(ep, ProtoHead.identity(3)).item() < 1e-12


def test_distance_matrix_matches_projected_scan():
    ep = random_episode(3, 4, 2, 5, 11)
    head = ProtoHead(5, 3, seed=0)
    protos = compute_prototypes(ep, head)
    want = squared_distances(head.project(ep.query.reshape(-1, 5)), protos.vectors)
    np.testing.assert_allclose(episode_distances(ep, head).data, want, atol=1e-10)


# -- training and evaluation ---------------------------------------------------


def test_gaussian_clusters_fixture_is_separable():
    emb = gaussian_clusters(100, seed=1)
    centres = np.array([emb.rows[emb.labels == c].mean(axis=0) for c in range(3)])
    d = np.sqrt(squared_distances(centres, centres))
    assert np.allclose(d[np.triu_indices(3, 1)], 10.0, atol=0.5)
    train = np.arange(len(emb)) % 2 == 0
    assert nearest_centroid_accuracy(emb.rows[train], emb.labels[train], emb.rows[~train], emb.labels[~train]) >= 0.99


def test_train_on_gaussian_clusters():
    train = gaussian_clusters(60, seed=1)
    test = gaussian_clusters(60, seed=2)
    protocol = FewShotProtocol(epochs=5, episodes_per_epoch=40, eval_episodes=200, d_proj=16)
    head, curve = train_fewshot(train, protocol, seed=0)
    assert curve[-1] < curve[0]
    report = evaluate(test, head, protocol, seed=3)
    assert report.accuracy >= 0.99


def test_zero_episodes_leave_head_unchanged():
    emb = gaussian_clusters(20, seed=0)
    head = ProtoHead(16, 8, seed=0)
    before = head.weight.data.copy()
    out, curve = train_fewshot(emb, FewShotProtocol(epochs=3, episodes_per_epoch=0, d_proj=8), seed=0, head=head)
    np.testing.assert_array_equal(out.weight.data, before)
    assert curve == []


def test_train_deterministic():
    emb = gaussian_clusters(20, seed=0)
    protocol = FewShotProtocol(epochs=2, episodes_per_epoch=10, d_proj=8)
    a, ca = train_fewshot(emb, protocol, seed=5)
    b, cb = train_fewshot(emb, protocol, seed=5)
    assert ca == cb
    np.testing.assert_array_equal(a.weight.data, b.weight.data)


def test_evaluate_same_seed_same_report_and_fixed_support():
    emb = gaussian_clusters(30, seed=0)
    head = ProtoHead(16, 8, seed=0)
    protocol = FewShotProtocol(eval_episodes=20, d_proj=8)
    assert evaluate(emb, head, protocol, seed=1).to_json() == evaluate(emb, head, protocol, seed=1).to_json()
    fixed = FewShotProtocol(eval_episodes=20, d_proj=8, resample_support=False)
    report = evaluate(emb, head, fixed, seed=1)
    assert report.episodes == 20 and sum(map(sum, report.confusion)) == 20 * 15


# -- metrics -------------------------------------------------------------------


def test_confusion_example():
    report = metrics_from_confusion([[2, 1], [0, 3]], ["a", "b"])
    assert report.accuracy == pytest.approx(5 / 6)
    assert report.f1_per_class["a"] == pytest.approx(0.8)
    assert report.f1_per_class["b"] == pytest.approx(6 / 7)
    assert report.f1_per_class["b"] == pytest.approx(0.857, abs=5e-4)
    assert report.f1_macro == pytest.approx(0.829, abs=5e-4)


def test_perfect_predictions():
    report = metrics_from_confusion(confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3))
    assert report.accuracy == 1.0 and report.f1_macro == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_metrics_agree_with_direct_tallies(pairs):
    y_true, y_pred = map(np.array, zip(*pairs))
    report = metrics_from_confusion(confusion_matrix(y_true, y_pred, 4))
    assert report.accuracy == pytest.approx(float((y_true == y_pred).mean()))
    cm = np.asarray(report.confusion)
    assert report.accuracy == pytest.approx(np.trace(cm) / cm.sum())
    for k in range(4):
        tp = int(((y_true == k) & (y_pred == k)).sum())
        fp = int(((y_true != k) & (y_pred == k)).sum())
        fn = int(((y_true == k) & (y_pred != k)).sum())
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        assert report.f1_per_class[str(k)] == pytest.approx(f1)
        assert 0.0 <= report.f1_per_class[str(k)] <= 1.0


def test_report_json_schema():
    report = metrics_from_confusion([[1, 0], [0, 1]], ["x", "y"], seed=3, config_hash="abc", protocol={"way": 2})
    doc = json.loads(report.to_json())
    for key in ("accuracy", "f1_macro", "f1_per_class", "confusion", "protocol", "seed", "config_hash", "iterations"):
        assert key in doc


def test_aggregate_mean_and_sample_std():
    reports = [metrics_from_confusion([[a, 4 - a], [0, 4]], ["x", "y"]) for a in (4, 3, 2)]
    agg = aggregate_reports(reports)
    accs = [r.accuracy for r in reports]
    assert agg.accuracy == pytest.approx(np.mean(accs))
    assert agg.accuracy_std == pytest.approx(np.std(accs, ddof=1))
    assert agg.confusion == [[9, 3], [0, 12]]
    assert len(agg.iterations) == 3


def test_split_per_class_is_stratified_and_disjoint():
    labels = np.repeat([0, 1, 2], 10)
    train, test = split_per_class(labels, 0.5, np.random.default_rng(0))
    assert not set(train) & set(test)
    assert np.bincount(labels[train]).tolist() == [5, 5, 5]
