import math

import numpy as np
import pytest

from basinscope.errors import LandscapeError, TotalDegeneracyError
from basinscope.services import landscape
from basinscope.services.landscape import ExplanationMatrix
from basinscope.services.oracles import exhaustive_kmeans_inertia


def _matrix(rows, split_seed=0):
    rows = np.asarray(rows, dtype=np.float64)
    return ExplanationMatrix(E=rows, run_ids=np.arange(rows.shape[0]), split_seed=split_seed)


def test_explanation_matrix_invariants():
    with pytest.raises(LandscapeError):
        ExplanationMatrix(E=[[1.0], [2.0]], run_ids=[1, 0], split_seed=0)
    with pytest.raises(LandscapeError):
        _matrix([[1.0], [-0.5]])
    assert _matrix([[1.0, 2.0], [3.0, 4.0]]).R == 2


def test_normalize_three_four_five():
    n = landscape.normalize(_matrix([[8.0, 9.0], [2.0, 1.0]]))
    assert np.allclose(n.mu, [5.0, 5.0])
    assert np.allclose(n.Ehat[0], [0.6, 0.8])
    # two centred points are antipodal
    assert np.allclose(n.Ehat[1], -n.Ehat[0])
    assert n.dropped_rows == ()


def test_normalize_unit_rows_and_drops():
    rng = np.random.default_rng(0)
    E = np.abs(rng.normal(size=(20, 4)))
    n = landscape.normalize(_matrix(E))
    assert np.allclose(np.linalg.norm(n.Ehat, axis=1), 1.0, atol=1e-10)

    E = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    n = landscape.normalize(_matrix(E))
    assert n.dropped_rows == (1,)
    assert n.run_ids.tolist() == [0, 2]


def test_normalize_total_degeneracy():
    with pytest.raises(TotalDegeneracyError):
        landscape.normalize(_matrix(np.ones((5, 3))))


def test_detect_degenerate():
    base = np.array([0.3, 0.1, 0.7])
    control = base + 1e-12 * np.random.default_rng(1).random((50, 3))
    assert landscape.detect_degenerate(control)
    assert landscape.detect_degenerate(np.zeros((4, 3)))
    assert not landscape.detect_degenerate(np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_kmeans_one_dimensional_example():
    X = np.array([[0.0], [0.1], [10.0], [10.1]])
    res = landscape.kmeans(X, 2, seed=0)
    assert res.labels.tolist() == [0, 0, 1, 1]
    assert np.allclose(res.centroids[:, 0], [0.05, 10.05])
    assert res.inertia == pytest.approx(exhaustive_kmeans_inertia(X, 2))


def test_kmeans_k_equals_n():
    X = np.array([[0.0, 1.0], [2.0, 0.0], [5.0, 5.0]])
    assert landscape.kmeans(X, 3, seed=1).inertia == 0.0


def test_kmeans_duplicated_points_keep_centroids():
    X = np.array([[0.0], [0.1], [10.0], [10.1]])
    dup = np.vstack([X, X])
    assert np.allclose(landscape.kmeans(dup, 2, seed=3).centroids, landscape.kmeans(X, 2, seed=3).centroids)


def test_kmeans_is_deterministic():
    X = np.random.default_rng(2).normal(size=(40, 3))
    a = landscape.kmeans(X, 4, seed=7)
    b = landscape.kmeans(X, 4, seed=7)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.centroids, b.centroids)


def test_kmeans_rejects_bad_k():
    with pytest.raises(LandscapeError):
        landscape.kmeans(np.zeros((3, 2)), 4, seed=0)


def test_canonical_labels_by_size_then_first_member():
    labels, order = landscape.canonicalize_labels(np.array([2, 0, 0, 1, 1, 1, 2]))
    assert labels.tolist() == [1, 2, 2, 0, 0, 0, 1]
    assert order.tolist() == [1, 2, 0]
    labels, _ = landscape.canonicalize_labels(np.array([5, 3, 5, 3]))
    assert labels.tolist() == [0, 1, 0, 1]


def test_silhouette_hand_example():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    s = landscape.silhouette(X, [0, 0, 1, 1])
    b = (10.0 + math.sqrt(101.0)) / 2
    assert s == pytest.approx(1.0 - 1.0 / b)
    assert s == pytest.approx(0.9002, abs=1e-4)


def test_silhouette_coincident_and_separated_clusters():
    pts = np.random.default_rng(3).normal(size=(100, 2))
    coincident = np.vstack([pts, pts])
    labels = np.repeat([0, 1], 100)
    assert landscape.silhouette(coincident, labels) == pytest.approx(0.0, abs=0.02)

    separated = np.array([[0.0], [0.0], [5.0], [5.0]])
    assert landscape.silhouette(separated, [0, 0, 1, 1]) == 1.0


def test_silhouette_singleton_scores_zero_and_single_cluster_errors():
    X = np.array([[0.0], [0.2], [9.0]])
    s = landscape.silhouette_samples(X, [0, 0, 1])
    assert s[2] == 0.0
    with pytest.raises(LandscapeError):
        landscape.silhouette(X, [0, 0, 0])


def test_entropy_examples():
    assert landscape.mechanistic_entropy([0.5, 0.5]) == 1.0
    assert landscape.mechanistic_entropy([0.866, 0.134]) == pytest.approx(0.568, abs=1e-3)
    assert landscape.mechanistic_entropy([0.556, 0.444]) == pytest.approx(0.991, abs=1e-3)
    assert landscape.mechanistic_entropy([1.0]) == 0.0
    assert landscape.mechanistic_entropy([1.0, 0.0, 0.0]) == 0.0
    with pytest.raises(LandscapeError):
        landscape.mechanistic_entropy([0.7, 0.7])


def test_select_k_finds_three_blobs():
    rng = np.random.default_rng(4)
    centers = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
    X = np.vstack([c + 0.01 * rng.normal(size=(50, 2)) for c in centers])
    report = landscape.select_k(X, seed=0, k_range=range(2, 7))
    assert report.k_star == 3
    assert set(report.silhouette_by_k) == {2, 3, 4, 5, 6}
    assert report.silhouette == max(report.silhouette_by_k.values())
    assert report.sizes.tolist() == [50, 50, 50]
    assert report.entropy_norm == pytest.approx(1.0)
    assert report.supports.sum() == pytest.approx(1.0)


def test_select_k_degenerate_short_circuit():
    report = landscape.select_k(np.zeros((10, 3)), seed=0, degenerate=True)
    assert report.k_star == 1
    assert report.silhouette_by_k == {}
    assert report.silhouette is None
    assert report.entropy_norm == 0.0
    assert report.degenerate


def test_select_k_caps_candidates_by_row_count():
    X = np.array([[0.0], [0.1], [5.0]])
    report = landscape.select_k(X, seed=0)
    assert set(report.silhouette_by_k) == {2}
    with pytest.raises(LandscapeError):
        landscape.select_k(np.array([[0.0], [1.0]]), seed=0)


def test_centroid_profiles():
    Ehat = np.array([[1.0, 0.0], [0.0, 1.0]])
    raw = np.array([[3.0, 1.0], [2.0, 2.0]])
    profiles = landscape.centroid_profiles(Ehat, [0, 1], raw, ['a', 'b'], top_m=2)
    assert np.array_equal(profiles[0].centroid, Ehat[0])
    assert np.array_equal(profiles[1].centroid, Ehat[1])
    assert profiles[0].top_features == [('a', 3.0), ('b', 1.0)]
    # ties resolve by feature index
    assert profiles[1].top_features == [('a', 2.0), ('b', 2.0)]

    single = landscape.centroid_profiles(Ehat, [0, 0], raw, top_m=1)
    assert len(single) == 1
    assert np.allclose(single[0].centroid, Ehat.mean(axis=0))
    assert single[0].top_features == [('f0', 2.5)]


def test_pca_collinear_and_centred_mean():
    t = np.linspace(-1, 1, 7)
    emb = landscape.pca_embed(np.column_stack([t, 2 * t]))
    assert np.allclose(emb.explained_variance_ratio, [1.0, 0.0])

    sym = np.array([[1.0, 2.0], [-1.0, -2.0], [2.0, -1.0], [-2.0, 1.0]])
    emb = landscape.pca_embed(sym)
    assert np.allclose(emb.mean_point, 0.0)
    assert np.allclose(emb.project(sym), emb.coords)


def test_pca_sign_convention_and_errors():
    rng = np.random.default_rng(5)
    emb = landscape.pca_embed(rng.normal(size=(20, 4)), landscape.UNIVERSAL)
    assert emb.mode == landscape.UNIVERSAL
    for c in range(2):
        assert emb.components[c, np.argmax(np.abs(emb.components[c]))] > 0
    with pytest.raises(LandscapeError, match='rank-0'):
        landscape.pca_embed(np.ones((5, 3)))
    with pytest.raises(LandscapeError):
        landscape.pca_embed(np.ones((2, 3)))
    with pytest.raises(LandscapeError):
        landscape.pca_embed(rng.normal(size=(5, 3)), mode='sideways')


def _directions(angles):
    return np.column_stack([np.cos(angles), np.sin(angles)])


def test_mean_offset_score():
    assert landscape.mean_offset_score(np.ones((12, 3))) == 0.0

    two_regimes = _directions(np.concatenate([np.linspace(0.05, 0.1, 10), np.linspace(1.47, 1.52, 10)]))
    assert landscape.mean_offset_score(two_regimes) > 1.0

    one_cluster = _directions(np.linspace(math.pi / 4 - 0.2, math.pi / 4 + 0.2, 21))
    assert landscape.mean_offset_score(one_cluster) <= 1.0

    with pytest.raises(LandscapeError):
        landscape.mean_offset_score(np.ones((5, 2)))


def test_kmeans_best_inertia_never_worsens_with_more_restarts():
    rng = np.random.default_rng(21)
    X = np.vstack([rng.normal(loc=c, scale=0.8, size=(15, 2)) for c in ((0, 0), (3, 0), (0, 3), (3, 3))])
    inertias = [landscape.kmeans(X, 4, seed=5, n_init=n).inertia for n in range(1, 11)]
    assert all(b <= a for a, b in zip(inertias, inertias[1:]))


def test_pca_directions_orthonormal_and_row_order_free():
    rng = np.random.default_rng(22)
    X = rng.normal(size=(30, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.2])
    emb = landscape.pca_embed(X)
    assert np.allclose(emb.components @ emb.components.T, np.eye(2), atol=1e-10)

    perm = rng.permutation(30)
    shuffled = landscape.pca_embed(X[perm])
    signs = np.sign(np.sum(shuffled.coords * emb.coords[perm], axis=0))
    assert np.allclose(shuffled.coords, emb.coords[perm] * signs, atol=1e-10)
