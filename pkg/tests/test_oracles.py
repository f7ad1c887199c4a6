import numpy as np
import pytest

from basinscope.services import attribution, oracles


def test_partitions_count_stirling_numbers():
    assert len(list(oracles._partitions(4, 2))) == 7
    assert len(list(oracles._partitions(5, 3))) == 25
    assert list(oracles._partitions(3, 3)) == [[0, 1, 2]]


def test_exhaustive_kmeans_inertia():
    X = [[0.0], [1.0], [10.0], [11.0]]
    assert oracles.exhaustive_kmeans_inertia(X, 2) == pytest.approx(1.0)
    assert oracles.exhaustive_kmeans_inertia(X, 4) == 0.0


def test_scalar_logreg_root_solves_stationarity():
    w = oracles.scalar_logreg_root(1.0)
    assert w == pytest.approx(2.0 / (1.0 + np.exp(w)), abs=1e-10)
    assert w == pytest.approx(0.674832, abs=1e-6)


def test_random_tree_is_consistent():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tree = oracles.random_tree(rng, 4)
        for node in range(len(tree.cover)):
            if tree.left[node] >= 0:
                assert tree.cover[tree.left[node]] + tree.cover[tree.right[node]] == tree.cover[node]


def test_linear_brute_force_agrees_with_closed_form():
    w, b, mu, x = np.array([2.0, -1.0, 0.5]), 0.3, np.array([0.1, 0.2, -0.4]), np.array([1.0, 1.0, 1.0])
    assert np.allclose(oracles.brute_force_linear_shap(w, b, x, mu), w * (x - mu))


def test_small_check_runs_pass():
    assert oracles.check_tree_shap(20)[0]
    assert oracles.check_efficiency(5)[0]
    assert oracles.check_kmeans(10)[0]
    assert oracles.check_logreg(5)[0]
    assert oracles.check_entropy()[0]
    assert oracles.check_disagreement(20)[0]


def test_tree_shap_check_detects_a_broken_solver(monkeypatch):
    monkeypatch.setattr(attribution, 'tree_shap', lambda tree, x: np.zeros_like(x) + 1.0)
    passed, detail = oracles.check_tree_shap(5)
    assert not passed
    assert 'max |TreeSHAP' in detail


def test_run_verify_suite_records_failures(monkeypatch):
    results = oracles.run_verify_suite(['entropy'])
    assert len(results) == 1 and results[0].passed and results[0].name == 'entropy'

    def boom():
        raise ValueError('broken')

    monkeypatch.setitem(oracles.SUITES, 'entropy', boom)
    result = oracles.run_verify_suite(['entropy'])[0]
    assert not result.passed
    assert result.detail == 'ValueError: broken'
