import numpy as np
import pytest
import scipy.sparse as sp

from geowarp import graphs


def path3():
    A = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    return graphs.AttributedGraph(A, np.zeros((3, 2)))


def test_validation_rejects_asymmetry_selfloops_negatives():
    X = np.zeros((2, 1))
    with pytest.raises(ValueError):
        graphs.AttributedGraph(np.array([[0.0, 1.0], [0.5, 0.0]]), X)
    with pytest.raises(ValueError):
        graphs.AttributedGraph(np.array([[1.0, 0.0], [0.0, 0.0]]), X)
    with pytest.raises(ValueError):
        graphs.AttributedGraph(np.array([[0.0, -1.0], [-1.0, 0.0]]), X)
    with pytest.raises(ValueError):
        graphs.AttributedGraph(np.zeros((2, 2)), np.zeros((3, 1)))


def test_path3_laplacian_spectrum():
    L = graphs.laplacian(path3())
    vals = np.sort(np.linalg.eigvalsh(L))
    assert np.allclose(vals, [0.0, 1.0, 3.0], atol=1e-10)


def test_empty_graph_laplacian_is_zero():
    g = graphs.AttributedGraph(np.zeros((4, 4)), np.zeros((4, 1)))
    assert np.array_equal(graphs.laplacian(g), np.zeros((4, 4)))


def test_laplacian_annihilates_constant_vector():
    rng = np.random.default_rng(0)
    A = rng.random((6, 6))
    A = np.triu(A, 1)
    A = A + A.T
    g = graphs.AttributedGraph(A, np.zeros((6, 1)))
    L = graphs.laplacian(g)
    assert np.allclose(L @ np.ones(6), 0.0, atol=1e-12)


def test_laplacian_psd_rayleigh_quotients():
    rng = np.random.default_rng(1)
    A = np.triu(rng.random((8, 8)), 1)
    A = A + A.T
    L = graphs.laplacian(graphs.AttributedGraph(A, np.zeros((8, 1))))
    for _ in range(100):
        v = rng.standard_normal(8)
        assert v @ L @ v >= -1e-10


def test_spectral_bounds_path3():
    lam2, lam_max = graphs.spectral_bounds(graphs.laplacian(path3()))
    assert abs(lam2 - 1.0) < 1e-10
    assert abs(lam_max - 3.0) < 1e-10


def test_spectral_bounds_disconnected_skips_zero_multiplicity():
    # two disjoint edges: eigenvalues {0, 0, 2, 2}
    A = np.zeros((4, 4))
    A[0, 1] = A[1, 0] = 1.0
    A[2, 3] = A[3, 2] = 1.0
    g = graphs.AttributedGraph(A, np.zeros((4, 1)))
    lam2, lam_max = graphs.spectral_bounds(graphs.laplacian(g))
    assert abs(lam2 - 2.0) < 1e-10
    assert abs(lam_max - 2.0) < 1e-10


def test_spectral_bounds_matches_dense_oracle_and_residuals():
    rng = np.random.default_rng(2)
    A = np.triu(rng.random((12, 12)) * (rng.random((12, 12)) < 0.4), 1)
    A = A + A.T
    g = graphs.AttributedGraph(A, np.zeros((12, 1)))
    L = graphs.laplacian(g)
    lam2, lam_max = graphs.spectral_bounds(L)
    vals, vecs = np.linalg.eigh(L)
    nz = vals[vals > 1e-9 * vals[-1]]
    assert abs(lam2 - nz[0]) < 1e-8
    assert abs(lam_max - vals[-1]) < 1e-8
    for lam in (lam2, lam_max):
        idx = int(np.argmin(np.abs(vals - lam)))
        v = vecs[:, idx]
        assert np.linalg.norm(L @ v - vals[idx] * v) <= 1e-8 * np.linalg.norm(v)


def test_spectral_bounds_rejects_edgeless():
    with pytest.raises(ValueError):
        graphs.spectral_bounds(np.zeros((3, 3)))


def test_heat_times_endpoints_and_log_spacing():
    sched = graphs.heat_times(1.0, 4.0, k=15)
    assert len(sched) == 15
    assert sched.times[0] == 0.25
    assert sched.times[-1] == 4.0
    ratios = sched.times[1:] / sched.times[:-1]
    assert np.allclose(ratios, ratios[0], rtol=1e-12)


def test_heat_times_equal_extremes():
    sched = graphs.heat_times(3.0, 3.0, k=7)
    assert np.all(sched.times >= 1.0 / 3.0 - 1e-15)
    assert np.all(sched.times <= 4.0 / 3.0 + 1e-15)
    ratios = sched.times[1:] / sched.times[:-1]
    assert np.allclose(ratios, ratios[0], rtol=1e-12)


def test_heat_times_k2_is_exactly_endpoints():
    sched = graphs.heat_times(2.0, 5.0, k=2)
    assert np.array_equal(sched.times, np.array([1.0 / 5.0, 4.0 / 2.0]))


def test_heat_times_rejects_bad_order():
    with pytest.raises(ValueError):
        graphs.heat_times(5.0, 2.0)
    with pytest.raises(ValueError):
        graphs.heat_times(0.0, 2.0)


def test_edge_list_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    A = np.triu(rng.random((7, 7)) * (rng.random((7, 7)) < 0.5), 1)
    A = A + A.T
    g = graphs.AttributedGraph(A, rng.standard_normal((7, 3)))
    p = tmp_path / "edges.txt"
    graphs.write_edge_list(p, g)
    back = graphs.read_edge_list(p, 7)
    assert sp.issparse(back)
    assert np.allclose(back.toarray(), A, atol=1e-15)


def test_attribute_and_label_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    X = rng.standard_normal((5, 4))
    labels = (rng.random(5) < 0.4).astype(int)
    pa, pl = tmp_path / "X.csv", tmp_path / "y.txt"
    graphs.write_attributes(pa, X, header="5 x 4")
    graphs.write_labels(pl, labels)
    assert np.array_equal(graphs.read_attributes(pa), X)
    assert np.array_equal(graphs.read_labels(pl), labels)
