import math

import numpy
import numpy.testing as npt
import pytest
import scipy.spatial.distance
from conftest import random_adjacency

from progattn.errors import ConfigError, ContractError, LoadError, ShapeError
from progattn.graph_spectral import (
    AdjacencyRule,
    EegGraph,
    MontageEntry,
    ScaledLaplacian,
    build_adjacency,
    chebyshev_basis,
    chebyshev_basis_spectral,
    eigen_oracle,
    keep_mask_from_names,
    load_montage,
    normalized_laplacian,
    prune_graph,
    ring_montage,
    save_montage,
    scaled_laplacian,
    spectral_filter,
)
from progattn.tensor_core import Tensor

PATH3 = numpy.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])


def test_radius_rule_on_collinear_points():
    coords = numpy.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
    A = build_adjacency(coords, AdjacencyRule("radius", radius=0.5))
    npt.assert_array_equal(A.data, PATH3)


def test_knn_complete_and_ring(rng):
    coords = rng.uniform(-1, 1, size=(7, 2))
    A = build_adjacency(coords, AdjacencyRule("knn", k=6))
    npt.assert_array_equal(A.data, numpy.ones((7, 7)) - numpy.eye(7))

    montage = ring_montage(16)
    A = build_adjacency(montage, AdjacencyRule("knn", k=2)).data
    coords = numpy.array([[m.x, m.y] for m in montage])
    dist = scipy.spatial.distance.squareform(scipy.spatial.distance.pdist(coords))
    for c in range(16):
        nearest = sorted(numpy.argsort(dist[c])[1:3])
        assert sorted(numpy.flatnonzero(A[c])) == nearest
    # Cycle graph: every node has exactly two neighbours
    npt.assert_array_equal(A.sum(axis=1), numpy.full(16, 2.0))
    npt.assert_array_equal(A, A.T)


def test_knn_ties_break_towards_lower_index():
    # Node 0 is equidistant from nodes 1 and 2, which both have closer partners
    coords = numpy.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [1.5, 0.0], [-1.5, 0.0]])
    A = build_adjacency(coords, AdjacencyRule("knn", k=1)).data
    assert A[0, 1] == 1.0
    assert A[0, 2] == 0.0


def test_adjacency_errors():
    with pytest.raises(ConfigError):
        build_adjacency(numpy.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]), AdjacencyRule())
    with pytest.raises(ConfigError):
        build_adjacency(ring_montage(4), AdjacencyRule("knn", k=4))
    with pytest.raises(ConfigError):
        build_adjacency(ring_montage(4), AdjacencyRule("radius", radius=0.0))
    with pytest.raises(ConfigError):
        build_adjacency(ring_montage(4), AdjacencyRule("delaunay"))


def test_scaled_laplacian_of_path():
    L = scaled_laplacian(Tensor(PATH3)).matrix.data
    r = -1 / math.sqrt(2)
    npt.assert_allclose(L, [[0.0, r, 0.0], [r, 0.0, r], [0.0, r, 0.0]], atol=1e-15)


def test_scaled_laplacian_of_edgeless_graph_is_zero():
    npt.assert_array_equal(scaled_laplacian(Tensor(numpy.zeros((4, 4)))).matrix.data, numpy.zeros((4, 4)))


def test_laplacian_requires_symmetry():
    with pytest.raises(ContractError):
        normalized_laplacian(Tensor([[0.0, 1.0], [0.0, 0.0]]))


def test_laplacian_spectrum_range(rng):
    complete = numpy.ones((3, 3)) - numpy.eye(3)
    lam, _ = eigen_oracle(scaled_laplacian(Tensor(complete)).matrix)
    assert lam.min() >= -1 - 1e-9 and lam.max() <= 1 + 1e-9
    for _ in range(10):
        A = build_adjacency(rng.uniform(-1, 1, (12, 2)), AdjacencyRule("knn", k=3))
        lam, _ = eigen_oracle(normalized_laplacian(A))
        assert lam.min() >= -1e-9 and lam.max() <= 2 + 1e-9


def test_chebyshev_basis_small_orders(rng):
    X = Tensor(rng.uniform(-2, 2, (5, 3)))
    lap = scaled_laplacian(Tensor(random_adjacency(rng, 5)))
    basis = chebyshev_basis(X, lap, 1)
    assert len(basis) == 1 and basis[0] is X

    zero = ScaledLaplacian(Tensor(numpy.zeros((5, 5))))
    basis = chebyshev_basis(X, zero, 2)
    npt.assert_array_equal(basis[1].data, numpy.zeros((5, 3)))

    with pytest.raises(ConfigError):
        chebyshev_basis(X, lap, 0)
    with pytest.raises(ShapeError):
        chebyshev_basis(Tensor(numpy.ones((4, 3))), lap, 2)


def test_chebyshev_recurrence_matches_spectral_definition(rng):
    for _ in range(20):
        n = int(rng.integers(2, 17))
        lap = scaled_laplacian(Tensor(random_adjacency(rng, n)))
        X = Tensor(rng.uniform(-2, 2, (n, 3)))
        recurrence = chebyshev_basis(X, lap, 6)
        spectral = chebyshev_basis_spectral(X, lap, 6)
        for fast, slow in zip(recurrence, spectral):
            assert numpy.max(numpy.abs(fast.data - slow)) < 1e-10


def test_spectral_filter_matches_weighted_basis(rng):
    lap = scaled_laplacian(Tensor(random_adjacency(rng, 8)))
    X = Tensor(rng.uniform(-2, 2, (8, 2)))
    theta = [0.5, -1.0, 0.25, 2.0]
    basis = chebyshev_basis(X, lap, 4)
    expected = sum(t * b.data for t, b in zip(theta, basis))
    npt.assert_allclose(spectral_filter(X, lap, theta), expected, atol=1e-10)


def test_prune_graph():
    npt.assert_array_equal(prune_graph(Tensor(PATH3), [1, 1, 1]).data, PATH3)
    npt.assert_array_equal(prune_graph(Tensor(PATH3), [1, 0, 1]).data, numpy.zeros((3, 3)))
    npt.assert_array_equal(
        prune_graph(Tensor(PATH3), [0, 1, 1]).data,
        [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
    )
    with pytest.raises(ShapeError):
        prune_graph(Tensor(PATH3), [1, 1])


def test_prune_graph_composition(rng):
    A = Tensor(random_adjacency(rng, 10, p=0.5))
    m1 = (rng.random(10) < 0.7).astype(float)
    m2 = (rng.random(10) < 0.7).astype(float)
    once = prune_graph(A, m1)
    npt.assert_array_equal(prune_graph(once, m1).data, once.data)
    npt.assert_array_equal(prune_graph(once, m2).data, prune_graph(A, m1 * m2).data)
    npt.assert_array_equal(once.data, once.data.T)


def test_eigen_oracle(rng):
    lam, _ = eigen_oracle(Tensor(numpy.eye(4)))
    npt.assert_allclose(lam, numpy.ones(4))
    lam, _ = eigen_oracle(Tensor(numpy.diag([3.0, 1.0, 2.0])))
    npt.assert_allclose(lam, [1.0, 2.0, 3.0])
    B = rng.uniform(-1, 1, (8, 8))
    M = B + B.T
    lam, U = eigen_oracle(Tensor(M))
    assert numpy.max(numpy.abs(U @ numpy.diag(lam) @ U.T - M)) < 1e-9
    with pytest.raises(ContractError):
        eigen_oracle(Tensor(B))
    with pytest.raises(ContractError):
        eigen_oracle(Tensor(numpy.eye(65)))


def test_graph_validation(rng):
    features = rng.uniform(-1, 1, (3, 2))
    graph = EegGraph(features, PATH3, ["a", "b", "c"])
    assert graph.channel_count == 3 and graph.band_count == 2
    with pytest.raises(ContractError):
        EegGraph(features, [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]], ["a", "b", "c"])
    with pytest.raises(ContractError):
        EegGraph(features, numpy.eye(3), ["a", "b", "c"])
    with pytest.raises(ShapeError):
        EegGraph(features, numpy.zeros((2, 2)), ["a", "b"])
    with pytest.raises(ShapeError):
        EegGraph(features, PATH3, ["a", "b"])


def test_montage_files(tmp_path):
    entries = [MontageEntry("FP1", -0.3, 0.9), MontageEntry("FP2", 0.3, 0.9)]
    path = str(tmp_path / "montage.json")
    save_montage(path, entries)
    assert load_montage(path) == entries

    (tmp_path / "bad.json").write_text('[{"name": "FP1", "x": 0.1}]')
    with pytest.raises(LoadError):
        load_montage(str(tmp_path / "bad.json"))
    with pytest.raises(LoadError):
        load_montage(str(tmp_path / "missing.json"))


def test_keep_mask_from_names():
    names = ["FP1", "FPZ", "FP2"]
    npt.assert_array_equal(keep_mask_from_names(names, ["fp2", "FP1"]), [1.0, 0.0, 1.0])
    with pytest.raises(ConfigError):
        keep_mask_from_names(names, ["CZ"])
