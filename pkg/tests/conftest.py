import numpy
import pytest

from progattn.data_ingest import synth_generate
from progattn.graph_spectral import AdjacencyRule, EegGraph, build_adjacency, ring_montage
from progattn.pipeline import TrainConfig


def make_graph(rng: numpy.random.Generator, channels: int = 6, bands: int = 3, k: int = 2) -> EegGraph:
    """Random features on a ring montage with a knn adjacency"""
    montage = ring_montage(channels)
    adjacency = build_adjacency(montage, AdjacencyRule("knn", k=k))
    features = rng.uniform(-2, 2, size=(channels, bands))
    return EegGraph(features, adjacency, [m.name for m in montage])


def random_adjacency(rng: numpy.random.Generator, n: int, p: float = 0.4) -> numpy.ndarray:
    upper = numpy.triu(rng.random((n, n)) < p, k=1)
    return (upper | upper.T).astype(numpy.float64)


@pytest.fixture
def rng():
    return numpy.random.default_rng(1234)


@pytest.fixture
def toy_graph(rng):
    return make_graph(rng)


@pytest.fixture
def toy_config():
    # C=6, F=3 graphs with D=4, K=3, E=3
    return TrainConfig(
        cheb_order=3,
        filters=4,
        num_classes=3,
        batch_size=2,
        epochs=2,
        lam=1.0,
        beta=0.1,
        seed=7,
    )


@pytest.fixture
def small_dataset():
    return synth_generate(
        channels=8,
        bands=3,
        classes=3,
        n_per_class=10,
        planted=[[0, 1], [3, 4], [6, 7]],
        snr=3.0,
        seed=0,
    )
