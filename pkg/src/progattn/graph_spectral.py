"""
Electrode graphs: montage handling, adjacency construction, the scaled
normalized Laplacian and Chebyshev polynomial bases evaluated through the
three-term recurrence. The eigendecomposition routines are only used to check
the recurrence, the runtime path never diagonalizes a Laplacian.

The spectrum of the normalized Laplacian is bounded by 2, so the scaled
Laplacian is fixed to L - I instead of estimating the largest eigenvalue per
graph. Isolated nodes (which node pruning creates routinely) use the
D^{-1/2} = 0 convention, so their rows and columns of the scaled Laplacian are
exactly zero.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy
import numpy.polynomial.chebyshev as chebyshev
import scipy.linalg
import scipy.spatial.distance

from .errors import ConfigError, ContractError, LoadError, ShapeError
from .tensor_core import Tensor, matmul, scale, sub

logger = logging.getLogger("progattn.graph")

# Largest matrix the eigen oracle is meant for
EIGEN_ORACLE_MAX_SIZE = 64


@dataclass(frozen=True)
class MontageEntry:
    name: str
    x: float
    y: float


@dataclass(frozen=True)
class AdjacencyRule:
    """
    How electrode positions are connected: `knn` links every electrode to its
    k nearest neighbours (symmetrized by OR, ties broken by channel index),
    `radius` links every pair closer than or equal to `radius`.
    """

    kind: str = "knn"
    k: int = 4
    radius: float = 0.5

    def describe(self) -> str:
        return f"knn({self.k})" if self.kind == "knn" else f"radius({self.radius})"


class ScaledLaplacian(object):
    """L~ = L - I of a symmetric binary adjacency"""

    def __init__(self, matrix: Tensor):
        self.matrix = matrix

    @property
    def size(self) -> int:
        return self.matrix.rows


class EegGraph(object):
    """
    Node features X (C x F) together with the electrode adjacency A (C x C)
    and the channel names of the montage.
    """

    def __init__(self, features: Tensor, adjacency: Tensor, channel_names: Sequence[str]):
        if not isinstance(features, Tensor):
            features = Tensor(features)
        if not isinstance(adjacency, Tensor):
            adjacency = Tensor(adjacency)
        C = features.rows
        if adjacency.shape != (C, C):
            raise ShapeError(f"Adjacency {adjacency.shape} does not match {C} channels")
        if len(channel_names) != C:
            raise ShapeError(f"{len(channel_names)} channel names for {C} channels")
        _check_adjacency(adjacency.data)
        self.features = features
        self.adjacency = adjacency
        self.channel_names = list(channel_names)

    @property
    def channel_count(self) -> int:
        return self.features.rows

    @property
    def band_count(self) -> int:
        return self.features.cols

    def scaled_laplacian(self) -> ScaledLaplacian:
        return scaled_laplacian(self.adjacency)


def _check_adjacency(A: numpy.ndarray) -> None:
    if A.shape[0] != A.shape[1]:
        raise ShapeError(f"Adjacency must be square, got {A.shape}")
    if not numpy.array_equal(A, A.T):
        raise ContractError("Adjacency matrix is not symmetric")
    if not numpy.isin(A, (0.0, 1.0)).all():
        raise ContractError("Adjacency matrix must be binary")
    if numpy.any(numpy.diag(A) != 0):
        raise ContractError("Adjacency matrix must have a zero diagonal")


def as_node_mask(keep_mask, size: int) -> numpy.ndarray:
    mask = numpy.asarray(keep_mask, dtype=numpy.float64).reshape(-1)
    if mask.size != size:
        raise ShapeError(f"Mask of length {mask.size} for {size} nodes")
    if not numpy.isin(mask, (0.0, 1.0)).all():
        raise ContractError("Node mask must be binary")
    return mask


"""
Montage handling
"""


def load_montage(path: str) -> List[MontageEntry]:
    """
    Reading a montage JSON file: an array of {"name": str, "x": float, "y":
    float} entries in normalized head coordinates (unit circle).
    """
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise LoadError(f"Cannot read montage [{path}]: {err}") from err
    return parse_montage(raw, source=path)


def parse_montage(raw, source: str = "<inline>") -> List[MontageEntry]:
    if not isinstance(raw, list) or len(raw) == 0:
        raise LoadError(f"Montage [{source}] must be a non-empty JSON array")
    entries = []
    for index, item in enumerate(raw):
        try:
            entries.append(MontageEntry(str(item["name"]), float(item["x"]), float(item["y"])))
        except (KeyError, TypeError, ValueError) as err:
            raise LoadError(f"Montage [{source}] entry {index} is malformed: {err}") from err
    return entries


def save_montage(path: str, entries: Sequence[MontageEntry]) -> None:
    with open(path, "w") as f:
        json.dump([{"name": e.name, "x": e.x, "y": e.y} for e in entries], f, indent=2)


def ring_montage(channel_count: int) -> List[MontageEntry]:
    """Electrodes evenly placed on the unit circle, used for synthetic data"""
    return [
        MontageEntry(
            f"ch{c:02d}",
            math.cos(2 * math.pi * c / channel_count),
            math.sin(2 * math.pi * c / channel_count),
        )
        for c in range(channel_count)
    ]


def montage_coordinates(montage) -> numpy.ndarray:
    if len(montage) and isinstance(montage[0], MontageEntry):
        return numpy.array([[e.x, e.y] for e in montage], dtype=numpy.float64)
    coords = numpy.asarray(montage, dtype=numpy.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"Montage coordinates must be C x 2, got {coords.shape}")
    return coords


"""
Graph construction and spectral operators
"""


def build_adjacency(montage, rule: AdjacencyRule) -> Tensor:
    """
    Binary symmetric adjacency from 2-D electrode positions. `montage` is
    either a list of `MontageEntry` or a C x 2 coordinate array.
    """
    coords = montage_coordinates(montage)
    C = coords.shape[0]
    dist = scipy.spatial.distance.cdist(coords, coords)
    off_diag = dist[~numpy.eye(C, dtype=bool)]
    if numpy.any(off_diag == 0):
        raise ConfigError("Montage contains duplicate electrode coordinates")

    A = numpy.zeros((C, C))
    if rule.kind == "knn":
        if not 1 <= rule.k < C:
            raise ConfigError(f"knn requires 1 <= k < C, got k={rule.k} for C={C}")
        for c in range(C):
            # Stable sort: ties are resolved towards the lower channel index
            order = numpy.argsort(dist[c], kind="stable")
            neighbours = [n for n in order if n != c][: rule.k]
            A[c, neighbours] = 1.0
        A = numpy.maximum(A, A.T)
    elif rule.kind == "radius":
        if not rule.radius > 0:
            raise ConfigError(f"radius rule requires r > 0, got {rule.radius}")
        A = (dist <= rule.radius * (1 + 1e-9)).astype(numpy.float64)
        numpy.fill_diagonal(A, 0.0)
    else:
        raise ConfigError(f"Unknown adjacency rule [{rule.kind}]")

    logger.debug(f"Built {rule.describe()} adjacency with {int(A.sum()) // 2} edges")
    return Tensor(A)


def normalized_laplacian(adjacency: Tensor) -> Tensor:
    """L = I - D^{-1/2} A D^{-1/2} with D^{-1/2} := 0 for isolated nodes"""
    A = adjacency.data
    if A.shape[0] != A.shape[1] or not numpy.array_equal(A, A.T):
        raise ContractError("Laplacian requires a symmetric adjacency matrix")
    degree = A.sum(axis=1)
    inv_sqrt = numpy.zeros_like(degree)
    nonzero = degree > 0
    inv_sqrt[nonzero] = 1.0 / numpy.sqrt(degree[nonzero])
    return Tensor(numpy.eye(A.shape[0]) - inv_sqrt[:, None] * A * inv_sqrt[None, :])


def scaled_laplacian(adjacency: Tensor) -> ScaledLaplacian:
    """L~ = L - I, the lambda_max = 2 rescaling of the normalized Laplacian"""
    L = normalized_laplacian(adjacency)
    return ScaledLaplacian(Tensor(L.data - numpy.eye(L.rows)))


def chebyshev_basis(X: Tensor, laplacian: ScaledLaplacian, order: int) -> List[Tensor]:
    """
    [X_0, ..., X_{K-1}] with X_0 = X, X_1 = L~ X and
    X_k = 2 L~ X_{k-1} - X_{k-2}.
    """
    if order < 1:
        raise ConfigError(f"Chebyshev order must be >= 1, got {order}")
    if laplacian.size != X.rows:
        raise ShapeError(f"Laplacian of size {laplacian.size} for {X.rows} nodes")
    L = laplacian.matrix
    basis = [X]
    if order > 1:
        basis.append(matmul(L, X))
    for _ in range(2, order):
        basis.append(sub(scale(matmul(L, basis[-1]), 2.0), basis[-2]))
    return basis


def prune_graph(adjacency: Tensor, keep_mask) -> Tensor:
    """Zeroing the rows and columns of every dropped node"""
    mask = as_node_mask(keep_mask, adjacency.rows)
    keep = mask > 0
    return Tensor(numpy.where(keep[:, None] & keep[None, :], adjacency.data, 0.0))


def eigen_oracle(matrix: Tensor) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    Full symmetric eigendecomposition (ascending eigenvalues, orthonormal
    eigenvector columns). Only meant for checking spectral properties on small
    graphs.
    """
    M = matrix.data
    n = M.shape[0]
    if M.shape != (n, n):
        raise ShapeError(f"Eigen oracle requires a square matrix, got {M.shape}")
    if n > EIGEN_ORACLE_MAX_SIZE:
        raise ContractError(f"Eigen oracle is limited to n <= {EIGEN_ORACLE_MAX_SIZE}")
    if numpy.max(numpy.abs(M - M.T), initial=0.0) > 1e-10:
        raise ContractError("Eigen oracle requires a symmetric matrix")
    eigenvalues, eigenvectors = scipy.linalg.eigh(0.5 * (M + M.T))
    return eigenvalues, eigenvectors


def chebyshev_basis_spectral(
    X: Tensor, laplacian: ScaledLaplacian, order: int
) -> List[numpy.ndarray]:
    """U T_k(Lambda) U^T X for k < order, evaluated through the eigen oracle"""
    lam, U = eigen_oracle(laplacian.matrix)
    out = []
    for k in range(order):
        T_k = chebyshev.Chebyshev.basis(k)(lam)
        out.append(U @ (T_k[:, None] * (U.T @ X.data)))
    return out


def spectral_filter(X: Tensor, laplacian: ScaledLaplacian, theta: Sequence[float]) -> numpy.ndarray:
    """y = U g_theta(Lambda) U^T X with g_theta = sum_k theta_k T_k"""
    lam, U = eigen_oracle(laplacian.matrix)
    response = chebyshev.chebval(lam, numpy.asarray(theta, dtype=float))
    return U @ (response[:, None] * (U.T @ X.data))


def keep_mask_from_names(
    channel_names: Sequence[str], keep_names: Sequence[str], source: Optional[str] = None
) -> numpy.ndarray:
    """Binary node mask selecting the named channels (case-insensitive)"""
    lookup = {name.upper(): index for index, name in enumerate(channel_names)}
    mask = numpy.zeros(len(channel_names))
    for name in keep_names:
        if name.upper() not in lookup:
            raise ConfigError(f"Channel [{name}] from {source or 'channel list'} not in montage")
        mask[lookup[name.upper()]] = 1.0
    return mask
