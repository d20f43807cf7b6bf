"""
A single expert: one Chebyshev graph convolution layer with a linear
classification head, plus the gradient-weighted channel attention used to
prune the graph handed to the next expert.

The attention weights need dS^l/dH. Because the head is a single affine map
followed by a softmax, that gradient has the closed form

    dS^l/dH[c, d] = sum_e S^l (delta_{l,e} - S^e) W[c*D + d, e]

restricted to the entries where the ReLU producing H is active. The closed form
is assembled from recorded tensor operations, so the diversity term of the
total loss can be differentiated through the attention maps with first order
reverse mode only.

The factor S^l (1 - S^l) is common to every entry and underflows for a
confident expert, flattening the map to the constant fallback. The channel
ranking is therefore computed with that factor divided out.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy

from .errors import ConfigError, ContractError, ShapeError
from .graph_spectral import (
    EegGraph,
    as_node_mask,
    chebyshev_basis,
    prune_graph,
    scaled_laplacian,
)
from .tensor_core import (
    DiffRecord,
    Tensor,
    add,
    concat_cols,
    constant,
    extremum,
    log_clamped,
    matmul,
    mul,
    ones,
    reduce_mean,
    relu,
    reshape,
    row_mask,
    scalar_op,
    scale,
    softmax_row,
    sub,
    submatrix,
    transpose,
    zeros,
)

# Range below which the attention map is treated as constant
ATTENTION_RANGE_EPS = 1e-12
LOG_FLOOR = 1e-12


@dataclass
class ExpertParams:
    """
    cheb_weights: (K*F) x D filter bank applied to the concatenated Chebyshev
    terms. head_weights: (C*D) x E, head_bias: 1 x E classification head.
    """

    cheb_weights: Tensor
    head_weights: Tensor
    head_bias: Tensor

    @classmethod
    def initialize(
        cls,
        rng: numpy.random.Generator,
        channels: int,
        bands: int,
        filters: int,
        order: int,
        classes: int,
        prefix: str = "expert",
    ) -> "ExpertParams":
        def glorot(fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        return cls(
            cheb_weights=Tensor(
                glorot(order * bands, filters), requires_grad=True, name=f"{prefix}.cheb"
            ),
            head_weights=Tensor(
                glorot(channels * filters, classes),
                requires_grad=True,
                name=f"{prefix}.head_w",
            ),
            head_bias=Tensor(
                numpy.zeros((1, classes)), requires_grad=True, name=f"{prefix}.head_b"
            ),
        )

    def tensors(self) -> Dict[str, Tensor]:
        return {
            t.name: t for t in (self.cheb_weights, self.head_weights, self.head_bias)
        }

    def bind(self, record: DiffRecord) -> "ExpertParams":
        return ExpertParams(
            record.watch(self.cheb_weights),
            record.watch(self.head_weights),
            record.watch(self.head_bias),
        )

    def check_shapes(self, channels, bands, filters, order, classes) -> None:
        expected = {
            "cheb_weights": (order * bands, filters),
            "head_weights": (channels * filters, classes),
            "head_bias": (1, classes),
        }
        for field, shape in expected.items():
            got = getattr(self, field).shape
            if got != shape:
                raise ShapeError(f"Expert {field} has shape {got}, expected {shape}")


@dataclass
class ExpertOutput:
    H: Tensor  # C x D
    logits: Tensor  # 1 x E
    probs: Tensor  # 1 x E
    importance: Tensor  # 1 x C, post-ReLU
    normalized: Tensor  # 1 x C in [0, 1]
    masked_attention: Tensor  # 1 x C, normalized map zeroed on pruned channels
    keep_mask: numpy.ndarray  # length C, {0, 1}
    target: int


def expert_forward(
    graph: EegGraph, keep_mask_in, params: ExpertParams, order: int
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Masking the node features and pruning the adjacency with `keep_mask_in`,
    then H = ReLU([X_0 .. X_{K-1}] Theta), z = flatten(H) W + b, S = softmax(z).
    """
    C = graph.channel_count
    mask = as_node_mask(keep_mask_in, C)
    X = row_mask(graph.features, mask)
    laplacian = scaled_laplacian(prune_graph(graph.adjacency, mask))
    Z = concat_cols(chebyshev_basis(X, laplacian, order))
    if Z.cols != params.cheb_weights.rows:
        raise ShapeError(
            f"Chebyshev features have {Z.cols} columns, filter bank expects "
            f"{params.cheb_weights.rows}"
        )
    H = relu(matmul(Z, params.cheb_weights))
    flat = reshape(H, 1, H.rows * H.cols)
    if flat.cols != params.head_weights.rows:
        raise ShapeError(
            f"Flattened features of width {flat.cols} do not match head "
            f"weights {params.head_weights.shape}"
        )
    logits = add(matmul(flat, params.head_weights), params.head_bias)
    return H, logits, softmax_row(logits)


def expert_loss(probs: Tensor, label: int) -> Tensor:
    """-log S[label], with S clamped at 1e-12"""
    if not 0 <= label < probs.cols:
        raise ContractError(f"Label {label} outside of [0, {probs.cols})")
    picked = submatrix(probs, 0, 1, label, label + 1)
    return scale(log_clamped(picked, LOG_FLOOR), -1.0)


def gradcam_alpha(
    probs: Tensor,
    head_weights: Tensor,
    target: int,
    channels: int,
    filters: int,
    H: Optional[Tensor] = None,
) -> Tensor:
    """
    Feature-dimension importance alpha (1 x D): the closed-form gradient of
    S^target with respect to H, averaged over channels. When `H` is given
    the gradient is zeroed where H is not strictly positive.
    """
    E = probs.cols
    if not 0 <= target < E:
        raise ContractError(f"Target class {target} outside of [0, {E})")
    if head_weights.shape != (channels * filters, E):
        raise ShapeError(
            f"Head weights {head_weights.shape} do not match C*D={channels * filters}, E={E}"
        )
    onehot = numpy.zeros((1, E))
    onehot[0, target] = 1.0
    s_target = submatrix(probs, 0, 1, target, target + 1)
    dz = scalar_op(sub(constant(onehot), probs), s_target, "mul")
    grad = reshape(matmul(head_weights, transpose(dz)), channels, filters)
    if H is not None:
        grad = mul(grad, constant((H.data > 0).astype(numpy.float64)))
    return reduce_mean(grad, "rows")


def gradcam_direction(
    logits: Tensor,
    head_weights: Tensor,
    target: int,
    channels: int,
    filters: int,
    H: Optional[Tensor] = None,
) -> Tensor:
    """
    `gradcam_alpha` divided by 2 S^t (1 - S^t), evaluated from the logits:

        0.5 * (W[:, t] - sum_{e != t} r_e W[:, e]),  r = softmax of the other logits

    The factor is positive, so the normalized attention is unchanged, but the
    result does not vanish once the expert is confident in the target class.
    A single-class head has no direction and yields zeros.
    """
    E = logits.cols
    if not 0 <= target < E:
        raise ContractError(f"Target class {target} outside of [0, {E})")
    if head_weights.shape != (channels * filters, E):
        raise ShapeError(
            f"Head weights {head_weights.shape} do not match C*D={channels * filters}, E={E}"
        )
    if E == 1:
        return zeros(1, filters)
    rows = head_weights.rows
    others = [e for e in range(E) if e != target]
    weights = softmax_row(concat_cols([submatrix(logits, 0, 1, e, e + 1) for e in others]))
    rival = matmul(
        concat_cols([submatrix(head_weights, 0, rows, e, e + 1) for e in others]),
        transpose(weights),
    )
    own = submatrix(head_weights, 0, rows, target, target + 1)
    grad = reshape(scale(sub(own, rival), 0.5), channels, filters)
    if H is not None:
        grad = mul(grad, constant((H.data > 0).astype(numpy.float64)))
    return reduce_mean(grad, "rows")


def channel_importance(H: Tensor, alpha: Tensor) -> Tensor:
    """I_c = ReLU(sum_d alpha_d H[c, d]) as a 1 x C row"""
    if alpha.shape != (1, H.cols):
        raise ShapeError(f"alpha {alpha.shape} does not match feature map {H.shape}")
    return relu(transpose(matmul(H, transpose(alpha))))


def normalize_attention(importance: Tensor) -> Tensor:
    """
    Min-max normalization to [0, 1]. A (numerically) constant map is returned
    as all ones, which keeps every channel.
    """
    lo = extremum(importance, "min")
    hi = extremum(importance, "max")
    if hi.item() - lo.item() < ATTENTION_RANGE_EPS:
        return ones(1, importance.cols)
    shifted = sub(importance, scalar_op(ones(1, importance.cols), lo, "mul"))
    return scalar_op(shifted, sub(hi, lo), "div")


def threshold_mask(normalized: Tensor, eta: float) -> Tuple[numpy.ndarray, Tensor]:
    """
    keep_c = [normalized_c >= eta] and Phi = normalized * keep. The mask is a
    constant for differentiation, Phi carries gradients on kept channels.
    """
    if not 0.0 < eta < 1.0:
        raise ConfigError(f"Pruning threshold eta must lie in (0, 1), got {eta}")
    keep = (normalized.data.reshape(-1) >= eta).astype(numpy.float64)
    return keep, mul(normalized, constant(keep))


def run_expert(
    graph: EegGraph,
    keep_mask_in,
    params: ExpertParams,
    order: int,
    eta: float,
    target: Optional[int] = None,
    static_keep=None,
) -> ExpertOutput:
    """
    Full expert pass. `target` selects the class whose probability drives the
    attention map; without it the expert's own argmax class is used. With
    `static_keep` the attention computation is bypassed and the given channel
    mask is used as keep mask and attention map.
    """
    H, logits, probs = expert_forward(graph, keep_mask_in, params, order)
    if target is None:
        target = int(numpy.argmax(probs.data))

    if static_keep is not None:
        keep = as_node_mask(static_keep, graph.channel_count)
        fixed = constant(keep)
        return ExpertOutput(H, logits, probs, fixed, fixed, fixed, keep, target)

    alpha = gradcam_direction(
        logits, params.head_weights, target, graph.channel_count, H.cols, H=H
    )
    importance = channel_importance(H, alpha)
    normalized = normalize_attention(importance)
    keep, phi = threshold_mask(normalized, eta)
    return ExpertOutput(H, logits, probs, importance, normalized, phi, keep, target)
