import math

import numpy
import numpy.testing as npt
import pytest

from progattn.errors import ConfigError, ContractError, ShapeError
from progattn.expert import (
    ATTENTION_RANGE_EPS,
    ExpertParams,
    channel_importance,
    expert_forward,
    expert_loss,
    gradcam_alpha,
    gradcam_direction,
    normalize_attention,
    run_expert,
    threshold_mask,
)
from progattn.graph_spectral import EegGraph, chebyshev_basis
from progattn.tensor_core import Tensor, concat_cols, matmul, relu

# Path 0-1-2-3 with the extra edge 0-2
PATH_PLUS_EDGE = numpy.array(
    [
        [0.0, 1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
    ]
)


def _toy(rng, C=4, F=2, D=3, K=2, E=3):
    graph = EegGraph(rng.uniform(-2, 2, (C, F)), PATH_PLUS_EDGE, [f"c{i}" for i in range(C)])
    params = ExpertParams.initialize(rng, C, F, D, K, E, prefix="e")
    # Non-zero bias so that the head is not symmetric in the classes
    params.head_bias.data[...] = rng.uniform(-0.5, 0.5, (1, E))
    return graph, params


def _softmax(z):
    e = numpy.exp(z - z.max())
    return e / e.sum()


def test_initialize_shapes_and_names(rng):
    params = ExpertParams.initialize(rng, 6, 3, 4, 3, 3, prefix="expert1")
    assert params.cheb_weights.shape == (9, 4)
    assert params.head_weights.shape == (24, 3)
    npt.assert_array_equal(params.head_bias.data, numpy.zeros((1, 3)))
    assert list(params.tensors()) == ["expert1.cheb", "expert1.head_w", "expert1.head_b"]
    assert numpy.abs(params.cheb_weights.data).max() <= math.sqrt(6.0 / 13)
    params.check_shapes(6, 3, 4, 3, 3)
    with pytest.raises(ShapeError):
        params.check_shapes(7, 3, 4, 3, 3)


def test_zero_parameters_give_uniform_prediction(rng):
    graph, params = _toy(rng)
    for t in params.tensors().values():
        t.data[...] = 0.0
    H, _, S = expert_forward(graph, numpy.ones(4), params, 2)
    npt.assert_array_equal(H.data, numpy.zeros((4, 3)))
    npt.assert_allclose(S.data, numpy.full((1, 3), 1 / 3), atol=1e-15)


def test_zero_mask_gives_zero_features(rng):
    graph, params = _toy(rng)
    params.head_bias.data[...] = 0.0
    H, _, S = expert_forward(graph, numpy.zeros(4), params, 2)
    npt.assert_array_equal(H.data, numpy.zeros((4, 3)))
    npt.assert_allclose(S.data, numpy.full((1, 3), 1 / 3), atol=1e-15)


def test_forward_matches_straightline_oracle(rng):
    graph, params = _toy(rng)
    H, z, S = expert_forward(graph, numpy.ones(4), params, 2)

    A = PATH_PLUS_EDGE
    d = A.sum(axis=1)
    L = numpy.eye(4) - A / numpy.sqrt(numpy.outer(d, d))
    L_scaled = L - numpy.eye(4)
    X = graph.features.data
    Z = numpy.hstack([X, L_scaled @ X])
    H_ref = numpy.maximum(Z @ params.cheb_weights.data, 0.0)
    z_ref = H_ref.reshape(1, -1) @ params.head_weights.data + params.head_bias.data

    assert numpy.max(numpy.abs(H.data - H_ref)) < 1e-12
    assert numpy.max(numpy.abs(z.data - z_ref)) < 1e-12
    assert numpy.max(numpy.abs(S.data - _softmax(z_ref[0]))) < 1e-12


def test_unit_mask_is_bitwise_identical_to_plain_forward(rng):
    graph, params = _toy(rng)
    H, _, _ = expert_forward(graph, numpy.ones(4), params, 2)
    plain = relu(
        matmul(concat_cols(chebyshev_basis(graph.features, graph.scaled_laplacian(), 2)), params.cheb_weights)
    )
    assert numpy.array_equal(H.data, plain.data)


def test_forward_shape_errors(rng):
    graph, params = _toy(rng)
    with pytest.raises(ShapeError):
        expert_forward(graph, numpy.ones(4), params, 3)
    with pytest.raises(ShapeError):
        expert_forward(graph, numpy.ones(5), params, 2)


def test_expert_loss_values():
    assert expert_loss(Tensor([[0.0, 1.0, 0.0]]), 1).item() == 0.0
    npt.assert_allclose(expert_loss(Tensor([[1 / 3] * 3]), 2).item(), math.log(3), rtol=1e-12)
    npt.assert_allclose(expert_loss(Tensor([[0.7, 0.2, 0.1]]), 0).item(), -math.log(0.7), rtol=1e-12)
    with pytest.raises(ContractError):
        expert_loss(Tensor([[0.5, 0.5]]), 2)


def test_gradcam_alpha_degenerate_cases(rng):
    S = Tensor([[0.2, 0.5, 0.3]])
    npt.assert_array_equal(gradcam_alpha(S, Tensor(numpy.zeros((12, 3))), 1, 4, 3).data, numpy.zeros((1, 3)))
    single = gradcam_alpha(Tensor([[1.0]]), Tensor(rng.uniform(-1, 1, (12, 1))), 0, 4, 3)
    npt.assert_array_equal(single.data, numpy.zeros((1, 3)))
    with pytest.raises(ContractError):
        gradcam_alpha(S, Tensor(numpy.zeros((12, 3))), 3, 4, 3)
    with pytest.raises(ShapeError):
        gradcam_alpha(S, Tensor(numpy.zeros((10, 3))), 0, 4, 3)


def test_gradcam_alpha_matches_numerical_gradient(rng):
    for target in range(3):
        graph, params = _toy(rng)
        H, _, S = expert_forward(graph, numpy.ones(4), params, 2)
        W, b = params.head_weights.data, params.head_bias.data

        def score(Hm):
            return _softmax((Hm.reshape(1, -1) @ W + b)[0])[target]

        h = 1e-6
        grad = numpy.zeros_like(H.data)
        for index in numpy.ndindex(*H.shape):
            plus, minus = H.data.copy(), H.data.copy()
            plus[index] += h
            minus[index] -= h
            grad[index] = (score(plus) - score(minus)) / (2 * h)
        expected = (grad * (H.data > 0)).mean(axis=0)

        alpha = gradcam_alpha(S, params.head_weights, target, 4, 3, H=H)
        npt.assert_allclose(alpha.data[0], expected, atol=1e-5)


def test_gradcam_direction_is_rescaled_alpha(rng):
    for target in range(3):
        graph, params = _toy(rng)
        H, z, S = expert_forward(graph, numpy.ones(4), params, 2)
        s = S.data[0, target]
        alpha = gradcam_alpha(S, params.head_weights, target, 4, 3, H=H)
        direction = gradcam_direction(z, params.head_weights, target, 4, 3, H=H)
        npt.assert_allclose(2 * s * (1 - s) * direction.data, alpha.data, atol=1e-12)


def test_gradcam_direction_degenerate_cases(rng):
    z = Tensor([[0.3, -1.0, 2.0]])
    npt.assert_array_equal(gradcam_direction(z, Tensor(numpy.zeros((12, 3))), 1, 4, 3).data, numpy.zeros((1, 3)))
    single = gradcam_direction(Tensor([[4.0]]), Tensor(rng.uniform(-1, 1, (12, 1))), 0, 4, 3)
    npt.assert_array_equal(single.data, numpy.zeros((1, 3)))
    with pytest.raises(ContractError):
        gradcam_direction(z, Tensor(numpy.zeros((12, 3))), 3, 4, 3)
    with pytest.raises(ShapeError):
        gradcam_direction(z, Tensor(numpy.zeros((10, 3))), 0, 4, 3)


def test_attention_of_a_confident_expert(rng):
    checked = 0
    for _ in range(10):
        graph, params = _toy(rng)
        base = run_expert(graph, numpy.ones(4), params, 2, 0.5, target=0)
        if base.normalized.data.min() == 1.0:
            continue
        params.head_bias.data[0, 0] += 80.0
        confident = run_expert(graph, numpy.ones(4), params, 2, 0.5, target=0)
        assert confident.probs.data[0, 0] == 1.0

        # The exact gradient is flattened below the constant-map range
        exact = channel_importance(
            confident.H, gradcam_alpha(confident.probs, params.head_weights, 0, 4, 3, H=confident.H)
        )
        assert exact.data.max() - exact.data.min() < ATTENTION_RANGE_EPS

        npt.assert_allclose(confident.normalized.data, base.normalized.data, atol=1e-12)
        npt.assert_array_equal(confident.keep_mask, base.keep_mask)
        checked += 1
    assert checked > 0


def test_channel_importance():
    I = channel_importance(Tensor([[1.0, -1.0], [2.0, 0.0]]), Tensor([[1.0, 1.0]]))
    npt.assert_array_equal(I.data, [[0.0, 2.0]])
    zero = channel_importance(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0, 0.0]]))
    npt.assert_array_equal(zero.data, [[0.0, 0.0]])
    with pytest.raises(ShapeError):
        channel_importance(Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0, 3.0]]))


def test_normalize_attention():
    npt.assert_allclose(normalize_attention(Tensor([[2.0, 4.0, 6.0]])).data, [[0.0, 0.5, 1.0]])
    npt.assert_array_equal(normalize_attention(Tensor([[3.0, 3.0, 3.0]])).data, [[1.0, 1.0, 1.0]])
    npt.assert_array_equal(normalize_attention(Tensor([[0.0, 1.0]])).data, [[0.0, 1.0]])


def test_threshold_mask():
    keep, phi = threshold_mask(Tensor([[0.2, 0.5, 0.9]]), 0.5)
    npt.assert_array_equal(keep, [0.0, 1.0, 1.0])
    npt.assert_array_equal(phi.data, [[0.0, 0.5, 0.9]])
    keep, _ = threshold_mask(Tensor([[0.2, 0.5, 0.9]]), 0.1)
    npt.assert_array_equal(keep, [1.0, 1.0, 1.0])
    for eta in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            threshold_mask(Tensor([[0.2, 0.5]]), eta)


def test_threshold_mask_monotone_in_eta(rng):
    for _ in range(1000):
        normalized = normalize_attention(Tensor(rng.uniform(0, 3, (1, 8))))
        eta_low, eta_high = sorted(rng.uniform(0.01, 0.99, 2))
        low, _ = threshold_mask(normalized, eta_low)
        high, _ = threshold_mask(normalized, eta_high)
        assert numpy.all(high <= low)
        assert high.max() == 1.0


def test_run_expert_invariants(rng):
    for _ in range(10):
        graph, params = _toy(rng)
        out = run_expert(graph, numpy.ones(4), params, 2, 0.5)
        assert abs(out.probs.data.sum() - 1.0) < 1e-12
        assert numpy.all(out.importance.data >= 0)
        assert numpy.all((out.normalized.data >= 0) & (out.normalized.data <= 1))
        npt.assert_array_equal(out.keep_mask, (out.normalized.data[0] >= 0.5).astype(float))
        npt.assert_array_equal(out.masked_attention.data[0], out.normalized.data[0] * out.keep_mask)
        assert numpy.all(out.masked_attention.data[0][out.keep_mask == 0] == 0.0)
        assert out.target == int(numpy.argmax(out.probs.data))


def test_attention_invariant_under_logit_shift(rng):
    graph, params = _toy(rng)
    base = run_expert(graph, numpy.ones(4), params, 2, 0.5, target=1)
    params.head_bias.data[...] += 3.0
    shifted = run_expert(graph, numpy.ones(4), params, 2, 0.5, target=1)
    for name in ("probs", "importance", "normalized", "masked_attention"):
        npt.assert_allclose(getattr(shifted, name).data, getattr(base, name).data, atol=1e-12)


def test_static_keep_bypasses_attention(rng):
    graph, params = _toy(rng)
    out = run_expert(graph, numpy.ones(4), params, 2, 0.5, static_keep=[1, 0, 1, 0])
    npt.assert_array_equal(out.keep_mask, [1.0, 0.0, 1.0, 0.0])
    npt.assert_array_equal(out.normalized.data, [[1.0, 0.0, 1.0, 0.0]])
    npt.assert_array_equal(out.masked_attention.data, [[1.0, 0.0, 1.0, 0.0]])
