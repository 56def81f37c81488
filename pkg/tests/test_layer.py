import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsc.basis import project_rows
from dsc.layer import (
    DscConfig,
    DscLayer,
    assemble_delta_w,
    forward,
    forward_basic,
    forward_dense_oracle,
    forward_refined,
    lipschitz_estimate,
    star_decompose,
    verify_spectral_bound,
)
from dsc.numeric import layer_norm
from dsc.router import RouterParams, route
from dsc.verify import random_layer, saturated_layer, saturating_inputs


def make(d=4, M=6, K=2, mode="scalar", seed=0, **kw):
    rng = np.random.default_rng(seed)
    layer = DscLayer.init(DscConfig(d=d, M=M, K=K, gamma_mode=mode), rng, **kw)
    if mode == "channelwise":
        layer.gamma = rng.uniform(-1, 1, d)
    return layer, rng


def test_config_validation():
    with pytest.raises(ValueError):
        DscConfig(d=4, M=3, K=4)
    with pytest.raises(ValueError):
        DscConfig(d=4, M=3, K=1, gamma_mode="channelwise", use_layernorm=False)
    with pytest.raises(ValueError):
        DscConfig(d=4, M=3, K=1, lambda_aux=-1.0)
    assert DscConfig(d=4, M=3, K=1, gamma_mode="scalar").use_layernorm is False


def test_init_conventions():
    scalar, _ = make()
    assert scalar.gamma == 1.0
    ch = DscLayer.init(DscConfig(d=4, M=6, K=2), np.random.default_rng(0))
    np.testing.assert_array_equal(ch.gamma, 0.0)


def test_mode_specific_entry_points():
    s, rng = make()
    c, _ = make(mode="channelwise")
    X = rng.standard_normal((2, 4))
    forward_basic(s, X)
    forward_refined(c, X)
    with pytest.raises(ValueError):
        forward_basic(c, X)
    with pytest.raises(ValueError):
        forward_refined(s, X)
    with pytest.raises(ValueError):
        forward(s, rng.standard_normal((2, 5)))


@pytest.mark.parametrize("mode", ["scalar", "channelwise"])
def test_small_instance_matches_oracle(mode):
    layer, rng = make(mode=mode)
    X = rng.standard_normal((3, 4))
    np.testing.assert_allclose(forward(layer, X), forward_dense_oracle(layer, X), rtol=0, atol=1e-12)


def test_vanishing_routing_recovers_base():
    layer, rng = make()
    layer.router = RouterParams(np.full((4, 6), -1e4))
    X = np.abs(rng.standard_normal((5, 4))) + 0.1  # positive x so every logit hits -tau
    base = X @ layer.W0
    assert np.linalg.norm(forward(layer, X) - base) <= 1e-3 * np.linalg.norm(base)
    layer.gamma = 0.0
    np.testing.assert_array_equal(forward(layer, X), base)


def test_zero_channel_scale_is_identity():
    layer = DscLayer.init(DscConfig(d=5, M=7, K=3), np.random.default_rng(3))
    X = np.random.default_rng(4).standard_normal((6, 5))
    np.testing.assert_array_equal(forward_refined(layer, X), X @ layer.W0)


def test_constant_channel_vector_equals_scalar_with_ln_routing():
    ch, rng = make(mode="channelwise")
    ch.gamma = np.full(4, 0.7)
    sc = DscLayer(
        DscConfig(d=4, M=6, K=2, gamma_mode="scalar", use_layernorm=True),
        ch.bank, RouterParams(ch.router.W_r, use_layernorm=True), 0.7, ch.W0,
    )
    X = rng.standard_normal((5, 4))
    np.testing.assert_allclose(forward(ch, X), forward(sc, X), rtol=0, atol=1e-14)


def test_refined_projection_uses_raw_input():
    layer, rng = make(mode="channelwise")
    X = 5.0 * rng.standard_normal((3, 4)) + 2.0
    out = route(layer.router, X, 2)
    np.testing.assert_allclose(out.x_route, layer_norm(X))
    U, V = project_rows(layer.bank)
    expected = X @ layer.W0
    for b in range(3):
        for k, j in enumerate(out.indices[b]):
            expected[b] += out.z_hat[b, k] * (X[b] @ U[j]) * V[j] * layer.gamma
    np.testing.assert_allclose(forward(layer, X), expected, atol=1e-12)


def test_delta_w_single_atom():
    layer, rng = make(K=1)
    x = rng.standard_normal(4)
    dW = assemble_delta_w(layer, x)
    out = route(layer.router, x[None], 1)
    U, V = project_rows(layer.bank)
    j, c = out.indices[0, 0], out.z_hat[0, 0]
    assert np.linalg.matrix_rank(dW, tol=1e-10 * np.abs(dW).max()) == 1
    assert np.linalg.norm(dW, 2) == pytest.approx(c * np.linalg.norm(U[j]) * np.linalg.norm(V[j]))


def test_identity_base_rank_one_expansion():
    layer, rng = make(K=1)
    layer.W0 = np.eye(4)
    x = rng.standard_normal(4)
    out = route(layer.router, x[None], 1)
    U, V = project_rows(layer.bank)
    j, c = out.indices[0, 0], out.z_hat[0, 0]
    np.testing.assert_allclose(forward(layer, x[None])[0], x + c * (x @ U[j]) * V[j], atol=1e-14)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["scalar", "channelwise"]))
def test_rank_and_continuity(seed, mode):
    rng = np.random.default_rng(seed)
    d, M = int(rng.integers(2, 12)), int(rng.integers(2, 16))
    K = int(rng.integers(1, min(M, 8) + 1))
    layer = random_layer(rng, d, M, K, mode)
    X = rng.standard_normal((8, d))
    Y = forward(layer, X)
    out = route(layer.router, X, K)
    for b in range(8):
        dW = assemble_delta_w(layer, X[b])
        s = np.linalg.svd(dW, compute_uv=False)
        assert np.sum(s > 1e-10 * max(s[0], 1e-300)) <= K
        gap = np.linalg.norm(Y[b] - X[b] @ layer.W0)
        assert gap <= np.linalg.norm(X[b]) * layer.gamma_bound() * np.tanh(out.S[b]) * (1 + 1e-12)


def test_star_decomposition_examples():
    layer, rng = make(K=1)
    x = rng.standard_normal(4)
    dec = star_decompose(layer, x)
    U, V = project_rows(layer.bank)
    j = dec.indices[0]
    np.testing.assert_allclose(dec.P, np.outer(U[j], V[j]))
    assert dec.weights.tolist() == [1.0]

    # equal scores over K=2 -> midpoint of the two atoms
    layer, rng = make(K=2)
    layer.router = RouterParams(np.zeros((4, 6)))
    dec = star_decompose(layer, rng.standard_normal(4))
    U, V = project_rows(layer.bank)
    mid = 0.5 * (np.outer(U[0], V[0]) + np.outer(U[1], V[1]))
    np.testing.assert_allclose(dec.P, mid, atol=1e-15)


def test_star_center_is_rejected():
    # with a wide clamp, softplus underflows to exactly 0 and the token sits at the center
    layer, _ = make()
    layer.router = RouterParams(np.full((4, 6), -1e3), tau=1e4)
    with pytest.raises(ValueError, match="star center"):
        star_decompose(layer, np.ones(4))


@pytest.mark.parametrize("mode", ["scalar", "channelwise"])
def test_star_reconstruction(rng, mode):
    for _ in range(30):
        layer = random_layer(rng, 6, 9, 3, mode)
        x = rng.standard_normal(6)
        dec = star_decompose(layer, x)
        assert 0 <= dec.s < 1
        assert np.all(dec.weights >= 0) and abs(dec.weights.sum() - 1) <= 1e-12
        np.testing.assert_allclose(dec.s * dec.P * layer.gamma, assemble_delta_w(layer, x), atol=1e-12)


def test_spectral_bound_examples(rng):
    layer = random_layer(rng, 5, 8, 3, "scalar")
    layer.gamma = 0.5
    assert all(c.ok and c.norm < 0.5 for c in verify_spectral_bound(layer, rng.standard_normal((40, 5))))

    ch = random_layer(rng, 5, 8, 3, "channelwise")
    ch.gamma = np.array([0.1, -0.3, 0.2, 0.0, 0.05])
    assert all(c.ok and c.norm <= 0.3 for c in verify_spectral_bound(ch, rng.standard_normal((40, 5))))


@pytest.mark.parametrize("mode", ["scalar", "channelwise"])
def test_saturated_worst_case_approaches_bound(rng, mode):
    layer = saturated_layer(rng, 6, 10, 4, mode)
    X = saturating_inputs(layer, rng.standard_normal((20, 6)))
    out = route(layer.router, X, 4)
    for b, c in enumerate(verify_spectral_bound(layer, X)):
        assert c.ok
        S = out.S[b]
        if mode == "scalar":
            # identical atoms: the bound is reached up to the contraction factor
            assert c.norm == pytest.approx(layer.gamma * S / (S + 1e-6) * np.tanh(S), rel=1e-12)
            assert c.norm < layer.gamma


def test_fault_bound_is_reported_not_raised(rng):
    layer = saturated_layer(rng, 4, 6, 2, "scalar")
    X = saturating_inputs(layer, rng.standard_normal((5, 4)))
    checks = verify_spectral_bound(layer, X, bound=0.1 * layer.gamma)
    assert not any(c.ok for c in checks)
    assert all(c.margin < 0 for c in checks)


def test_lipschitz_estimate():
    layer, _ = make(mode="channelwise")
    assert lipschitz_estimate(layer) == pytest.approx(np.linalg.norm(layer.W0, 2) + np.max(np.abs(layer.gamma)))


def test_forward_does_not_mutate(rng):
    layer = random_layer(rng, 4, 6, 2, "channelwise")
    snap = copy.deepcopy(layer)
    forward(layer, rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(layer.bank.U_hat, snap.bank.U_hat)
    np.testing.assert_array_equal(layer.router.W_r, snap.router.W_r)
