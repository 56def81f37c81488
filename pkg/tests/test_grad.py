import numpy as np
import pytest

from dsc.basis import frame_potential_grad
from dsc.grad import (
    PARAM_GROUPS,
    GuardError,
    backward,
    compute_guard,
    finite_diff_check,
    objective,
)
from dsc.layer import DscConfig, DscLayer, forward_with_cache
from dsc.numeric import layer_norm, softplus
from dsc.router import RouterParams, route
from dsc.verify import random_layer

ALL_ON = (0.5, 0.7, 0.3, 0.2)


def instance(mode, seed=0, d=6, M=10, K=3, B=4):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, d, M, K, mode, router_std=1.0)
    layer.config.mu = K * 10.0 + 1.0  # above any reachable S: the budget hinge stays active
    return layer, rng.standard_normal((B, d))


@pytest.mark.parametrize("mode", ["scalar", "channelwise"])
@pytest.mark.parametrize("lambdas", [(0.0, 0.0, 0.0, 0.0), ALL_ON], ids=["task", "full"])
def test_fd_all_groups(mode, lambdas):
    layer, X = instance(mode)
    assert compute_guard(layer, forward_with_cache(layer, X)).passes()
    rep = finite_diff_check(layer, X, 1e-5, lambdas=lambdas)
    assert set(rep.max_rel_err) == set(PARAM_GROUPS)
    assert rep.ok(1e-6), rep.max_rel_err
    assert not rep.skipped
    assert not rep.truncation_warning


def test_gamma_probe_is_nearly_exact():
    layer, X = instance("channelwise", seed=3)
    rep = finite_diff_check(layer, X, 1e-5, groups=("gamma",), lambdas=(0, 0, 0, 0))
    assert rep.worst < 1e-9


def test_frame_only_gradient_matches_standalone():
    layer, X = instance("scalar", seed=5)
    g = backward(layer, X, np.zeros((4, 6)), lambdas=(0.0, 0.0, 1.0, 0.0))
    gU, gV = frame_potential_grad(layer.bank)
    np.testing.assert_allclose(g.dU_hat, gU, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(g.dV_hat, gV, rtol=1e-13, atol=1e-15)
    np.testing.assert_array_equal(g.dW_r, 0.0)


def test_zero_channel_scale_blocks_bank_gradients():
    layer = DscLayer.init(DscConfig(d=5, M=7, K=2), np.random.default_rng(1))
    rng = np.random.default_rng(2)
    X, G = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    cache = forward_with_cache(layer, X)
    g = backward(layer, X, G, cache=cache)
    np.testing.assert_array_equal(g.dU_hat, 0.0)
    np.testing.assert_array_equal(g.dV_hat, 0.0)
    np.testing.assert_array_equal(g.dW_r, 0.0)
    np.testing.assert_allclose(g.dGamma, np.sum(G * cache.y_pre, axis=0))


def _dense_reference(U_hat, V_hat, W_r, gamma, W0, X, ln):
    """Independent forward with every atom active (K = M): no selection at all."""
    U = U_hat / np.maximum(1e-6, np.linalg.norm(U_hat, axis=1, keepdims=True))
    V = V_hat / np.maximum(1e-6, np.linalg.norm(V_hat, axis=1, keepdims=True))
    xr = layer_norm(X) if ln else X
    alpha = softplus(np.clip(xr @ W_r, -10, 10))
    S = alpha.sum(axis=1, keepdims=True)
    z = alpha / (S + 1e-6) * np.tanh(S)
    Y = X @ W0
    for b in range(X.shape[0]):
        dW = sum(z[b, j] * np.outer(U[j], V[j]) for j in range(U.shape[0]))
        Y[b] += X[b] @ dW * gamma
    return Y


@pytest.mark.parametrize("mode", ["scalar", "channelwise"])
def test_all_atoms_active_matches_dense_reference(mode):
    rng = np.random.default_rng(11)
    layer = random_layer(rng, 4, 5, 5, mode, router_std=0.8)
    X = rng.standard_normal((3, 4))
    G = rng.standard_normal((3, 4))
    g = backward(layer, X, G).as_dict()
    params = {
        "U_hat": layer.bank.U_hat, "V_hat": layer.bank.V_hat, "W_r": layer.router.W_r,
        "gamma": np.atleast_1d(np.asarray(layer.gamma, float)), "W0": layer.W0, "X": X,
    }

    def f(p):
        gam = p["gamma"][0] if layer.scalar else p["gamma"]
        return np.sum(G * _dense_reference(p["U_hat"], p["V_hat"], p["W_r"], gam, p["W0"], p["X"], not layer.scalar))

    h = 1e-6
    for name, arr in params.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd[idx] = (f(plus) - f(minus)) / (2 * h)
        np.testing.assert_allclose(np.atleast_1d(g[name]).reshape(fd.shape), fd, rtol=1e-6, atol=1e-8, err_msg=name)


def test_guard_rejects_tie():
    layer, X = instance("scalar")
    layer.router = RouterParams(np.zeros((6, 10)))  # every score equal: top-K boundary is a tie
    with pytest.raises(GuardError, match="top-K"):
        backward(layer, X, np.ones((4, 6)))


def test_branch_flips_are_skipped_not_failed():
    layer, X = instance("scalar", seed=2)
    r = route(layer.router, X, 3).r_raw
    j = int(np.argmax(np.abs(r[0])))
    # put one raw logit a hair inside the clamp edge
    layer.router.W_r[:, j] *= (10.0 - 1e-8) / abs(r[0, j])
    rep = finite_diff_check(layer, X, 1e-5, lambdas=(0, 0, 0, 0))
    assert any(reason == "clamp mask changed" for _, _, reason in rep.skipped)
    assert rep.ok(1e-6)


def test_large_step_flags_truncation():
    layer, X = instance("scalar")
    assert finite_diff_check(layer, X, 1e-1, groups=("gamma",)).truncation_warning


def test_frozen_selection_under_small_perturbations():
    layer, X = instance("channelwise", seed=4)
    cache = forward_with_cache(layer, X)
    margin = compute_guard(layer, cache).min_topk_margin
    rng = np.random.default_rng(0)
    for _ in range(50):
        D = rng.standard_normal(layer.router.W_r.shape)
        # alpha is 1-Lipschitz in r, and |dr| <= |x_route| |dW_r|
        scale = 0.49 * margin / (np.abs(cache.outcome.x_route).sum(axis=1).max() * np.abs(D).max())
        out = route(RouterParams(layer.router.W_r + scale * D, use_layernorm=True), X, 3)
        np.testing.assert_array_equal(out.indices, cache.outcome.indices)


def test_loss_breakdown_recomposes():
    layer, X = instance("scalar", seed=7)
    T = np.random.default_rng(1).standard_normal(X.shape)
    loss, _, _ = objective(layer, X, T, lambdas=ALL_ON)
    la, lb, lf, lz = ALL_ON
    assert loss.total == loss.task + la * loss.aux + lb * loss.budget + lf * loss.frame + lz * loss.z
    assert loss.budget > 0
