"""Magnitude-gated simplex routing and the router-side regularisers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsc.numeric import as_matrix, layer_norm, logsumexp_rows, sigmoid, softmax_rows, softplus, top_k_rows

__all__ = [
    "RouterParams",
    "RoutingOutcome",
    "aux_load_balance_grad",
    "aux_load_balance_loss",
    "budget_loss",
    "budget_loss_grad",
    "gate_backward",
    "magnitude_gate",
    "route",
    "z_loss",
    "z_loss_grad",
]


@dataclass
class RouterParams:
    W_r: np.ndarray
    tau: float = 10.0
    eps_div: float = 1e-6
    use_layernorm: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.W_r = as_matrix(self.W_r)
        if self.tau <= 0 or self.eps_div <= 0:
            raise ValueError("tau and eps_div must be positive")


@dataclass
class RoutingOutcome:
    r_raw: np.ndarray  # (B, M)
    r: np.ndarray  # clamped
    alpha: np.ndarray
    indices: np.ndarray  # (B, K), ascending per row
    phi: np.ndarray  # (B, K)
    S: np.ndarray  # (B,)
    z_hat: np.ndarray  # (B, K)
    softmax_r: np.ndarray  # (B, M)
    x_route: np.ndarray  # routing input, after the optional layer norm

    @property
    def B(self) -> int:
        return self.r.shape[0]

    @property
    def M(self) -> int:
        return self.r.shape[1]


def magnitude_gate(phi: np.ndarray, eps_div: float) -> tuple[np.ndarray, np.ndarray]:
    """Split ``phi`` into simplex direction times ``tanh`` radius.

    Returns ``(z_hat, S)`` where ``S`` is the per-row sum of ``phi``.
    """
    S = phi.sum(axis=-1)
    scale = np.tanh(S) / (S + eps_div)
    return phi * scale[..., None], S


def gate_backward(phi: np.ndarray, S: np.ndarray, grad_z: np.ndarray, eps_div: float) -> np.ndarray:
    """Gradient w.r.t. ``phi`` of ``<grad_z, magnitude_gate(phi)>``."""
    t = np.tanh(S)
    denom = S + eps_div
    g = t / denom
    dg = ((1.0 - t * t) * denom - t) / (denom * denom)
    common = np.sum(grad_z * phi, axis=-1) * dg
    return grad_z * g[..., None] + common[..., None]


def route(params: RouterParams, X, K: int) -> RoutingOutcome:
    X = as_matrix(X)
    d, M = params.W_r.shape
    if X.shape[1] != d:
        raise ValueError(f"input width {X.shape[1]} does not match router width {d}")
    if not 1 <= K <= M:
        raise ValueError(f"K={K} must satisfy 1 <= K <= M={M}")
    xr = layer_norm(X, params.ln_eps) if params.use_layernorm else X
    r_raw = xr @ params.W_r
    r = np.clip(r_raw, -params.tau, params.tau)
    alpha = softplus(r)
    idx = top_k_rows(alpha, K)
    phi = np.take_along_axis(alpha, idx, axis=1)
    z_hat, S = magnitude_gate(phi, params.eps_div)
    return RoutingOutcome(
        r_raw=r_raw, r=r, alpha=alpha, indices=idx, phi=phi, S=S, z_hat=z_hat,
        softmax_r=softmax_rows(r), x_route=xr,
    )


def aux_load_balance_loss(outcome: RoutingOutcome, M: int | None = None) -> float:
    M = outcome.M if M is None else M
    P = outcome.softmax_r.mean(axis=0)
    return M * np.sum(P * P)


def aux_load_balance_grad(outcome: RoutingOutcome) -> np.ndarray:
    """d aux / d r (clamped logits), shape (B, M)."""
    s = outcome.softmax_r
    B, M = s.shape
    P = s.mean(axis=0)
    g = np.broadcast_to(2.0 * M * P / B, s.shape)
    return s * (g - np.sum(s * g, axis=1, keepdims=True))


def budget_loss(outcome: RoutingOutcome, mu: float) -> float:
    if mu <= 0:
        raise ValueError("mu must be positive")
    gap = max(0.0, mu - outcome.S.mean())
    return gap * gap


def budget_loss_grad(outcome: RoutingOutcome, mu: float) -> np.ndarray:
    """d budget / d S, shape (B,)."""
    gap = max(0.0, mu - outcome.S.mean())
    return np.full(outcome.B, -2.0 * gap / outcome.B)


def z_loss(outcome: RoutingOutcome) -> float:
    lse = logsumexp_rows(outcome.r)
    return np.mean(lse * lse)


def z_loss_grad(outcome: RoutingOutcome) -> np.ndarray:
    lse = logsumexp_rows(outcome.r)
    return (2.0 / outcome.B) * lse[:, None] * outcome.softmax_r


def clamp_mask(outcome: RoutingOutcome, tau: float) -> np.ndarray:
    # boundary counts as inside
    return (np.abs(outcome.r_raw) <= tau).astype(outcome.r_raw.dtype)


def alpha_grad_to_logits(outcome: RoutingOutcome, d_alpha: np.ndarray) -> np.ndarray:
    return d_alpha * sigmoid(outcome.r)
