"""The DSC layer: factorised forward passes, dense reference, spectral checks.

A layer computes ``y = x W0 + x dW(x)`` where ``dW(x)`` is a sparse,
magnitude-gated combination of rank-1 atoms ``outer(u_j, v_j)``. Two
variants exist:

* basic: global scalar scale ``gamma``, routing on the raw input;
* refined: per-output-channel scale vector, routing on the layer-normalised
  input (the projection onto atoms still uses the raw input).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dsc.basis import BasisBank, project_rows
from dsc.numeric import as_matrix, spectral_norm
from dsc.router import RouterParams, RoutingOutcome, route

__all__ = [
    "DscConfig",
    "DscLayer",
    "ForwardCache",
    "SpectralCheck",
    "StarDecomposition",
    "assemble_delta_w",
    "forward",
    "forward_basic",
    "forward_dense_oracle",
    "forward_refined",
    "forward_with_cache",
    "star_decompose",
    "verify_spectral_bound",
]

SCALAR = "scalar"
CHANNELWISE = "channelwise"


@dataclass
class DscConfig:
    d: int
    M: int
    K: int
    gamma_mode: str = CHANNELWISE
    tau: float = 10.0
    eps_norm: float = 1e-6
    eps_div: float = 1e-6
    mu: float = 1.0
    lambda_aux: float = 0.01
    lambda_budget: float = 0.01
    lambda_frame: float = 0.001
    lambda_z: float = 1e-4
    ln_eps: float = 1e-5
    use_layernorm: bool | None = None  # None: on for channelwise, off for scalar

    def __post_init__(self):
        if self.gamma_mode not in (SCALAR, CHANNELWISE):
            raise ValueError(f"gamma_mode must be {SCALAR!r} or {CHANNELWISE!r}")
        if not 1 <= self.K <= self.M:
            raise ValueError(f"need 1 <= K <= M, got K={self.K}, M={self.M}")
        if self.d < 2:
            raise ValueError("d must be at least 2")
        lams = (self.lambda_aux, self.lambda_budget, self.lambda_frame, self.lambda_z)
        if min(lams) < 0:
            raise ValueError("regulariser weights must be non-negative")
        if self.use_layernorm is None:
            self.use_layernorm = self.gamma_mode == CHANNELWISE
        if self.gamma_mode == CHANNELWISE and not self.use_layernorm:
            raise ValueError("the channelwise variant always normalises the routing input")


@dataclass
class DscLayer:
    config: DscConfig
    bank: BasisBank
    router: RouterParams
    gamma: float | np.ndarray
    W0: np.ndarray

    def __post_init__(self):
        c = self.config
        if self.bank.U_hat.shape != (c.M, c.d):
            raise ValueError(f"bank shape {self.bank.U_hat.shape} != {(c.M, c.d)}")
        if self.router.W_r.shape != (c.d, c.M):
            raise ValueError(f"router shape {self.router.W_r.shape} != {(c.d, c.M)}")
        self.W0 = as_matrix(self.W0, c.d, c.d)
        if c.gamma_mode == SCALAR:
            self.gamma = self.W0.dtype.type(self.gamma)
            if self.gamma < 0:
                raise ValueError("scalar gamma must be non-negative")
        else:
            self.gamma = np.asarray(self.gamma, dtype=self.W0.dtype).reshape(c.d)

    @property
    def scalar(self) -> bool:
        return self.config.gamma_mode == SCALAR

    @classmethod
    def init(cls, config: DscConfig, rng: np.random.Generator, router_std: float | None = None) -> "DscLayer":
        d, M = config.d, config.M
        bank = BasisBank.random(M, d, rng, config.eps_norm)
        std = 1.0 / np.sqrt(d) if router_std is None else router_std
        router = RouterParams(
            rng.normal(0.0, std, (d, M)), tau=config.tau, eps_div=config.eps_div,
            use_layernorm=config.use_layernorm, ln_eps=config.ln_eps,
        )
        W0 = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        gamma = 1.0 if config.gamma_mode == SCALAR else np.zeros(d)
        return cls(config, bank, router, gamma, W0)

    def gamma_bound(self) -> float:
        return float(self.gamma) if self.scalar else float(np.max(np.abs(self.gamma)))


@dataclass
class ForwardCache:
    X: np.ndarray
    outcome: RoutingOutcome
    U: np.ndarray  # projected banks
    V: np.ndarray
    UI: np.ndarray  # (B, K, d)
    VI: np.ndarray
    c_lat: np.ndarray  # (B, K)
    y_pre: np.ndarray  # dynamic branch before gamma, (B, d)
    Y: np.ndarray = field(repr=False)


def forward_with_cache(layer: DscLayer, X) -> ForwardCache:
    X = as_matrix(X, cols=layer.config.d)
    out = route(layer.router, X, layer.config.K)
    U, V = project_rows(layer.bank)
    UI, VI = U[out.indices], V[out.indices]
    c_lat = np.einsum("bd,bkd->bk", X, UI)
    y_pre = np.einsum("bk,bkd->bd", c_lat * out.z_hat, VI)
    y_dyn = y_pre * layer.gamma
    Y = X @ layer.W0 + y_dyn
    return ForwardCache(X, out, U, V, UI, VI, c_lat, y_pre, Y)


def forward_basic(layer: DscLayer, X) -> np.ndarray:
    if not layer.scalar:
        raise ValueError("forward_basic needs a scalar gamma")
    return forward_with_cache(layer, X).Y


def forward_refined(layer: DscLayer, X) -> np.ndarray:
    if layer.scalar:
        raise ValueError("forward_refined needs a channelwise gamma")
    return forward_with_cache(layer, X).Y


def forward(layer: DscLayer, X) -> np.ndarray:
    return forward_with_cache(layer, X).Y


def _delta_w(layer: DscLayer, U, V, idx, z, with_gamma: bool = True) -> np.ndarray:
    dW = np.zeros((layer.config.d, layer.config.d), dtype=U.dtype)
    for j, c in zip(idx, z):
        dW += c * np.outer(U[j], V[j])
    if not with_gamma:
        return dW
    return dW * layer.gamma  # scalar, or broadcast over output columns == dW @ diag(gamma)


def assemble_delta_w(layer: DscLayer, x) -> np.ndarray:
    """Materialise the effective d x d update (gamma folded in) for one token."""
    x = as_matrix(np.atleast_2d(x), 1, layer.config.d)
    out = route(layer.router, x, layer.config.K)
    U, V = project_rows(layer.bank)
    return _delta_w(layer, U, V, out.indices[0], out.z_hat[0])


def forward_dense_oracle(layer: DscLayer, X) -> np.ndarray:
    """Brute-force reference: build each token's dW explicitly and multiply."""
    X = as_matrix(X, cols=layer.config.d)
    if layer.config.d > 256:
        raise ValueError("dense oracle is meant for d <= 256")
    U, V = project_rows(layer.bank)
    out = route(layer.router, X, layer.config.K)
    Y = X @ layer.W0
    for b in range(X.shape[0]):
        Y[b] += X[b] @ _delta_w(layer, U, V, out.indices[b], out.z_hat[b])
    return Y


@dataclass
class StarDecomposition:
    s: float  # radial magnitude, in [0, 1)
    P: np.ndarray  # point in the convex hull of the active atoms
    weights: np.ndarray  # convex coefficients over the active atoms
    indices: np.ndarray


def star_decompose(layer: DscLayer, x) -> StarDecomposition:
    x = as_matrix(np.atleast_2d(x), 1, layer.config.d)
    out = route(layer.router, x, layer.config.K)
    z = out.z_hat[0]
    s = float(z.sum())
    if s == 0.0:
        raise ValueError("token sits at the star center: dW = 0, decomposition is degenerate")
    w = z / s
    U, V = project_rows(layer.bank)
    P = _delta_w(layer, U, V, out.indices[0], w, with_gamma=False)
    return StarDecomposition(s, P, w, out.indices[0])


@dataclass
class SpectralCheck:
    norm: float
    bound: float
    ok: bool

    @property
    def margin(self) -> float:
        return self.bound - self.norm


def verify_spectral_bound(layer: DscLayer, X, bound: float | None = None) -> list[SpectralCheck]:
    """Check ||dW||_2 against the scale bound for every token of ``X``.

    Scalar mode requires a strict ``norm < gamma``; channelwise mode requires
    ``norm <= max|gamma_i|``. ``bound`` overrides the bound (used for fault
    injection in the verification suite).
    """
    X = as_matrix(X, cols=layer.config.d)
    U, V = project_rows(layer.bank)
    out = route(layer.router, X, layer.config.K)
    bnd = layer.gamma_bound() if bound is None else float(bound)
    report = []
    for b in range(X.shape[0]):
        dW = _delta_w(layer, U, V, out.indices[b], out.z_hat[b])
        norm = spectral_norm(dW) if np.any(dW) else 0.0
        ok = norm < bnd if layer.scalar else norm <= bnd
        report.append(SpectralCheck(norm, bnd, bool(ok)))
    return report


def lipschitz_estimate(layer: DscLayer) -> float:
    """sigma_max(W0) + scale bound: local Lipschitz constant of the whole block."""
    return spectral_norm(layer.W0) + layer.gamma_bound()
