"""Randomised invariant suites shared by the ``verify`` command and the tests.

Each suite takes a generator and returns a :class:`SuiteResult`; a suite
passes when ``violations`` is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dsc.basis import BasisBank, frame_potential_grad, frame_potential_loss, project_matrix, welch_floor
from dsc.layer import CHANNELWISE, SCALAR, DscConfig, DscLayer, assemble_delta_w, forward, forward_dense_oracle, star_decompose, verify_spectral_bound
from dsc.router import RouterParams, route

SUITES = ("oracle-equivalence", "contraction", "spectral-bound", "star-decomposition", "welch-floor", "frame-loss")
FAULTS = ("none", "spectral_bound")


@dataclass
class SuiteResult:
    suite: str
    cases: int
    worst: float  # suite-specific worst-case statistic
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def random_layer(rng: np.random.Generator, d: int, M: int, K: int, mode: str, router_std: float | None = None) -> DscLayer:
    layer = DscLayer.init(DscConfig(d=d, M=M, K=K, gamma_mode=mode), rng, router_std=router_std)
    layer.gamma = rng.uniform(0.2, 2.0) if mode == SCALAR else rng.uniform(-2.0, 2.0, d)
    return layer


def saturated_layer(rng: np.random.Generator, d: int, M: int, K: int, mode: str) -> DscLayer:
    """Worst case for the norm bound: every atom identical, every logit pinned at +tau."""
    layer = random_layer(rng, d, M, K, mode)
    u, v = rng.standard_normal(d), rng.standard_normal(d)
    layer.bank = BasisBank(np.tile(u, (M, 1)), np.tile(v, (M, 1)), layer.bank.eps_norm)
    W_r = np.tile(1e6 * np.sign(rng.standard_normal((d, 1))), (1, M))
    layer.router = RouterParams(W_r, tau=layer.router.tau, eps_div=layer.router.eps_div,
                                use_layernorm=layer.router.use_layernorm, ln_eps=layer.router.ln_eps)
    return layer


def saturating_inputs(layer: DscLayer, X: np.ndarray) -> np.ndarray:
    """Flip token signs so a :func:`saturated_layer` router lands on +tau.

    Routing inputs are odd in ``x`` (raw or layer-normalised), so ``-x``
    mirrors every logit.
    """
    r = route(layer.router, X, layer.config.K).r_raw[:, 0]
    return X * np.where(r < 0, -1.0, 1.0)[:, None]


def _dims(rng, d_max: int, M_max: int, K_max: int) -> tuple[int, int, int]:
    d = int(rng.integers(2, d_max + 1))
    K = int(rng.integers(1, K_max + 1))
    M = int(rng.integers(K, max(K, M_max) + 1))
    return d, M, K


def oracle_equivalence(rng, n_configs: int = 50, batch: int = 8, d_max: int = 64, M_max: int = 128, K_max: int = 8, tol: float = 1e-10) -> SuiteResult:
    res = SuiteResult("oracle-equivalence", 0, 0.0)
    for i in range(n_configs):
        mode = (SCALAR, CHANNELWISE)[i % 2]
        d, M, K = _dims(rng, d_max, M_max, K_max)
        layer = random_layer(rng, d, M, K, mode)
        X = rng.standard_normal((batch, d))
        err = float(np.max(np.abs(forward(layer, X) - forward_dense_oracle(layer, X))))
        res.cases += 1
        res.worst = max(res.worst, err)
        if not err < tol:
            res.violations.append(f"{mode} d={d} M={M} K={K}: max abs err {err:.3e}")
    return res


def contraction(rng, tokens: int = 10_000, d: int = 16, M: int = 32, K: int = 4, tol: float = 1e-12) -> SuiteResult:
    """sum(z) < tanh(S) < 1 strictly, and sum(z) == S/(S+eps) tanh(S).

    tanh(S) rounds to 1.0 in float64 once S exceeds ~19, so ``tanh(S) < 1``
    is checked through the exact gap ``1 - tanh(S) = 2 / (1 + exp(2S))``.
    """
    res = SuiteResult("contraction", tokens, 0.0)
    scales = np.geomspace(1e-4, 1e4, 8)
    per = -(-tokens // len(scales))
    for scale in scales:
        params = RouterParams(rng.normal(0.0, scale / np.sqrt(d), (d, M)))
        X = rng.standard_normal((per, d))
        out = route(params, X, K)
        total = out.z_hat.sum(axis=1)
        t = np.tanh(out.S)
        gap = 2.0 / (1.0 + np.exp(np.minimum(2.0 * out.S, 700.0)))
        expect = out.S / (out.S + params.eps_div) * t
        dev = np.abs(total - expect)
        res.worst = max(res.worst, float(dev.max()))
        bad = ~(total < t) | ~(gap > 0) | ~(total < 1.0) | (dev > tol)
        for b in np.flatnonzero(bad)[:5]:
            res.violations.append(f"scale={scale:.1e} S={out.S[b]:.6g} sum={total[b]!r} tanh={t[b]!r}")
    return res


def spectral_bound(rng, layers: int = 20, batch: int = 50, d_max: int = 16, M_max: int = 32, K_max: int = 8, fault: str = "none") -> SuiteResult:
    """Random and saturated layers; ``fault='spectral_bound'`` halves the bound to prove the check bites."""
    res = SuiteResult("spectral-bound", 0, -np.inf)
    for i in range(layers):
        mode = (SCALAR, CHANNELWISE)[i % 2]
        d, M, K = _dims(rng, d_max, M_max, K_max)
        X = rng.standard_normal((batch, d))
        if i % 4 >= 2:
            layer = saturated_layer(rng, d, M, K, mode)
            X = saturating_inputs(layer, X)
        else:
            layer = random_layer(rng, d, M, K, mode)
        bound = 0.5 * layer.gamma_bound() if fault == "spectral_bound" else None
        checks = verify_spectral_bound(layer, X, bound=bound)
        res.cases += len(checks)
        for c in checks:
            rel = c.norm / c.bound if c.bound else np.inf
            res.worst = max(res.worst, rel)
            if not c.ok:
                res.violations.append(f"verify_spectral_bound: {mode} norm {c.norm:.6g} vs bound {c.bound:.6g}")
    return res


def star_decomposition(rng, tokens: int = 200, d: int = 8, M: int = 16, K: int = 4, tol: float = 1e-12) -> SuiteResult:
    res = SuiteResult("star-decomposition", 0, 0.0)
    for i in range(tokens):
        mode = (SCALAR, CHANNELWISE)[i % 2]
        layer = random_layer(rng, d, M, K, mode, router_std=float(rng.choice([1e-3, 0.3, 30.0])))
        x = rng.standard_normal(d)
        dec = star_decompose(layer, x)
        rebuilt = dec.s * dec.P * layer.gamma
        err = float(np.max(np.abs(rebuilt - assemble_delta_w(layer, x))))
        res.cases += 1
        res.worst = max(res.worst, err)
        problems = []
        if not 0.0 <= dec.s < 1.0:
            problems.append(f"s={dec.s!r} outside [0,1)")
        if np.any(dec.weights < 0) or abs(dec.weights.sum() - 1.0) > tol:
            problems.append("weights not convex")
        if err > tol:
            problems.append(f"reconstruction err {err:.3e}")
        if problems:
            res.violations.append(f"{mode} token {i}: " + "; ".join(problems))
    return res


def welch_floor_suite(rng, shapes=((4, 2), (8, 3), (16, 4)), trials: int = 20, descent_steps: int = 300, tol: float = 1e-9) -> SuiteResult:
    """Frame loss of unit-norm banks never dips below the Welch floor, even after descent on it."""
    res = SuiteResult("welch-floor", 0, np.inf)
    for M, d in shapes:
        floor = welch_floor(M, d)
        for _ in range(trials):
            bank = BasisBank.random(M, d, rng)
            for step in range(descent_steps + 1):
                loss = float(frame_potential_loss(bank))
                if step % 50 == 0 or step == descent_steps:
                    res.cases += 1
                    res.worst = min(res.worst, loss - floor)
                    if loss < floor - tol:
                        res.violations.append(f"M={M} d={d}: loss {loss:.12g} < floor {floor:.12g}")
                gU, gV = frame_potential_grad(bank)
                bank = BasisBank(bank.U_hat - 0.05 * gU, bank.V_hat - 0.05 * gV, bank.eps_norm)
    return res


def frame_loss(rng, trials: int = 50, tol: float = 1e-10) -> SuiteResult:
    """Loss matches a pairwise recount and is invariant to row permutations."""
    res = SuiteResult("frame-loss", 0, 0.0)
    for _ in range(trials):
        M, d = int(rng.integers(2, 24)), int(rng.integers(2, 12))
        bank = BasisBank.random(M, d, rng)
        loss = float(frame_potential_loss(bank))
        recount = 0.0
        for W in (bank.U_hat, bank.V_hat):
            P = project_matrix(W, bank.eps_norm)
            recount += sum(float(P[i] @ P[j]) ** 2 for i in range(M) for j in range(M) if i != j)
        perm = rng.permutation(M)
        permuted = float(frame_potential_loss(BasisBank(bank.U_hat[perm], bank.V_hat[perm], bank.eps_norm)))
        err = max(abs(loss - recount), abs(loss - permuted)) / max(1.0, recount)
        res.cases += 1
        res.worst = max(res.worst, err)
        if err > tol or loss < 0:
            res.violations.append(f"M={M} d={d}: loss {loss!r} recount {recount!r} permuted {permuted!r}")
    return res


def run_all(rng, *, n_configs: int = 50, tokens: int = 10_000, fault: str = "none") -> list[SuiteResult]:
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    return [
        oracle_equivalence(rng, n_configs=n_configs),
        contraction(rng, tokens=tokens),
        spectral_bound(rng, fault=fault),
        star_decomposition(rng),
        welch_floor_suite(rng),
        frame_loss(rng),
    ]
