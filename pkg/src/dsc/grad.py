"""Reverse-mode gradients for the DSC layer and its regularisers, plus a
central-difference checker.

Top-K selection is treated as locally constant: the gradient only reaches the
selected ``alpha`` entries. That is exact wherever the selection does not
change under small perturbations, which :class:`DifferentiabilityGuard`
quantifies.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from dsc import router as rt
from dsc.basis import frame_potential_loss, offdiag_gram, project_backward
from dsc.layer import DscLayer, ForwardCache, forward_with_cache
from dsc.numeric import as_matrix, layer_norm_backward, real_array

__all__ = [
    "FDReport",
    "DifferentiabilityGuard",
    "GradBundle",
    "GuardError",
    "LossBreakdown",
    "backward",
    "compute_guard",
    "finite_diff_check",
    "objective",
    "objective_value",
]

PARAM_GROUPS = ("U_hat", "V_hat", "W_r", "gamma", "W0", "X")


class GuardError(ValueError):
    pass


@dataclass
class LossBreakdown:
    task: float
    aux: float = 0.0
    budget: float = 0.0
    frame: float = 0.0
    z: float = 0.0
    total: float = 0.0


@dataclass
class GradBundle:
    dU_hat: np.ndarray
    dV_hat: np.ndarray
    dW_r: np.ndarray
    dGamma: float | np.ndarray
    dX: np.ndarray
    dBase: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "U_hat": self.dU_hat, "V_hat": self.dV_hat, "W_r": self.dW_r,
            "gamma": np.asarray(self.dGamma, dtype=np.float64), "W0": self.dBase, "X": self.dX,
        }


@dataclass
class DifferentiabilityGuard:
    min_topk_margin: float
    min_norm_margin: float
    clamp_margin: float

    def violations(self, threshold: float = 0.0) -> list[str]:
        bad = []
        if not self.min_topk_margin > threshold:
            bad.append(f"top-K tie boundary (margin {self.min_topk_margin:.3g})")
        if not self.min_norm_margin > threshold:
            bad.append(f"projection kink at eps_norm (margin {self.min_norm_margin:.3g})")
        if not self.clamp_margin > threshold:
            bad.append(f"logit clamp boundary (margin {self.clamp_margin:.3g})")
        return bad

    def passes(self, threshold: float = 0.0) -> bool:
        return not self.violations(threshold)


def compute_guard(layer: DscLayer, cache: ForwardCache) -> DifferentiabilityGuard:
    out = cache.outcome
    K, M = layer.config.K, layer.config.M
    if K < M:
        srt = -np.sort(-out.alpha, axis=1)
        topk = float(np.min(srt[:, K - 1] - srt[:, K]))
    else:
        topk = np.inf
    eps = layer.bank.eps_norm
    norms = np.concatenate([np.linalg.norm(layer.bank.U_hat, axis=1), np.linalg.norm(layer.bank.V_hat, axis=1)])
    norm_margin = float(np.min(np.abs(norms - eps)))
    clamp = float(np.min(np.abs(layer.router.tau - np.abs(out.r_raw))))
    return DifferentiabilityGuard(topk, norm_margin, clamp)


def _lambdas(layer: DscLayer, lambdas) -> tuple[float, float, float, float]:
    c = layer.config
    if lambdas is None:
        return c.lambda_aux, c.lambda_budget, c.lambda_frame, c.lambda_z
    return tuple(float(v) for v in lambdas)


def regularizers(layer: DscLayer, cache: ForwardCache) -> tuple[float, float, float, float]:
    out = cache.outcome
    frame = frame_potential_loss(layer.bank) if layer.config.M >= 2 else 0.0
    return (
        rt.aux_load_balance_loss(out),
        rt.budget_loss(out, layer.config.mu),
        frame,
        rt.z_loss(out),
    )


def backward(
    layer: DscLayer,
    X,
    upstream,
    *,
    lambdas=(0.0, 0.0, 0.0, 0.0),
    cache: ForwardCache | None = None,
    check_guard: bool = True,
) -> GradBundle:
    """Gradient of ``<upstream, Y> + sum_i lambda_i * reg_i`` w.r.t. every input.

    ``lambdas`` orders the weights as (aux, budget, frame, z); ``None`` takes
    them from the layer config.
    """
    if cache is None:
        cache = forward_with_cache(layer, X)
    if check_guard:
        bad = compute_guard(layer, cache).violations()
        if bad:
            raise GuardError("gradient undefined at " + "; ".join(bad))
    la, lb, lf, lz = _lambdas(layer, lambdas)
    cfg, out = layer.config, cache.outcome
    X = cache.X
    dY = as_matrix(upstream, *cache.Y.shape)

    dW0 = X.T @ dY
    dX = dY @ layer.W0.T

    if layer.scalar:
        dgamma = float(np.sum(dY * cache.y_pre))
    else:
        dgamma = np.sum(dY * cache.y_pre, axis=0)
    dy_pre = dY * layer.gamma

    c_mix = cache.c_lat * out.z_hat
    dc_mix = np.einsum("bd,bkd->bk", dy_pre, cache.VI)
    dVI = c_mix[:, :, None] * dy_pre[:, None, :]
    dc_lat = dc_mix * out.z_hat
    dz = dc_mix * cache.c_lat
    dUI = dc_lat[:, :, None] * X[:, None, :]
    dX += np.einsum("bk,bkd->bd", dc_lat, cache.UI)

    flat = out.indices.ravel()
    dU = np.zeros_like(cache.U)
    dV = np.zeros_like(cache.V)
    np.add.at(dU, flat, dUI.reshape(-1, cfg.d))
    np.add.at(dV, flat, dVI.reshape(-1, cfg.d))
    if lf:
        dU += lf * 4.0 * offdiag_gram(cache.U) @ cache.U
        dV += lf * 4.0 * offdiag_gram(cache.V) @ cache.V
    dU_hat = project_backward(layer.bank.U_hat, dU, layer.bank.eps_norm)
    dV_hat = project_backward(layer.bank.V_hat, dV, layer.bank.eps_norm)

    dphi = rt.gate_backward(out.phi, out.S, dz, cfg.eps_div)
    if lb:
        dphi += lb * rt.budget_loss_grad(out, cfg.mu)[:, None]
    dalpha = np.zeros_like(out.alpha)
    np.put_along_axis(dalpha, out.indices, dphi, axis=1)
    dr = rt.alpha_grad_to_logits(out, dalpha)
    if la:
        dr += la * rt.aux_load_balance_grad(out)
    if lz:
        dr += lz * rt.z_loss_grad(out)
    dr_raw = dr * rt.clamp_mask(out, layer.router.tau)
    dW_r = out.x_route.T @ dr_raw
    dxr = dr_raw @ layer.router.W_r.T
    if layer.router.use_layernorm:
        dX += layer_norm_backward(X, dxr, layer.router.ln_eps)
    else:
        dX += dxr

    return GradBundle(dU_hat, dV_hat, dW_r, dgamma, dX, dW0)


def _task(Y, target, task: str) -> tuple[float, np.ndarray]:
    diff = Y - target
    if task == "mse":
        return np.mean(diff * diff), 2.0 * diff / diff.size
    if task == "probe":
        return 0.5 * np.sum(diff * diff), diff
    raise ValueError(f"unknown task loss {task!r}")


def objective(layer: DscLayer, X, target, *, task: str = "mse", lambdas=None, check_guard: bool = False):
    """Total objective and its gradients: returns ``(LossBreakdown, GradBundle, cache)``."""
    cache = forward_with_cache(layer, X)
    la, lb, lf, lz = _lambdas(layer, lambdas)
    t, dY = _task(cache.Y, real_array(target), task)
    aux, bud, frame, z = regularizers(layer, cache)
    total = t + la * aux + lb * bud + lf * frame + lz * z
    grads = backward(layer, X, dY, lambdas=(la, lb, lf, lz), cache=cache, check_guard=check_guard)
    parts = (float(v) for v in (t, aux, bud, frame, z, total))
    return LossBreakdown(*parts), grads, cache


def objective_value(layer: DscLayer, X, target, *, task: str = "probe", lambdas=None) -> tuple[float, ForwardCache]:
    cache = forward_with_cache(layer, X)
    la, lb, lf, lz = _lambdas(layer, lambdas)
    t, _ = _task(cache.Y, real_array(target), task)
    aux, bud, frame, z = regularizers(layer, cache)
    return t + la * aux + lb * bud + lf * frame + lz * z, cache


# -- finite differences ------------------------------------------------------


def _get(layer: DscLayer, X: np.ndarray, group: str) -> np.ndarray:
    return {
        "U_hat": layer.bank.U_hat, "V_hat": layer.bank.V_hat, "W_r": layer.router.W_r,
        "W0": layer.W0, "X": X,
    }[group]


def _perturbed(layer: DscLayer, X: np.ndarray, group: str, flat_i: int, delta: float):
    lay = copy.deepcopy(layer)
    Xp = X.copy()
    if group == "gamma":
        if lay.scalar:
            lay.gamma = lay.gamma + delta
        else:
            lay.gamma = lay.gamma.copy()
            lay.gamma[flat_i] += delta
    else:
        _get(lay, Xp, group).reshape(-1)[flat_i] += delta
    return lay, Xp


def _same_branches(base: ForwardCache, other: ForwardCache, layer: DscLayer, lay: DscLayer) -> str | None:
    if not np.array_equal(base.outcome.indices, other.outcome.indices):
        return "top-K selection changed"
    tau = layer.router.tau
    if not np.array_equal(np.abs(base.outcome.r_raw) <= tau, np.abs(other.outcome.r_raw) <= tau):
        return "clamp mask changed"
    for a, b in ((layer.bank.U_hat, lay.bank.U_hat), (layer.bank.V_hat, lay.bank.V_hat)):
        eps = layer.bank.eps_norm
        if not np.array_equal(np.linalg.norm(a, axis=1) > eps, np.linalg.norm(b, axis=1) > eps):
            return "projection branch changed"
    if (base.outcome.S.mean() < layer.config.mu) != (other.outcome.S.mean() < lay.config.mu):
        return "budget hinge changed"
    return None


@dataclass
class FDReport:
    max_rel_err: dict[str, float]
    checked: dict[str, int]
    skipped: list[tuple[str, int, str]] = field(default_factory=list)
    truncation_warning: bool = False

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def ok(self, threshold: float = 1e-6) -> bool:
        return self.worst < threshold


def _widen(layer: DscLayer, dtype) -> DscLayer:
    lay = copy.deepcopy(layer)
    lay.bank.U_hat = lay.bank.U_hat.astype(dtype)
    lay.bank.V_hat = lay.bank.V_hat.astype(dtype)
    lay.router.W_r = lay.router.W_r.astype(dtype)
    lay.W0 = lay.W0.astype(dtype)
    lay.gamma = dtype(lay.gamma) if lay.scalar else lay.gamma.astype(dtype)
    return lay


def finite_diff_check(
    layer: DscLayer,
    X,
    h: float = 1e-5,
    *,
    target=None,
    lambdas=None,
    groups=PARAM_GROUPS,
    seed: int = 0,
    floor: float = 1e-8,
    extended: bool = True,
) -> FDReport:
    """Compare :func:`backward` against central differences of a probe loss.

    The probe loss is ``0.5 ||Y - target||^2`` plus the weighted
    regularisers; ``target`` defaults to a fixed random matrix. Differences
    are evaluated in ``np.longdouble`` when ``extended`` is set, which keeps
    the cancellation error of ``f(x+h) - f(x-h)`` well below the 1e-6 check
    on small gradient entries. Entries whose perturbation flips a discrete
    branch (top-K set, clamp mask, projection branch, budget hinge) are
    skipped and listed with the reason.
    """
    X = as_matrix(X, cols=layer.config.d)
    if target is None:
        target = np.random.default_rng(seed).standard_normal((X.shape[0], layer.config.d))
    target = as_matrix(target, *X.shape)
    lams = _lambdas(layer, lambdas)
    _, cache = objective_value(layer, X, target, lambdas=lams)
    grads = backward(layer, X, cache.Y - target, lambdas=lams, cache=cache, check_guard=False).as_dict()

    dtype = np.longdouble if extended else np.float64
    wide, Xw, Tw = _widen(layer, dtype), X.astype(dtype), target.astype(dtype)
    _, base = objective_value(wide, Xw, Tw, lambdas=lams)

    report = FDReport({}, {}, truncation_warning=h > 1e-3)
    for g in groups:
        analytic = np.atleast_1d(grads[g]).ravel()
        worst, n = 0.0, 0
        for i in range(analytic.size):
            lp, xp = _perturbed(wide, Xw, g, i, h)
            lm, xm = _perturbed(wide, Xw, g, i, -h)
            fp, cp = objective_value(lp, xp, Tw, lambdas=lams)
            fm, cm = objective_value(lm, xm, Tw, lambdas=lams)
            reason = _same_branches(base, cp, wide, lp) or _same_branches(base, cm, wide, lm)
            if reason:
                report.skipped.append((g, i, reason))
                continue
            num = float((fp - fm) / (2 * h))
            a = float(analytic[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
            n += 1
        report.max_rel_err[g] = worst
        report.checked[g] = n
    return report
