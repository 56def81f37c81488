"""Small deterministic numerical substrate shared by every other module.

Matrices are plain ``float64`` numpy arrays in C (row-major) order; rows of a
basis matrix are atoms. Everything here is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SpectralNormError",
    "TopKResult",
    "as_matrix",
    "real_array",
    "layer_norm",
    "layer_norm_backward",
    "logsumexp",
    "logsumexp_rows",
    "sigmoid",
    "softmax_rows",
    "softplus",
    "spectral_norm",
    "top_k_rows",
    "top_k_select",
]

_FALLBACK_SEED = 0x5EED


class SpectralNormError(RuntimeError):
    """Power iteration did not converge; ``estimate`` holds the best value seen."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


@dataclass(frozen=True)
class TopKResult:
    indices: np.ndarray
    values: np.ndarray


def real_array(x) -> np.ndarray:
    """float64 array, except that extended-precision input stays extended."""
    a = np.asarray(x)
    return a if a.dtype == np.longdouble else a.astype(np.float64)


def as_matrix(a, rows: int | None = None, cols: int | None = None, checked: bool = True) -> np.ndarray:
    """Coerce ``a`` to a contiguous 2-D float array, validating shape and finiteness."""
    m = np.ascontiguousarray(real_array(a))
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if checked and not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    return m


def softplus(x):
    """ln(1 + e^x) without overflow; works on scalars and arrays."""
    x = real_array(x)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    x = real_array(x)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def logsumexp(r) -> float:
    r = np.asarray(r, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = r.max()
    return float(m + np.log(np.sum(np.exp(r - m))))


def logsumexp_rows(R: np.ndarray) -> np.ndarray:
    m = R.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(R - m), axis=1, keepdims=True)))[:, 0]


def softmax_rows(R: np.ndarray) -> np.ndarray:
    e = np.exp(R - R.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def top_k_select(scores, K: int) -> TopKResult:
    """K largest entries; ties go to the lowest index; indices returned ascending."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= K <= s.size:
        raise ValueError(f"K={K} must satisfy 1 <= K <= M={s.size}")
    idx = top_k_rows(s[None, :], K)[0]
    return TopKResult(indices=idx, values=s[idx])


def top_k_rows(A: np.ndarray, K: int) -> np.ndarray:
    """Row-wise version of :func:`top_k_select`, returning a (B, K) index array."""
    if not 1 <= K <= A.shape[1]:
        raise ValueError(f"K={K} must satisfy 1 <= K <= M={A.shape[1]}")
    # stable sort on the negated scores keeps equal values in index order
    order = np.argsort(-A, axis=1, kind="stable")[:, :K]
    return np.sort(order, axis=1)


def _power(AtA: np.ndarray, v: np.ndarray, tol: float, max_iters: int) -> tuple[float, bool]:
    est = 0.0
    for _ in range(max_iters):
        w = AtA @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        new = np.sqrt(nw)
        v = w / nw
        if est > 0.0 and abs(new - est) <= tol * new:
            return new, True
        est = new
    return est, False


def spectral_norm(A, tol: float = 1e-12, max_iters: int = 20000) -> float:
    """Largest singular value of ``A`` by power iteration on ``A^T A``.

    The iteration is started from the normalised all-ones vector and, again,
    from a fixed pseudorandom vector; the larger estimate wins. This covers
    the case where the all-ones start is orthogonal to the top singular
    subspace without giving up determinism.
    """
    A = as_matrix(A)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not np.any(A):
        raise ValueError("spectral_norm of the zero matrix")
    n = A.shape[1]
    AtA = A.T @ A
    starts = [np.full(n, 1.0 / np.sqrt(n))]
    r = np.random.default_rng(_FALLBACK_SEED).standard_normal(n)
    starts.append(r / np.linalg.norm(r))
    best, all_ok = 0.0, True
    for v0 in starts:
        est, ok = _power(AtA, v0, tol, max_iters)
        all_ok &= ok
        best = max(best, est)
    if not all_ok:
        raise SpectralNormError(f"power iteration did not converge in {max_iters} iterations", best)
    return float(best)


def layer_norm(x, eps: float = 1e-5) -> np.ndarray:
    """Parameter-free layer normalisation over the last axis."""
    x = real_array(x)
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least 2 features")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def layer_norm_backward(x: np.ndarray, grad_out: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xh = (x - mu) * inv
    g_mean = grad_out.mean(axis=-1, keepdims=True)
    gx_mean = (grad_out * xh).mean(axis=-1, keepdims=True)
    return inv * (grad_out - g_mean - xh * gx_mean)
