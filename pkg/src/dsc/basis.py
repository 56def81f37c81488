"""Shared basis bank: raw atom factors, unit-ball projection, frame potential."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dsc.numeric import as_matrix

__all__ = [
    "BasisBank",
    "coherence_stats",
    "frame_potential_grad",
    "frame_potential_loss",
    "gather_active",
    "load_checkpoint",
    "offdiag_gram",
    "project_backward",
    "project_matrix",
    "project_rows",
    "save_checkpoint",
    "welch_floor",
]

_MAGIC = "DSCBANK"
_VERSION = 1


@dataclass
class BasisBank:
    """Raw learnable factor matrices; row ``j`` of each is one side of atom ``j``."""

    U_hat: np.ndarray
    V_hat: np.ndarray
    eps_norm: float = 1e-6

    def __post_init__(self):
        self.U_hat = as_matrix(self.U_hat)
        self.V_hat = as_matrix(self.V_hat, *self.U_hat.shape)
        M, d = self.U_hat.shape
        if M < 1 or d < 2:
            raise ValueError(f"bank needs M >= 1 and d >= 2, got M={M}, d={d}")
        if not 0.0 < self.eps_norm < 1e-2:
            raise ValueError("eps_norm must be a small positive constant")

    @property
    def M(self) -> int:
        return self.U_hat.shape[0]

    @property
    def d(self) -> int:
        return self.U_hat.shape[1]

    @classmethod
    def random(cls, M: int, d: int, rng: np.random.Generator, eps_norm: float = 1e-6) -> "BasisBank":
        """Gaussian init with std 1/sqrt(d), so projected rows start near unit norm."""
        s = 1.0 / np.sqrt(d)
        return cls(rng.normal(0.0, s, (M, d)), rng.normal(0.0, s, (M, d)), eps_norm)


def project_matrix(W: np.ndarray, eps_norm: float) -> np.ndarray:
    n = np.linalg.norm(W, axis=1, keepdims=True)
    return W / np.maximum(eps_norm, n)


def project_rows(bank: BasisBank) -> tuple[np.ndarray, np.ndarray]:
    return project_matrix(bank.U_hat, bank.eps_norm), project_matrix(bank.V_hat, bank.eps_norm)


def project_backward(W: np.ndarray, grad_proj: np.ndarray, eps_norm: float) -> np.ndarray:
    """Pull a gradient on projected rows back to the raw rows.

    Rows with norm strictly above ``eps_norm`` use the sphere Jacobian
    ``(I - u u^T) / ||w||``; rows at or below it were scaled by a constant.
    """
    n = np.linalg.norm(W, axis=1, keepdims=True)
    on_sphere = n > eps_norm
    safe = np.where(on_sphere, n, 1.0)
    u = W / safe
    radial = np.sum(u * grad_proj, axis=1, keepdims=True)
    g_sphere = (grad_proj - u * radial) / safe
    return np.where(on_sphere, g_sphere, grad_proj / eps_norm)


def gather_active(bank: BasisBank, indices) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= bank.M):
        raise IndexError(f"atom index out of range [0, {bank.M})")
    U, V = project_rows(bank)
    return U[idx], V[idx]


def offdiag_gram(W: np.ndarray) -> np.ndarray:
    G = W @ W.T
    np.fill_diagonal(G, 0.0)
    return G


def frame_potential_loss(bank: BasisBank) -> float:
    """Off-diagonal Gram energy of both projected banks, ordered pairs counted."""
    if bank.M < 2:
        raise ValueError("frame potential needs M >= 2")
    U, V = project_rows(bank)
    return np.sum(offdiag_gram(U) ** 2) + np.sum(offdiag_gram(V) ** 2)


def frame_potential_grad(bank: BasisBank) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`frame_potential_loss` w.r.t. the raw ``U_hat``, ``V_hat``."""
    U, V = project_rows(bank)
    dU = 4.0 * offdiag_gram(U) @ U
    dV = 4.0 * offdiag_gram(V) @ V
    return (
        project_backward(bank.U_hat, dU, bank.eps_norm),
        project_backward(bank.V_hat, dV, bank.eps_norm),
    )


def welch_floor(M: int, d: int) -> float:
    """Lower bound on the two-bank frame potential for unit-norm rows."""
    return max(0.0, 2.0 * (M * M / d - M))


def coherence_stats(bank: BasisBank) -> tuple[float, float, float]:
    """(max |off-diag Gram| of U, same for V, frame loss minus its Welch floor)."""
    if bank.M < 2:
        raise ValueError("coherence needs M >= 2")
    U, V = project_rows(bank)
    mu_u = float(np.max(np.abs(offdiag_gram(U))))
    mu_v = float(np.max(np.abs(offdiag_gram(V))))
    return mu_u, mu_v, frame_potential_loss(bank) - welch_floor(bank.M, bank.d)


# -- checkpoint format -------------------------------------------------------
# One ASCII header line, then the raw little-endian float64 payload of each
# field in the order the header lists them:
#   DSCBANK 1 M=<M> d=<d> eps_norm=<repr> dtype=<f8 fields=U_hat,V_hat[,W_r]


def save_checkpoint(path, bank: BasisBank, W_r: np.ndarray | None = None) -> None:
    fields = [("U_hat", bank.U_hat), ("V_hat", bank.V_hat)]
    if W_r is not None:
        fields.append(("W_r", as_matrix(W_r, bank.d, bank.M)))
    header = (
        f"{_MAGIC} {_VERSION} M={bank.M} d={bank.d} eps_norm={bank.eps_norm!r} "
        f"dtype=<f8 fields={','.join(name for name, _ in fields)}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for _, arr in fields:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[BasisBank, np.ndarray | None]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    parts = raw[:nl].decode("ascii").split()
    if parts[:2] != [_MAGIC, str(_VERSION)]:
        raise ValueError(f"not a version-{_VERSION} bank checkpoint: {path}")
    meta = dict(p.split("=", 1) for p in parts[2:])
    if meta["dtype"] != "<f8":
        raise ValueError(f"unsupported dtype {meta['dtype']}")
    M, d = int(meta["M"]), int(meta["d"])
    shapes = {"U_hat": (M, d), "V_hat": (M, d), "W_r": (d, M)}
    names = meta["fields"].split(",")
    expected = sum(shapes[n][0] * shapes[n][1] for n in names) * 8
    payload = raw[nl + 1 :]
    if len(payload) != expected:
        raise ValueError(f"payload is {len(payload)} bytes, header implies {expected}")
    out, off = {}, 0
    for n in names:
        size = shapes[n][0] * shapes[n][1]
        out[n] = np.frombuffer(payload, dtype="<f8", count=size, offset=off).reshape(shapes[n]).astype(np.float64)
        off += size * 8
    bank = BasisBank(out["U_hat"], out["V_hat"], float(meta["eps_norm"]))
    return bank, out.get("W_r")
