"""Desk-scale training harness.

A synthetic regression task stands in for language modelling: each input
carries a binary context code in its first coordinates and the target is
``x @ A_c`` for that context's map. A static linear map cannot fit all
contexts at once, so a model has to route.

Models expose ``params()`` / ``set_param()`` / ``loss_and_grads()`` and are
trained with AdamW on a warmup + cosine schedule.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from dsc import router as rt
from dsc.basis import coherence_stats
from dsc.grad import LossBreakdown, objective
from dsc.layer import CHANNELWISE, DscConfig, DscLayer, forward_with_cache
from dsc.numeric import softmax_rows, top_k_rows
from dsc.seeding import stream

__all__ = [
    "AdamW",
    "CSV_HEADER",
    "CollapseMetrics",
    "DenseModel",
    "DscModel",
    "InfeasibleBudget",
    "LossBreakdown",
    "MoEModel",
    "MoLoRAModel",
    "SyntheticTask",
    "TrainConfig",
    "TrainingDiverged",
    "build_baseline",
    "build_model",
    "cosine_lr",
    "evaluate",
    "make_synthetic_task",
    "run_training",
    "train_step",
]

CSV_HEADER = "step,seed,task,aux,budget,frame,z,total,entropy,active_frac,mean_S,max_coh"


class TrainingDiverged(FloatingPointError):
    pass


class InfeasibleBudget(ValueError):
    pass


# -- task --------------------------------------------------------------------


@dataclass
class SyntheticTask:
    d: int
    C: int
    maps: np.ndarray  # (C, d, d)
    noise_std: float = 0.01

    @property
    def code_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.C)))

    def encode(self, contexts: np.ndarray) -> np.ndarray:
        bits = (contexts[:, None] >> np.arange(self.code_bits)) & 1
        return 2.0 * bits - 1.0

    def decode(self, X: np.ndarray) -> np.ndarray:
        bits = (X[:, : self.code_bits] > 0).astype(np.int64)
        return np.sum(bits << np.arange(self.code_bits), axis=1)

    def apply(self, X: np.ndarray, contexts: np.ndarray | None = None) -> np.ndarray:
        c = self.decode(X) if contexts is None else contexts
        return np.einsum("bd,bde->be", X, self.maps[c])

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        c = rng.integers(0, self.C, n)
        X = rng.standard_normal((n, self.d))
        X[:, : self.code_bits] = self.encode(c)
        T = self.apply(X, c)
        if self.noise_std:
            T = T + self.noise_std * rng.standard_normal(T.shape)
        return X, T


def make_synthetic_task(d: int, C: int, seed: int, noise_std: float = 0.01, rank: int = 2) -> SyntheticTask:
    """Context maps ``A_c = Q + 0.5 * P_c``: a shared orthogonal ``Q`` plus a
    unit-norm rank-``rank`` context-specific part, so ``||A_c||_2 <= 1.5``."""
    if C < 2:
        raise ValueError("need at least 2 contexts")
    bits = math.ceil(math.log2(C))
    if d < 2 * bits:
        raise ValueError(f"d={d} too small for a {bits}-bit context code")
    rng = stream(seed, "task")
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    maps = np.empty((C, d, d))
    for c in range(C):
        A, _ = np.linalg.qr(rng.standard_normal((d, rank)))
        B, _ = np.linalg.qr(rng.standard_normal((d, rank)))
        maps[c] = Q + 0.5 * A @ B.T
    return SyntheticTask(d, C, maps, noise_std)


# -- metrics -----------------------------------------------------------------


@dataclass
class CollapseMetrics:
    utilization_entropy: float
    active_expert_fraction: float
    mean_S: float
    max_coherence: float


def _selection_stats(indices: np.ndarray, M: int) -> tuple[float, float]:
    counts = np.bincount(indices.ravel(), minlength=M).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz))), float(np.count_nonzero(counts) / M)


# -- optimiser ---------------------------------------------------------------


def cosine_lr(step: int, total: int, peak: float, warmup_frac: float = 0.075, final_frac: float = 0.1) -> float:
    """Linear warmup, then cosine decay from ``peak`` to ``final_frac * peak``."""
    warm = max(1, round(warmup_frac * total))
    if step < warm:
        return peak * (step + 1) / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    floor = final_frac * peak
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.02
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, model, grads: dict[str, np.ndarray], lr: float, router_mult: float = 5.0) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in model.params().items():
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            step_lr = lr * (router_mult if name in model.router_names else 1.0)
            p = np.asarray(p, dtype=np.float64)
            if name not in model.no_decay:
                p = p * (1.0 - step_lr * self.weight_decay)
            p = p - step_lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            model.set_param(name, p)


# -- models ------------------------------------------------------------------


class DscModel:
    kind = "dsc"
    router_names = frozenset({"W_r"})
    no_decay = frozenset({"gamma"})

    def __init__(self, layer: DscLayer):
        self.layer = layer

    def params(self) -> dict[str, np.ndarray]:
        L = self.layer
        return {"U_hat": L.bank.U_hat, "V_hat": L.bank.V_hat, "W_r": L.router.W_r, "gamma": L.gamma, "W0": L.W0}

    def set_param(self, name: str, value) -> None:
        L = self.layer
        if name == "U_hat":
            L.bank.U_hat = value
        elif name == "V_hat":
            L.bank.V_hat = value
        elif name == "W_r":
            L.router.W_r = value
        elif name == "gamma":
            L.gamma = float(value) if L.scalar else value
        elif name == "W0":
            L.W0 = value
        else:
            raise KeyError(name)

    def predict(self, X):
        return forward_with_cache(self.layer, X).Y

    def loss_and_grads(self, X, T):
        loss, g, cache = objective(self.layer, X, T, task="mse")
        grads = g.as_dict()
        out = cache.outcome
        ent, frac = _selection_stats(out.indices, self.layer.config.M)
        mu_u, mu_v, _ = coherence_stats(self.layer.bank)
        return loss, grads, CollapseMetrics(ent, frac, float(out.S.mean()), max(mu_u, mu_v))

    def param_counts(self) -> tuple[int, int]:
        c = self.layer.config
        d, M, K = c.d, c.M, c.K
        g = 1 if self.layer.scalar else d
        return d * d + 3 * M * d + g, d * d + M * d + 2 * K * d + g


def _gate(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k logits, softmax renormalised over the selected experts."""
    idx = top_k_rows(logits, k)
    return idx, softmax_rows(np.take_along_axis(logits, idx, axis=1))


def _gate_backward(logits_shape, idx, g, dg) -> np.ndarray:
    dsel = g * (dg - np.sum(g * dg, axis=1, keepdims=True))
    dl = np.zeros(logits_shape)
    np.put_along_axis(dl, idx, dsel, axis=1)
    return dl


def _aux_from_logits(logits: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    sm = softmax_rows(logits)
    out = rt.RoutingOutcome(logits, logits, sm, None, None, np.zeros(len(logits)), None, sm, None)
    return float(rt.aux_load_balance_loss(out)), lam * rt.aux_load_balance_grad(out)


def _mse(Y, T):
    diff = Y - T
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class DenseModel:
    """Static baseline: ``x W0 + (x Wa) Wb`` with ``Wa`` of width ``h``."""

    kind = "dense"
    router_names = frozenset()
    no_decay = frozenset()

    def __init__(self, d: int, h: int, rng: np.random.Generator):
        self.d, self.h = d, h
        self.p = {
            "W0": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "Wa": rng.normal(0.0, 1.0 / np.sqrt(d), (d, h)),
            "Wb": np.zeros((h, d)),
        }

    def params(self):
        return self.p

    def set_param(self, name, value):
        self.p[name] = value

    def predict(self, X):
        return X @ self.p["W0"] + (X @ self.p["Wa"]) @ self.p["Wb"]

    def loss_and_grads(self, X, T):
        H = X @ self.p["Wa"]
        loss, dY = _mse(X @ self.p["W0"] + H @ self.p["Wb"], T)
        dH = dY @ self.p["Wb"].T
        grads = {"W0": X.T @ dY, "Wb": H.T @ dY, "Wa": X.T @ dH}
        nan = float("nan")
        return LossBreakdown(loss, total=loss), grads, CollapseMetrics(nan, nan, nan, nan)

    def param_counts(self):
        n = self.d * self.d + 2 * self.d * self.h
        return n, n


class MoEModel:
    """N ReLU experts of width ``d_e``, softmax top-k gating (no magnitude gate)."""

    kind = "moe"
    router_names = frozenset({"Wg"})
    no_decay = frozenset()

    def __init__(self, d, N, d_e, top_k, rng, lambda_aux=0.01):
        self.d, self.N, self.d_e, self.top_k, self.lambda_aux = d, N, d_e, top_k, lambda_aux
        self.p = {
            "W0": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "Wg": rng.normal(0.0, 1.0 / np.sqrt(d), (d, N)),
            "W1": rng.normal(0.0, 1.0 / np.sqrt(d), (N, d, d_e)),
            "W2": np.zeros((N, d_e, d)),
        }

    def params(self):
        return self.p

    def set_param(self, name, value):
        self.p[name] = value

    def _forward(self, X):
        logits = X @ self.p["Wg"]
        idx, g = _gate(logits, self.top_k)
        W1, W2 = self.p["W1"][idx], self.p["W2"][idx]  # (B, k, d, d_e), (B, k, d_e, d)
        pre = np.einsum("bd,bkde->bke", X, W1)
        act = np.maximum(pre, 0.0)
        eo = np.einsum("bke,bked->bkd", act, W2)
        Y = X @ self.p["W0"] + np.einsum("bk,bkd->bd", g, eo)
        return Y, (logits, idx, g, W1, W2, pre, act, eo)

    def predict(self, X):
        return self._forward(X)[0]

    def loss_and_grads(self, X, T):
        Y, (logits, idx, g, W1, W2, pre, act, eo) = self._forward(X)
        task, dY = _mse(Y, T)
        aux, dlog_aux = _aux_from_logits(logits, self.lambda_aux)
        dg = np.einsum("bd,bkd->bk", dY, eo)
        deo = g[:, :, None] * dY[:, None, :]
        dW2 = np.einsum("bke,bkd->bked", act, deo)
        dpre = np.einsum("bkd,bked->bke", deo, W2) * (pre > 0)
        dW1 = np.einsum("bd,bke->bkde", X, dpre)
        dlog = _gate_backward(logits.shape, idx, g, dg) + dlog_aux
        gW1 = np.zeros_like(self.p["W1"])
        gW2 = np.zeros_like(self.p["W2"])
        np.add.at(gW1, idx.ravel(), dW1.reshape(-1, self.d, self.d_e))
        np.add.at(gW2, idx.ravel(), dW2.reshape(-1, self.d_e, self.d))
        grads = {"W0": X.T @ dY, "Wg": X.T @ dlog, "W1": gW1, "W2": gW2}
        ent, frac = _selection_stats(idx, self.N)
        loss = LossBreakdown(task, aux=aux, total=task + self.lambda_aux * aux)
        return loss, grads, CollapseMetrics(ent, frac, float("nan"), float("nan"))

    def param_counts(self):
        d = self.d
        expert = 2 * d * self.d_e
        base = d * d + d * self.N
        return base + self.N * expert, base + self.top_k * expert


class MoLoRAModel:
    """M independent rank-r adapters ``(A_j, B_j)`` with softmax top-K gating."""

    kind = "molora"
    router_names = frozenset({"Wg"})
    no_decay = frozenset()

    def __init__(self, d, M, r, K, rng, lambda_aux=0.01):
        self.d, self.M, self.r, self.K, self.lambda_aux = d, M, r, K, lambda_aux
        self.p = {
            "W0": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "Wg": rng.normal(0.0, 1.0 / np.sqrt(d), (d, M)),
            "A": rng.normal(0.0, 1.0 / np.sqrt(d), (M, d, r)),
            "B": np.zeros((M, r, d)),
        }

    def params(self):
        return self.p

    def set_param(self, name, value):
        self.p[name] = value

    def _forward(self, X):
        logits = X @ self.p["Wg"]
        idx, g = _gate(logits, self.K)
        A, B = self.p["A"][idx], self.p["B"][idx]
        H = np.einsum("bd,bkdr->bkr", X, A)
        ao = np.einsum("bkr,bkrd->bkd", H, B)
        Y = X @ self.p["W0"] + np.einsum("bk,bkd->bd", g, ao)
        return Y, (logits, idx, g, A, B, H, ao)

    def predict(self, X):
        return self._forward(X)[0]

    def loss_and_grads(self, X, T):
        Y, (logits, idx, g, A, B, H, ao) = self._forward(X)
        task, dY = _mse(Y, T)
        aux, dlog_aux = _aux_from_logits(logits, self.lambda_aux)
        dg = np.einsum("bd,bkd->bk", dY, ao)
        dao = g[:, :, None] * dY[:, None, :]
        dB = np.einsum("bkr,bkd->bkrd", H, dao)
        dH = np.einsum("bkd,bkrd->bkr", dao, B)
        dA = np.einsum("bd,bkr->bkdr", X, dH)
        dlog = _gate_backward(logits.shape, idx, g, dg) + dlog_aux
        gA = np.zeros_like(self.p["A"])
        gB = np.zeros_like(self.p["B"])
        np.add.at(gA, idx.ravel(), dA.reshape(-1, self.d, self.r))
        np.add.at(gB, idx.ravel(), dB.reshape(-1, self.r, self.d))
        grads = {"W0": X.T @ dY, "Wg": X.T @ dlog, "A": gA, "B": gB}
        ent, frac = _selection_stats(idx, self.M)
        loss = LossBreakdown(task, aux=aux, total=task + self.lambda_aux * aux)
        return loss, grads, CollapseMetrics(ent, frac, float("nan"), float("nan"))

    def adapter_params(self) -> int:
        return self.M * 2 * self.r * self.d

    def param_counts(self):
        base = self.d * self.d + self.d * self.M
        return base + self.adapter_params(), base + self.K * 2 * self.r * self.d


def build_baseline(
    kind: str,
    iso_active_budget: int,
    d: int,
    rng: np.random.Generator,
    *,
    N: int = 5,
    top_k: int = 2,
    M: int = 8,
    K: int = 2,
    r: int | None = None,
    lambda_aux: float = 0.01,
):
    """Size a baseline so its active parameter count fits ``iso_active_budget``.

    The free width (dense ``h``, MoE ``d_e``, MoLoRA ``r``) is the largest
    integer that keeps the active count within budget.
    """
    fixed = {"dense": d * d, "moe": d * d + d * N, "molora": d * d + d * M}
    per = {"dense": 2 * d, "moe": 2 * top_k * d, "molora": 2 * K * d}
    if kind not in fixed:
        raise ValueError(f"unknown baseline kind {kind!r}")
    if kind == "molora" and r is not None:
        width = r
    else:
        width = (iso_active_budget - fixed[kind]) // per[kind]
    if width < 1:
        raise InfeasibleBudget(
            f"{kind} budget {iso_active_budget} is infeasible; smallest feasible budget is {fixed[kind] + per[kind]}"
        )
    if kind == "dense":
        return DenseModel(d, width, rng)
    if kind == "moe":
        if N < top_k:
            raise ValueError("need N >= top_k")
        return MoEModel(d, N, width, top_k, rng, lambda_aux)
    return MoLoRAModel(d, M, width, K, rng, lambda_aux)


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    arch: str = "dsc"
    d: int = 32
    C: int = 8
    M: int = 32
    K: int = 4
    gamma_mode: str = CHANNELWISE
    N: int = 5
    top_k: int = 2
    molora_M: int = 8
    molora_K: int = 2
    molora_r: int = 0  # 0: size from the iso-active budget
    batch: int = 64
    lr: float = 1e-2
    router_lr_mult: float = 5.0
    weight_decay: float = 0.02
    warmup_frac: float = 0.075
    final_lr_frac: float = 0.1
    mu: float = 1.0
    lambda_aux: float = 0.01
    lambda_budget: float = 0.01
    lambda_frame: float = 0.001
    lambda_z: float = 1e-4
    tau: float = 10.0
    noise_std: float = 0.01
    task_seed: int = 0
    eval_size: int = 2048

    def dsc_config(self) -> DscConfig:
        return DscConfig(
            d=self.d, M=self.M, K=self.K, gamma_mode=self.gamma_mode, tau=self.tau, mu=self.mu,
            lambda_aux=self.lambda_aux, lambda_budget=self.lambda_budget,
            lambda_frame=self.lambda_frame, lambda_z=self.lambda_z,
        )


def dsc_active_budget(cfg: TrainConfig) -> int:
    g = 1 if cfg.gamma_mode == "scalar" else cfg.d
    return cfg.d * cfg.d + cfg.M * cfg.d + 2 * cfg.K * cfg.d + g


def build_model(cfg: TrainConfig, seed: int):
    """Model for ``cfg.arch``; baselines are sized to the DSC active budget."""
    rng = stream(seed, f"init/{cfg.arch}")
    if cfg.arch == "dsc":
        return DscModel(DscLayer.init(cfg.dsc_config(), rng))
    return build_baseline(
        cfg.arch, dsc_active_budget(cfg), cfg.d, rng, N=cfg.N, top_k=cfg.top_k,
        M=cfg.molora_M, K=cfg.molora_K, r=cfg.molora_r or None, lambda_aux=cfg.lambda_aux,
    )


def train_step(model, batch, optimizer: AdamW, lr: float, router_mult: float = 5.0):
    X, T = batch
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads, metrics = model.loss_and_grads(X, T)
    if not np.isfinite(loss.total):
        raise TrainingDiverged(f"non-finite loss {loss}")
    optimizer.step(model, grads, lr, router_mult)
    return loss, metrics


def evaluate(model, X, T) -> float:
    diff = model.predict(X) - T
    return float(np.mean(diff * diff))


@dataclass
class TrainResult:
    csv: str
    final_mse: dict[int, float]
    final_metrics: dict[int, CollapseMetrics]
    models: dict[int, object] = field(repr=False, default_factory=dict)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def run_training(cfg: TrainConfig, task: SyntheticTask, steps: int, seeds) -> TrainResult:
    """Train one model per seed; returns per-step CSV plus held-out results.

    Final metrics are measured on a held-out batch of ``cfg.eval_size``
    samples drawn from the task's ``eval`` stream (shared across seeds).
    """
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    final_mse, final_metrics, models = {}, {}, {}
    Xe, Te = task.sample(cfg.eval_size, stream(cfg.task_seed, "eval"))
    for seed in seeds:
        model = build_model(cfg, seed)
        opt = AdamW(weight_decay=cfg.weight_decay)
        data = stream(seed, "batches")
        for step in range(steps):
            lr = cosine_lr(step, steps, cfg.lr, cfg.warmup_frac, cfg.final_lr_frac)
            loss, m = train_step(model, task.sample(cfg.batch, data), opt, lr, cfg.router_lr_mult)
            row = [step, seed, loss.task, loss.aux, loss.budget, loss.frame, loss.z, loss.total,
                   m.utilization_entropy, m.active_expert_fraction, m.mean_S, m.max_coherence]
            buf.write(",".join([str(step), str(seed)] + [_fmt(v) for v in row[2:]]) + "\n")
        if steps:
            final_mse[seed] = evaluate(model, Xe, Te)
            final_metrics[seed] = eval_metrics(model, Xe, Te)
        models[seed] = model
    return TrainResult(buf.getvalue(), final_mse, final_metrics, models)


def eval_metrics(model, X, T) -> CollapseMetrics:
    return model.loss_and_grads(X, T)[2]
