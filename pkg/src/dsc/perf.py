"""Per-token weight-traffic accounting and a single-threaded forward microbenchmark.

Traffic counts only the weights a token has to pull in for its *dynamic*
path (selected experts, adapters or atoms). Router and static-base weights
are streamed by every token regardless of architecture and are itemised
separately rather than folded in.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from dsc.budget import REFERENCE_BACKBONE, BackboneSpec, DenseArch, DscArch, MoEArch, MoLoRAArch, count_params
from dsc.layer import DscConfig, DscLayer, forward_with_cache
from dsc.numeric import softmax_rows, top_k_rows

__all__ = [
    "BenchResult",
    "REFERENCE_ARCHS",
    "TrafficReport",
    "comparison_table",
    "dsc_cheaper_than_moe",
    "microbench_forward",
    "traffic_per_token",
]

# Published widths at d_model = 384. The MoLoRA row is storage-matched to the DSC
# bank (M * r = 16 * 95 ~ 1523 rank-1 pairs) and is illustrative only.
REFERENCE_ARCHS = {
    "dense": DenseArch(2611),
    "moe": MoEArch(5, 545, 2),
    "molora": MoLoRAArch(16, 95, 4, 327),
    "dsc": DscArch(1523, 4, 327),
}


@dataclass(frozen=True)
class TrafficReport:
    arch: str
    elements_fetched_per_token_per_layer: int
    bytes: int
    ratio_vs_moe: float
    static_elements: int  # router + base weights, streamed by every token

    @property
    def elements(self) -> int:
        return self.elements_fetched_per_token_per_layer


def _dynamic_and_static(cfg, d: int) -> tuple[str, int, int]:
    if isinstance(cfg, DenseArch):
        return "dense", 2 * d * cfg.d_ffn, 0
    if isinstance(cfg, MoEArch):
        return "moe", cfg.top_k * 2 * d * cfg.d_expert, d * cfg.n_experts
    if isinstance(cfg, MoLoRAArch):
        return "molora", cfg.K * 2 * cfg.r * d, d * cfg.M + 2 * d * cfg.d_base
    if isinstance(cfg, DscArch):
        return "dsc", cfg.K * 2 * d, d * cfg.M + 2 * d * cfg.d_base
    raise TypeError(f"unknown architecture config {cfg!r}")


def traffic_per_token(cfg, d: int = 384, dtype_bytes: int = 4, moe_reference: MoEArch | None = None) -> TrafficReport:
    """Weight elements one token fetches per layer.

    Dense streams its whole FFN (``2 d d_ffn``) and is reported for context.
    ``ratio_vs_moe`` is reference-MoE elements divided by this arch's.
    """
    label, dyn, static = _dynamic_and_static(cfg, d)
    ref = moe_reference or REFERENCE_ARCHS["moe"]
    ref_elems = ref.top_k * 2 * d * ref.d_expert
    ratio = ref_elems / dyn if dyn else float("inf")
    return TrafficReport(label, dyn, dyn * dtype_bytes, ratio, static)


def dsc_cheaper_than_moe(K: int, d: int, top_k: int, d_expert: int) -> bool:
    """2 K d < 2 k d d_expert, i.e. K < k * d_expert."""
    return 2 * K * d < 2 * top_k * d * d_expert


# -- microbenchmark ----------------------------------------------------------


@dataclass(frozen=True)
class BenchResult:
    kind: str
    median_ns: float
    p90_ns: float


def _moe_forward(X, W0, Wg, W1, W2, top_k):
    logits = X @ Wg
    idx = top_k_rows(logits, top_k)
    g = softmax_rows(np.take_along_axis(logits, idx, axis=1))
    pre = np.einsum("bd,bkde->bke", X, W1[idx])
    return X @ W0 + np.einsum("bk,bkd->bd", g, np.einsum("bke,bked->bkd", np.maximum(pre, 0.0), W2[idx]))


def _make_forward(kind: str, d: int, batch: int, rng: np.random.Generator, M: int, K: int, N: int, d_expert: int, top_k: int):
    X = rng.standard_normal((batch, d))
    if kind == "dsc":
        layer = DscLayer.init(DscConfig(d=d, M=M, K=K), rng)
        layer.gamma = np.ones(d)
        return lambda: forward_with_cache(layer, X).Y
    if kind == "moe":
        s = 1.0 / np.sqrt(d)
        W0 = rng.normal(0, s, (d, d))
        Wg = rng.normal(0, s, (d, N))
        W1 = rng.normal(0, s, (N, d, d_expert))
        W2 = rng.normal(0, s, (N, d_expert, d))
        return lambda: _moe_forward(X, W0, Wg, W1, W2, top_k)
    raise ValueError(f"unknown layer kind {kind!r}")


def microbench_forward(
    kind: str,
    d: int = 384,
    batch: int = 16,
    repeats: int = 50,
    *,
    M: int = 1523,
    K: int = 4,
    N: int = 5,
    d_expert: int = 545,
    top_k: int = 2,
    warmup: int = 5,
    seed: int = 0,
) -> BenchResult:
    """Wall-clock median / p90 of one forward pass, BLAS pinned to one thread."""
    if repeats < 30:
        raise ValueError("repeats must be at least 30")
    fn = _make_forward(kind, d, batch, np.random.default_rng(seed), M, K, N, d_expert, top_k)
    samples = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            fn()
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - t0)
    med = statistics.median(samples)
    res_ns = time.get_clock_info("perf_counter").resolution * 1e9
    if med < 100 * res_ns:
        raise RuntimeError(f"median {med:.0f} ns is within 100x of timer resolution {res_ns:.0f} ns")
    p90 = float(np.percentile(samples, 90))
    return BenchResult(kind, float(med), p90)


TABLE_FIELDS = ["arch", "total_params", "active_params", "dyn_elements", "dyn_bytes", "ratio_vs_moe", "static_elements", "median_ns", "p90_ns"]


def comparison_table(
    benches: dict[str, BenchResult] | None = None,
    dtype_bytes: int = 4,
    archs: dict | None = None,
    backbone: BackboneSpec = REFERENCE_BACKBONE,
) -> list[dict]:
    """One row per architecture; param counts use ``backbone``'s count model."""
    archs = REFERENCE_ARCHS if archs is None else archs
    rows = []
    for name, cfg in archs.items():
        total, active = count_params(backbone, cfg)
        t = traffic_per_token(cfg, backbone.d_model, dtype_bytes, moe_reference=archs.get("moe"))
        b = (benches or {}).get(name)
        rows.append({
            "arch": name, "total_params": total, "active_params": active,
            "dyn_elements": t.elements, "dyn_bytes": t.bytes, "ratio_vs_moe": round(t.ratio_vs_moe, 3),
            "static_elements": t.static_elements,
            "median_ns": "" if b is None else f"{b.median_ns:.0f}",
            "p90_ns": "" if b is None else f"{b.p90_ns:.0f}",
        })
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def table_text(rows: list[dict]) -> str:
    cells = [TABLE_FIELDS] + [[str(r[f]) for f in TABLE_FIELDS] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(TABLE_FIELDS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in cells) + "\n"
