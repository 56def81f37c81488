"""Closed-form parameter counts and iso-parameter width solvers.

Count model (all integers, no biases):

* token embedding ``vocab * d`` tied with the output head, plus a learned
  position table ``seq_len * d``;
* per layer: attention ``4 d^2``, two layer norms ``2 * 2d``, and the FFN
  slot (dense / MoE / DSC);
* one final layer norm ``2d``.

Everything outside the FFN slot counts as active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "ArchBudget",
    "BackboneSpec",
    "DenseArch",
    "DscArch",
    "MoEArch",
    "MoLoRAArch",
    "REFERENCE_BACKBONE",
    "count_params",
    "format_config_block",
    "solve_dense_ffn",
    "solve_dsc",
    "solve_moe",
]


class InfeasibleTarget(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    d_model: int = 384
    layers: int = 6
    heads: int = 6
    vocab: int = 50304
    seq_len: int = 256

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    def shared_params(self) -> int:
        d, L = self.d_model, self.layers
        per_layer = 4 * d * d + 2 * (2 * d)
        return self.vocab * d + self.seq_len * d + L * per_layer + 2 * d


REFERENCE_BACKBONE = BackboneSpec()


@dataclass(frozen=True)
class DenseArch:
    d_ffn: int


@dataclass(frozen=True)
class MoEArch:
    n_experts: int
    d_expert: int
    top_k: int


@dataclass(frozen=True)
class DscArch:
    M: int
    K: int
    d_base: int


@dataclass(frozen=True)
class MoLoRAArch:
    M: int
    r: int
    K: int
    d_base: int = 0


@dataclass(frozen=True)
class ArchBudget:
    arch: str
    config: DenseArch | MoEArch | DscArch
    total_params: int
    active_params: int

    def row(self) -> dict[str, object]:
        return {"arch": self.arch, **self.config.__dict__, "total": self.total_params, "active": self.active_params}


def _ffn_counts(d: int, cfg) -> tuple[int, int]:
    """(total, active) parameters of one layer's FFN slot."""
    if isinstance(cfg, DenseArch):
        n = 2 * d * cfg.d_ffn
        return n, n
    if isinstance(cfg, MoEArch):
        expert = 2 * d * cfg.d_expert
        router = d * cfg.n_experts
        return cfg.n_experts * expert + router, cfg.top_k * expert + router
    if isinstance(cfg, DscArch):
        base = 2 * d * cfg.d_base
        router = d * cfg.M
        return 2 * cfg.M * d + router + base, base + router + 2 * cfg.K * d
    if isinstance(cfg, MoLoRAArch):
        base = 2 * d * cfg.d_base
        router = d * cfg.M
        return cfg.M * 2 * cfg.r * d + router + base, base + router + cfg.K * 2 * cfg.r * d
    raise TypeError(f"unknown architecture config {cfg!r}")


def count_params(spec: BackboneSpec, cfg) -> tuple[int, int]:
    total, active = _ffn_counts(spec.d_model, cfg)
    shared = spec.shared_params()
    return shared + spec.layers * total, shared + spec.layers * active


def _label(cfg) -> str:
    return {DenseArch: "dense", MoEArch: "moe", DscArch: "dsc", MoLoRAArch: "molora"}[type(cfg)]


def _budget(spec, cfg) -> ArchBudget:
    return ArchBudget(_label(cfg), cfg, *count_params(spec, cfg))


def solve_dense_ffn(spec: BackboneSpec, target_total: float) -> ArchBudget:
    """Smallest ``d_ffn`` whose total reaches ``target_total`` minus half a width step."""
    step = 2 * spec.d_model * spec.layers
    room = target_total - spec.shared_params()
    d_ffn = math.ceil((room - step / 2) / step)
    if d_ffn < 1:
        raise InfeasibleTarget(f"target {target_total:,.0f} leaves no room for an FFN")
    return _budget(spec, DenseArch(d_ffn))


def solve_moe(spec: BackboneSpec, n_experts: int, top_k: int, target_active: float) -> ArchBudget:
    if not 1 <= top_k <= n_experts:
        raise ValueError("need 1 <= top_k <= n_experts")
    d, L = spec.d_model, spec.layers
    per_layer = (target_active - spec.shared_params()) / L - d * n_experts
    d_expert = round(per_layer / (2 * d * top_k))
    if d_expert < 1:
        raise InfeasibleTarget(f"active target {target_active:,.0f} leaves no room for experts")
    return _budget(spec, MoEArch(n_experts, d_expert, top_k))


def solve_dsc(spec: BackboneSpec, K: int, target_total: float, target_active: float) -> ArchBudget:
    """Solve bank size ``M`` and static base width ``d_base``.

    Per layer, total minus active is exactly the ``2(M - K) d`` atom
    parameters left in storage, which pins ``M`` (floored); ``d_base`` then
    takes up the rest of the active target.
    """
    d, L = spec.d_model, spec.layers
    inactive = target_total - target_active
    M = K + math.floor(inactive / (2 * d * L))
    if inactive <= 0 or M <= K:
        raise InfeasibleTarget("total target must exceed the active target by at least one atom pair per layer")
    per_layer = (target_active - spec.shared_params()) / L - d * M - 2 * K * d
    d_base = round(per_layer / (2 * d))
    if d_base < 0:
        raise InfeasibleTarget(f"active target {target_active:,.0f} cannot cover a bank of {M} atoms")
    return _budget(spec, DscArch(M, K, d_base))


def format_config_block(budgets: list[ArchBudget]) -> str:
    """``key=value`` lines, one block per architecture, consumable by the CLI config parser."""
    lines = []
    for b in budgets:
        for k, v in b.row().items():
            lines.append(f"{b.arch}.{k}={v}" if k != "arch" else f"# {v}")
    return "\n".join(lines) + "\n"
