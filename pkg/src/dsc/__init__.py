"""Dynamic Subspace Composition: sparse rank-1 basis composition with
magnitude-gated simplex routing, plus verification and training tooling."""

from dsc.basis import BasisBank
from dsc.layer import DscConfig, DscLayer
from dsc.router import RouterParams, RoutingOutcome, route

__all__ = [
    "BasisBank",
    "DscConfig",
    "DscLayer",
    "RouterParams",
    "RoutingOutcome",
    "route",
]
