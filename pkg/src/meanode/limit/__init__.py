"""Surrogates for the infinite-depth limits: reference nets, tracers, lazy model."""

from meanode.limit.lazy import LazyParams, LazyResult, lazy_forward, train_lazy
from meanode.limit.reference import ReferenceModel, build_reference, query_limit_fields
from meanode.limit.tracers import TracerSet, evolve_tracers, init_tracers, run_tracers

__all__ = [
    "LazyParams",
    "LazyResult",
    "ReferenceModel",
    "TracerSet",
    "build_reference",
    "evolve_tracers",
    "init_tracers",
    "lazy_forward",
    "query_limit_fields",
    "run_tracers",
    "train_lazy",
]
