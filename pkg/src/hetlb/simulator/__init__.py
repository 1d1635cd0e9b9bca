"""Finite-N discrete-event simulation of the cluster under all dispatch policies.

The event loops live in a compiled extension (``_ckernel``) with a pure-Python
reference (``_pykernel``) picked automatically when the extension is missing or when
``HETLB_PURE_PYTHON`` is set.
"""
from .chaos import ChaosEstimate, chaos_diagnostic
from .coupling import CouplingResult, coupled_occupancy
from .engine import (
    BACKEND,
    DISTRIBUTIONS,
    POLICIES,
    Replication,
    SimConfig,
    SimConfigError,
    SimState,
    SojournStats,
    confidence_halfwidth,
    kernel,
    run_replication,
    run_replications,
    simulate,
    summarize,
    type_counts,
    write_replication_csv,
    write_stats_json,
)
from .policies import (
    proportional_routing,
    sample_servers,
    select_hybrid_sqd,
    select_scheme1,
    select_scheme2,
    select_state_independent,
)
from .routing import baseline_sojourn, optimize_routing

__all__ = [
    "BACKEND", "DISTRIBUTIONS", "POLICIES", "ChaosEstimate", "CouplingResult", "Replication", "SimConfig",
    "SimConfigError", "SimState", "SojournStats", "baseline_sojourn", "chaos_diagnostic", "confidence_halfwidth",
    "coupled_occupancy", "kernel", "optimize_routing", "proportional_routing", "run_replication",
    "run_replications", "sample_servers", "select_hybrid_sqd", "select_scheme1", "select_scheme2",
    "select_state_independent", "simulate", "summarize", "type_counts", "write_replication_csv", "write_stats_json",
]
