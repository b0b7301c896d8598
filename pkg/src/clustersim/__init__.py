"""Deterministic simulation of a shared-nothing failover cluster service."""

from .cluster import Cluster, ClusterSpec, LinkDef, NodeDef
from .config import SimConfig
from .runner import RunReport, run_scenario, sweep
from .scenario import ParseError, Scenario, load, parse

__all__ = [
    "Cluster", "ClusterSpec", "LinkDef", "NodeDef", "SimConfig",
    "RunReport", "run_scenario", "sweep", "ParseError", "Scenario", "load", "parse",
]
__version__ = "0.1.0"
