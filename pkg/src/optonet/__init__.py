"""Optical data-center network simulator built around time-flow tables."""

from .core import (
    Circuit,
    EntryConflict,
    InfeasibleSchedule,
    NextHop,
    NoMatch,
    OpticalSchedule,
    OptonetError,
    Path,
    SourceRoute,
    TimeFlowEntry,
    TimeFlowTable,
    Unreachable,
)
from .simulator import Metrics, SimConfig, Simulator

__all__ = [
    "Circuit",
    "EntryConflict",
    "InfeasibleSchedule",
    "Metrics",
    "NextHop",
    "NoMatch",
    "OpticalSchedule",
    "OptonetError",
    "Path",
    "SimConfig",
    "Simulator",
    "SourceRoute",
    "TimeFlowEntry",
    "TimeFlowTable",
    "Unreachable",
]
