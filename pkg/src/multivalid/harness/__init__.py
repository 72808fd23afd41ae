"""Simulation, reporting, ingestion and command-line tooling."""

from .adversaries import Adversary, AdversaryConfig
from .report import MultivalidityReport, multivalidity_report
from .simulation import SimulationConfig, run_simulation
from .stream import load_stream, read_rows

__all__ = [
    "Adversary",
    "AdversaryConfig",
    "MultivalidityReport",
    "SimulationConfig",
    "load_stream",
    "multivalidity_report",
    "read_rows",
    "run_simulation",
]
