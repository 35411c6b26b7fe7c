"""Deterministic discrete-event harness for protocol property tests."""

from .net import (
    Crash,
    DropNext,
    Heal,
    Partition,
    Restart,
    SimConfig,
    SimNet,
    TraceEvent,
)

__all__ = [
    "Crash", "DropNext", "Heal", "Partition", "Restart",
    "SimConfig", "SimNet", "TraceEvent",
]
