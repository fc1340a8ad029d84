"""Predicting when users are online, and placing DHT replicas with those predictions."""

from .trace import Session, SlotSpec, TraceMatrix, availability, ingest_sessions
from .synth import SynthConfig, UserArchetype, bayes_mse, generate
from .split import QuadrantSplit, make_split
from .evaluation import EvalConfig, mse, run_grid, run_protocol
from .dht import optimize_ids, predicted_data_availability, replication_factor

__version__ = "0.1.0"

__all__ = [
    "EvalConfig",
    "QuadrantSplit",
    "Session",
    "SlotSpec",
    "SynthConfig",
    "TraceMatrix",
    "UserArchetype",
    "availability",
    "bayes_mse",
    "generate",
    "ingest_sessions",
    "make_split",
    "mse",
    "optimize_ids",
    "predicted_data_availability",
    "replication_factor",
    "run_grid",
    "run_protocol",
]
