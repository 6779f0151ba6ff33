"""Seeded simulator for naming games with schema-constrained agent messages."""

from .core import (
    AgentState,
    Condition,
    ConfigError,
    GameConfig,
    InteractionRecord,
    Lexicon,
    derive_rng,
    make_lexicon,
    validate_config,
)
from .engine import RunLog, read_runlog, run_game

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "Condition",
    "ConfigError",
    "GameConfig",
    "InteractionRecord",
    "Lexicon",
    "RunLog",
    "derive_rng",
    "make_lexicon",
    "read_runlog",
    "run_game",
    "validate_config",
]
