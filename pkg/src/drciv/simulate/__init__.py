"""Synthetic data generating processes, population oracles and Monte Carlo runs."""
from .expr import Expr
from .mc import McEstimator, McReport, McRow, monte_carlo
from .oracle import ORACLE_IDS, OracleValue, oracle
from .spec import PRESETS, DgpSpec, generate, load_spec, preset, verify_restrictions

__all__ = [
    "DgpSpec",
    "Expr",
    "McEstimator",
    "McReport",
    "McRow",
    "ORACLE_IDS",
    "OracleValue",
    "PRESETS",
    "generate",
    "load_spec",
    "monte_carlo",
    "oracle",
    "preset",
    "verify_restrictions",
]
