"""Doubly robust estimation of continuous-treatment effects with a discrete instrument."""
from __future__ import annotations

from .dataset import Dataset, Diagnostics, diagnose, load_dataset
from .estimands import (
    EstimandConfig,
    TrimmingSpec,
    distributional_dr,
    lambda_weights,
    pi_dr,
    pi_dr_multi,
    pi_v,
    pi_xv,
    wald,
    wald_x,
)
from .pipeline import estimate
from .quantreg import QuantileFit, QuantileGrid, delta_q, fit_check_loss, fit_grid, qr_influence
from .report import EstimateReport
from .sieve import BasisSpec, SeriesFit, build_basis, fit_series, predict_dm_dt, predict_m

__version__ = "0.1.0"
