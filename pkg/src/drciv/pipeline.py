"""One-call estimation: point estimate plus plug-in and bootstrap inference."""
from __future__ import annotations

import re
from dataclasses import replace

import numpy as np

from . import estimands as E
from .errors import ConfigError, DrcivError
from .inference import _channels, influence_multi, pairs_bootstrap
from .report import EstimateReport

ESTIMANDS = (
    "wald",
    "wald_x",
    "wald_x_multi",
    "pi_dr",
    "pi_dr_plus",
    "pi_dr_minus",
    "pi_dr_multi",
    "pi_v",
    "distributional",
)
_MODES = {"pi_dr": "abs", "pi_dr_plus": "positive", "pi_dr_minus": "negative"}
_PAT = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*$")


def parse_estimand(text: str):
    m = _PAT.match(text)
    if not m or m.group(1) not in ESTIMANDS:
        raise ConfigError(f"unknown estimand {text!r}; choose from {', '.join(ESTIMANDS)}")
    name, arg = m.group(1), m.group(2)
    if name in ("pi_v", "distributional") and arg is None:
        raise ConfigError(f"estimand {name} needs an argument, e.g. {name}(0.5)")
    return name, None if arg is None else float(arg)


def _point_and_plugin(d, name, arg, config: E.EstimandConfig, plugin: bool, level: float, cache=None) -> EstimateReport:
    """``cache`` (a dict) lets several estimands on one dataset share the fits."""
    cache = {} if cache is None else cache
    if name == "wald":
        return E.wald(d, config.pair)
    if name == "wald_x":
        return E.wald_x(d, config.pair, use_covariates=config.use_covariates)
    if name == "wald_x_multi":
        return E.wald_x_multi(d, use_covariates=config.use_covariates)
    outcome = None
    if name == "distributional":
        outcome = (d.outcome <= arg).astype(float)
    mode = _MODES.get(name, config.sign_mode)
    if name == "pi_dr_multi" or (name == "distributional" and config.multi):
        key = ("multi", arg)
        if key not in cache:
            cache[key] = E.multi_pair_fits(d, config, outcome=outcome)
        lw, fits = cache[key]
        rep, reps = E.aggregate_multi(lw, fits, mode)
        rep = replace(rep, n=d.n)
        if plugin:
            dec = influence_multi(d, config, fits, lw, [r.point for r in reps], rep.point, mode)
            rep = rep.with_plugin(dec.se, level)
    else:
        key = ("pair", arg if name == "distributional" else None)
        if key not in cache:
            cache[key] = E.fit_pair(d, config, outcome=outcome)
        pf = cache[key]
        if name == "pi_v":
            j = pf.qf.grid.index(arg)
            point, _ = E._pi_v_from(pf.surface, j, pf.rho, mode, arg)
            dq = pf.surface.dq[:, j]
            rep = EstimateReport(
                f"pi_v({arg:g})",
                point,
                trimmed_fraction=float(np.mean(np.abs(dq) < pf.rho)),
                B_hat=float(np.mean(dq * E.kappa(dq, pf.rho, mode))),
                rho_n=pf.rho,
                n=pf.qf.n,
                warnings=pf.warnings,
            )
            cols = [j]
        else:
            rep = E.pi_dr_fits(pf, mode)
            cols = None
        if plugin:
            rep = rep.with_plugin(_channels(pf, rep.point, mode, cols=cols).se, level)
    if name == "distributional":
        rep = replace(rep, estimand_id=f"distributional({arg:g})")
    return rep


def point_function(estimand: str, config: E.EstimandConfig):
    name, arg = parse_estimand(estimand)

    def run(d):
        return _point_and_plugin(d, name, arg, config, plugin=False, level=0.95).point

    return run


def estimate_many(d, estimands, config: E.EstimandConfig | None = None, level: float = 0.95) -> list:
    """Point estimates with plug-in inference for several estimands sharing one set of fits.

    Each entry is an EstimateReport or the DrcivError the estimand raised.
    """
    config = config or E.EstimandConfig()
    cache, out = {}, []
    for text in estimands:
        name, arg = parse_estimand(text)
        try:
            out.append(_point_and_plugin(d, name, arg, config, True, level, cache))
        except DrcivError as exc:
            out.append(exc)
    return out


def estimate(
    d,
    estimand: str = "pi_dr",
    config: E.EstimandConfig | None = None,
    plugin: bool = True,
    bootstrap: int = 0,
    seed: int = 0,
    level: float = 0.95,
    workers: int = 1,
) -> EstimateReport:
    """Point estimate with plug-in and/or pairs-bootstrap standard errors."""
    config = config or E.EstimandConfig()
    name, arg = parse_estimand(estimand)
    rep = _point_and_plugin(d, name, arg, config, plugin, level)
    if not plugin and rep.se_plugin is not None:
        rep = replace(rep, se_plugin=None, ci=None)
    if bootstrap:
        res = pairs_bootstrap(d, point_function(estimand, config), B=bootstrap, seed=seed, level=level, workers=workers)
        rep = rep.with_bootstrap(res.se, res.ci, res.failures)
    return rep
