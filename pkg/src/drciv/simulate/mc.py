"""Monte Carlo harness: generate, estimate, compare against the oracle."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..errors import DrcivError, SpecError
from ..estimands import EstimandConfig
from ..inference import map_jobs
from ..pipeline import estimate, estimate_many, parse_estimand
from .oracle import DEFAULT_DRAWS, OracleValue, oracle
from .spec import DgpSpec, generate, verify_restrictions

FAILURE_FLAG_SHARE = 0.2
_ORACLE_OF = {"wald_x_multi": "pi_dr_multi"}


@dataclass(frozen=True)
class McEstimator:
    """One estimator column of a Monte Carlo study.

    ``oracle`` names the population target; "auto" maps the estimand to the
    oracle of the same name and None skips bias and coverage.
    """

    label: str
    estimand: str
    config: EstimandConfig = field(default_factory=EstimandConfig)
    oracle: str | None = "auto"
    bootstrap: int = 0

    def oracle_id(self) -> str | None:
        if self.oracle != "auto":
            return self.oracle
        name, arg = parse_estimand(self.estimand)
        name = _ORACLE_OF.get(name, name)
        return name if arg is None else f"{name}({arg:g})"


@dataclass(frozen=True)
class McRow:
    label: str
    estimand: str
    oracle: OracleValue | None
    estimates: np.ndarray  # (reps,), NaN where the replicate failed
    se_plugin: np.ndarray
    se_bootstrap: np.ndarray
    covered: np.ndarray  # (reps,) 1/0, NaN without an oracle or se
    failure_kinds: dict

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.estimates)

    @property
    def failures(self) -> int:
        return int((~self.ok).sum())

    @property
    def failure_share(self) -> float:
        return self.failures / self.estimates.size

    @property
    def flagged(self) -> bool:
        return self.failure_share > FAILURE_FLAG_SHARE

    @property
    def mean(self) -> float:
        return float(np.mean(self.estimates[self.ok])) if self.ok.any() else float("nan")

    @property
    def sd(self) -> float:
        """Population (ddof=0) spread so that rmse^2 = bias^2 + sd^2."""
        return float(np.std(self.estimates[self.ok])) if self.ok.any() else float("nan")

    @property
    def mc_se(self) -> float:
        k = int(self.ok.sum())
        return float(np.std(self.estimates[self.ok], ddof=1) / np.sqrt(k)) if k > 1 else float("nan")

    @property
    def bias(self) -> float | None:
        return None if self.oracle is None else self.mean - self.oracle.value

    @property
    def rmse(self) -> float | None:
        if self.oracle is None or not self.ok.any():
            return None
        return float(np.sqrt(np.mean((self.estimates[self.ok] - self.oracle.value) ** 2)))

    @property
    def se_mean(self) -> float | None:
        s = self.se_plugin[np.isfinite(self.se_plugin)]
        return float(s.mean()) if s.size else None

    @property
    def coverage(self) -> float | None:
        c = self.covered[np.isfinite(self.covered)]
        return float(c.mean()) if c.size else None

    def to_dict(self) -> dict:
        b = self.se_bootstrap[np.isfinite(self.se_bootstrap)]
        return {
            "label": self.label,
            "estimand": self.estimand,
            "oracle": None if self.oracle is None else self.oracle.value,
            "oracle_error_bound": None if self.oracle is None else self.oracle.error_bound,
            "mean": self.mean,
            "bias": self.bias,
            "sd": self.sd,
            "rmse": self.rmse,
            "mc_se": self.mc_se,
            "se_plugin_mean": self.se_mean,
            "se_bootstrap_mean": float(b.mean()) if b.size else None,
            "coverage": self.coverage,
            "failures": self.failures,
            "failure_kinds": dict(self.failure_kinds),
            "flagged": self.flagged,
        }


@dataclass(frozen=True)
class McReport:
    spec: str
    n: int
    reps: int
    seed: int
    rows: tuple

    def row(self, label: str) -> McRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"spec": self.spec, "n": self.n, "reps": self.reps, "seed": self.seed,
                "estimators": [r.to_dict() for r in self.rows]}

    def to_table(self) -> str:
        head = f"{'estimator':<16}{'oracle':>10}{'mean':>10}{'bias':>10}{'sd':>9}{'rmse':>9}{'se':>9}{'cover':>7}{'fail':>6}"
        lines = [f"spec {self.spec}  n={self.n}  reps={self.reps}  seed={self.seed}", head]

        def fmt(x, w, p=4):
            return f"{'-':>{w}}" if x is None or not np.isfinite(x) else f"{x:>{w}.{p}f}"

        for r in self.rows:
            o = None if r.oracle is None else r.oracle.value
            lines.append(
                f"{r.label:<16}{fmt(o, 10)}{fmt(r.mean, 10)}{fmt(r.bias, 10)}{fmt(r.sd, 9)}{fmt(r.rmse, 9)}"
                f"{fmt(r.se_mean, 9)}{fmt(r.coverage, 7, 3)}{r.failures:>6}" + ("  flagged" if r.flagged else "")
            )
        return "\n".join(lines)


def _replicate(spec, estimators, n, seed, rep, level):
    d = generate(spec, n, seed=[seed, rep])
    out = [None] * len(estimators)
    groups = {}
    for j, e in enumerate(estimators):
        if not e.bootstrap:
            groups.setdefault(id(e.config), []).append(j)
    for idx in groups.values():
        reports = estimate_many(d, [estimators[j].estimand for j in idx], estimators[idx[0]].config, level)
        for j, r in zip(idx, reports):
            out[j] = r
    for j, e in enumerate(estimators):
        if e.bootstrap:
            try:
                out[j] = estimate(d, e.estimand, e.config, bootstrap=e.bootstrap, seed=rep, level=level)
            except DrcivError as exc:
                out[j] = exc
    return [_summary(r) for r in out]


def _summary(r):
    if isinstance(r, DrcivError):
        return (np.nan, np.nan, np.nan, None, r.kind)
    return (r.point, np.nan if r.se_plugin is None else r.se_plugin,
            np.nan if r.se_bootstrap is None else r.se_bootstrap,
            None if r.ci is None else r.ci[:2], None)


def monte_carlo(spec: DgpSpec, estimators, reps: int, n: int, seed: int = 0, workers: int = 1,
                level: float = 0.95, resolution: int = 200, draws: int = DEFAULT_DRAWS) -> McReport:
    """Run ``reps`` replications of every estimator on fresh draws from ``spec``.

    Replicate r uses data seed (seed, r), so serial and parallel runs agree.
    Oracle failures abort; estimator failures are counted per kind.
    """
    if reps < 2:
        raise SpecError("reps must be at least 2")
    estimators = tuple(estimators)
    verify_restrictions(spec)
    oracles = []
    for e in estimators:
        oid = e.oracle_id()
        oracles.append(None if oid is None else oracle(spec, oid, resolution, draws, pair=e.config.pair))
    results = map_jobs(_replicate, [(spec, estimators, n, seed, r, level) for r in range(reps)], workers)
    rows = []
    for j, e in enumerate(estimators):
        cells = [res[j] for res in results]
        est = np.array([c[0] for c in cells], dtype=float)
        se = np.array([c[1] for c in cells], dtype=float)
        seb = np.array([c[2] for c in cells], dtype=float)
        cov = np.full(reps, np.nan)
        if oracles[j] is not None:
            for r, c in enumerate(cells):
                if c[3] is not None:
                    cov[r] = float(c[3][0] <= oracles[j].value <= c[3][1])
        kinds = Counter(c[4] for c in cells if c[4] is not None)
        rows.append(McRow(e.label, e.estimand, oracles[j], est, se, seb, cov, dict(kinds)))
    return McReport(spec.name, n, reps, seed, tuple(rows))
