"""Estimate reports and their serialization."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

from scipy.stats import norm


def _stars(point, se):
    if se is None or se <= 0:
        return ""
    z = abs(point / se)
    return "***" if z > 2.576 else "**" if z > 1.96 else "*" if z > 1.645 else ""


@dataclass(frozen=True)
class EstimateReport:
    estimand_id: str
    point: float
    se_plugin: float | None = None
    se_bootstrap: float | None = None
    ci: tuple | None = None  # (lo, hi, level)
    ci_bootstrap: tuple | None = None
    trimmed_fraction: float = 0.0
    B_hat: float | None = None
    rho_n: float | None = None
    n: int | None = None
    per_pair: tuple = ()
    warnings: tuple = ()
    bootstrap_failures: int | None = None

    def with_plugin(self, se: float, level: float = 0.95) -> "EstimateReport":
        z = norm.ppf(0.5 + level / 2)
        return replace(self, se_plugin=float(se), ci=(self.point - z * se, self.point + z * se, level))

    def with_bootstrap(self, se: float, ci: tuple, failures: int = 0) -> "EstimateReport":
        out = replace(self, se_bootstrap=float(se), ci_bootstrap=tuple(ci), bootstrap_failures=int(failures))
        if self.ci is None:
            lvl = ci[2]
            z = norm.ppf(0.5 + lvl / 2)
            out = replace(out, ci=(self.point - z * se, self.point + z * se, lvl))
        return out

    def add_warnings(self, *msgs) -> "EstimateReport":
        return replace(self, warnings=tuple(self.warnings) + tuple(m for m in msgs if m))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_pair"] = [dict(p) for p in self.per_pair]
        out["warnings"] = list(self.warnings)
        for k in ("ci", "ci_bootstrap"):
            if out[k] is not None:
                out[k] = list(out[k])
        return out

    def table_row(self) -> str:
        se = self.se_plugin if self.se_plugin is not None else self.se_bootstrap
        se_txt = "" if se is None else f"({se:.4f})"
        return f"{self.estimand_id:<18} {self.point:>10.4f}{_stars(self.point, se):<3} {se_txt:>10}"


def format_table(reports) -> str:
    lines = [f"{'estimand':<18} {'estimate':>13} {'se':>10}", "-" * 43]
    for r in reports:
        lines.append(r.table_row())
        for p in r.per_pair:
            lines.append(f"  pair {p['pair'][0]}-{p['pair'][1]}  point {p['point']:.4f}  lambda {p['lambda']:.4f}")
    lines.append("-" * 43)
    lines.append("se in parentheses; * p<0.10, ** p<0.05, *** p<0.01")
    return "\n".join(lines)


def finite_or_none(x):
    return None if x is None or not math.isfinite(x) else float(x)
