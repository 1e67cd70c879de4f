"""Point estimands: Wald ratios, pi(x, v), pi(v), the doubly robust
aggregate and its signed parts, multi-valued instrument weights."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import (
    AllTrimmedError,
    DrcivError,
    EmptySignSetError,
    PairError,
    SingularDesignError,
    SupportError,
    WeakFirstStageError,
)
from .quantreg import QuantileFit, QuantileGrid, fit_grid, qr_influence, quantile_matrix
from .report import EstimateReport
from .sieve import BasisSpec, SeriesFit, fit_series, predict_dm_dt, predict_m

SIGN_MODES = ("abs", "positive", "negative")
WEAK_REL_TOL = 1e-3
WEAK_T = 1.96


@dataclass(frozen=True)
class TrimmingSpec:
    """Trimming threshold rule; ``rho_n`` is filled in once resolved."""

    rule: str = "baseline"
    multiplier: float = 1.0
    value: float | None = None
    rho_n: float | None = None
    notes: tuple = ()

    def __post_init__(self):
        if self.rule not in ("baseline", "multiple", "fixed"):
            raise ValueError(f"unknown trimming rule {self.rule!r}")
        if self.rule == "fixed" and (self.value is None or not self.value >= 0):
            raise ValueError("fixed trimming needs a nonnegative value")
        if self.rule == "multiple" and not self.multiplier > 0:
            raise ValueError("trimming multiple must be positive")
        if self.rho_n is not None and not (math.isfinite(self.rho_n) and self.rho_n >= 0):
            raise ValueError("rho_n must be finite and nonnegative")

    @classmethod
    def baseline(cls):
        return cls("baseline")

    @classmethod
    def multiple(cls, m: float):
        return cls("multiple", multiplier=float(m))

    @classmethod
    def fixed(cls, value: float):
        return cls("fixed", value=float(value), rho_n=float(value))

    def to_dict(self) -> dict:
        out = {"rule": self.rule}
        if self.rule == "multiple":
            out["multiplier"] = self.multiplier
        if self.rule == "fixed":
            out["value"] = self.value
        return out


@dataclass(frozen=True)
class EstimandConfig:
    grid: QuantileGrid = field(default_factory=QuantileGrid)
    basis: BasisSpec = field(default_factory=BasisSpec)
    trimming: TrimmingSpec = field(default_factory=TrimmingSpec)
    sign_mode: str = "abs"
    use_covariates: bool = True
    pair: tuple = (0, 1)
    multi: bool = False
    rearrange: bool = True

    def __post_init__(self):
        if self.sign_mode not in SIGN_MODES:
            raise ValueError(f"sign_mode must be one of {SIGN_MODES}")

    def to_dict(self) -> dict:
        return {
            "l": self.grid.l,
            "basis": self.basis.to_dict(),
            "trimming": self.trimming.to_dict(),
            "sign_mode": self.sign_mode,
            "use_covariates": self.use_covariates,
            "pair": list(self.pair),
            "multi": self.multi,
            "rearrange": self.rearrange,
        }


# ---------------------------------------------------------------------------
# evaluation of the fitted surfaces on (X_i, v)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Surface:
    X: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    m0: np.ndarray
    m1: np.ndarray
    g0: np.ndarray  # d m_0 / dt at q0
    g1: np.ndarray
    clipped: int = 0

    @cached_property
    def dq(self) -> np.ndarray:
        return self.q1 - self.q0

    @cached_property
    def dm(self) -> np.ndarray:
        return self.m1 - self.m0

    @property
    def shape(self):
        return self.q0.shape


def _clip_support(sf: SeriesFit, q: np.ndarray):
    if sf.spec.family != "bspline":
        return q, 0
    lo, hi = sf.spec.t_range
    out = np.clip(q, lo, hi)
    return out, int(np.count_nonzero(out != q))


def evaluate_surface(qf: QuantileFit, sf: SeriesFit, rearrange: bool = True, X=None) -> Surface:
    X = qf.covariates if X is None else np.atleast_2d(np.asarray(X, dtype=float))
    q0 = quantile_matrix(qf, X, 0, rearrange)
    q1 = quantile_matrix(qf, X, 1, rearrange)
    e0, c0 = _clip_support(sf, q0)
    e1, c1 = _clip_support(sf, q1)
    Xb = X[:, None, :]
    return Surface(
        X=X,
        q0=q0,
        q1=q1,
        m0=predict_m(sf, Xb, e0, 0),
        m1=predict_m(sf, Xb, e1, 1),
        g0=predict_dm_dt(sf, Xb, e0, 0),
        g1=predict_dm_dt(sf, Xb, e1, 1),
        clipped=c0 + c1,
    )


def kappa(dq: np.ndarray, rho: float, mode: str = "abs") -> np.ndarray:
    """Sign indicator: sgn for abs, chi_+ for positive, chi_- for negative."""
    if mode == "abs":
        return (dq >= rho).astype(float) - (dq <= -rho).astype(float)
    if mode == "positive":
        return (dq >= rho).astype(float)
    return (dq <= -rho).astype(float)


def dr_weights(dq: np.ndarray, rho: float, mode: str = "abs") -> np.ndarray:
    """Normalized nonnegative weights over the kept cells."""
    w = dq * kappa(dq, rho, mode)
    if mode == "negative":
        w = -w
    tot = w.sum()
    if tot <= 0:
        raise AllTrimmedError("no cells survive trimming", rho_n=rho)
    return w / tot


def _ratio_cells(dm, dq, rho):
    keep = np.abs(dq) >= rho
    out = np.zeros_like(dq)
    nz = keep & (dq != 0)
    out[nz] = dm[nz] / dq[nz]
    return out


# ---------------------------------------------------------------------------
# fits for one instrument pair
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PairFits:
    qf: QuantileFit
    sf: SeriesFit
    qinf: object
    trim: TrimmingSpec
    surface: Surface
    pair: tuple
    warnings: tuple = ()

    @property
    def rho(self) -> float:
        return float(self.trim.rho_n)


def resolve_trimming(qf, d, trimming: TrimmingSpec, qinf=None) -> TrimmingSpec:
    if trimming.rho_n is not None:
        return trimming
    from .inference import trim_threshold

    return trim_threshold(qf, d, trimming, qinf=qinf)


def fit_pair(d, config: EstimandConfig, pair=None, outcome=None) -> PairFits:
    pair = tuple(config.pair if pair is None else pair)
    qf = fit_grid(d, config.grid, pair, use_covariates=config.use_covariates)
    sf = fit_series(d, config.basis, pair, use_covariates=config.use_covariates, outcome=outcome)
    qinf = qr_influence(qf)
    trim = resolve_trimming(qf, d, config.trimming, qinf)
    surface = evaluate_surface(qf, sf, config.rearrange)
    notes = list(qf.warnings) + list(sf.warnings) + list(trim.notes)
    if surface.clipped:
        notes.append(f"{surface.clipped} quantile evaluations clipped to the spline support")
    return PairFits(qf=qf, sf=sf, qinf=qinf, trim=trim, surface=surface, pair=pair, warnings=tuple(notes))


# ---------------------------------------------------------------------------
# Wald ratios
# ---------------------------------------------------------------------------


def _weak_check(den, se, sd_t, pair, weak_t=None):
    if abs(den) < WEAK_REL_TOL * sd_t or (weak_t and se is not None and se > 0 and abs(den) < weak_t * se):
        raise WeakFirstStageError(
            f"weak first stage for pair {tuple(pair)}: denominator {den:.4g} (se {se if se is None else round(se, 6)})",
            denominator=float(den),
            se=None if se is None else float(se),
            pair=list(pair),
        )


def wald(d, pair=(0, 1), weak_t: float | None = WEAK_T) -> EstimateReport:
    """(Ybar_1 - Ybar_0) / (Tbar_1 - Tbar_0) on the cells of ``pair``.

    A weak first stage is declared when the denominator is below 1e-3 sd(T)
    or, when cell sizes allow a standard error, when it is not significant at
    |t| < ``weak_t`` (pass ``None`` to disable the test-based gate).
    """
    idx, _, zind = d.pair_view(pair)
    y, t = d.outcome[idx], d.treatment[idx]
    one = zind == 1
    n1, n0 = int(one.sum()), int((~one).sum())
    num = y[one].mean() - y[~one].mean()
    den = t[one].mean() - t[~one].mean()
    se_den = None
    if min(n0, n1) >= 2:
        se_den = math.sqrt(t[one].var(ddof=1) / n1 + t[~one].var(ddof=1) / n0)
    sd_t = float(np.std(t)) if t.size > 1 else 0.0
    _weak_check(den, se_den, sd_t, pair, weak_t)
    point = num / den
    rep = EstimateReport("wald", float(point), n=int(idx.size))
    if min(n0, n1) >= 2:
        r1 = n1 / idx.size
        r0 = 1 - r1
        ifn = np.where(one, (y - y[one].mean()) / r1, -(y - y[~one].mean()) / r0)
        ifd = np.where(one, (t - t[one].mean()) / r1, -(t - t[~one].mean()) / r0)
        infl = (ifn - point * ifd) / den
        rep = rep.with_plugin(math.sqrt(np.mean(infl**2) / idx.size))
    return rep


def _wald_x_parts(d, pair, use_covariates=True):
    idx, X, zind = d.pair_view(pair)
    if not use_covariates:
        X = X[:, :0]
    n = idx.size
    W = np.column_stack([np.ones(n), X, zind, zind[:, None] * X])
    if np.linalg.matrix_rank(W) < W.shape[1]:
        raise SingularDesignError("Wald_X design is collinear", pair=list(pair))
    M = W.T @ W / n
    Minv = np.linalg.inv(M)
    dW = np.column_stack([np.zeros((n, X.shape[1] + 1)), np.ones(n), X])
    dbar = dW.mean(axis=0)
    out = []
    for v in (d.outcome[idx], d.treatment[idx]):
        b = np.linalg.solve(W.T @ W, W.T @ v)
        e = v - W @ b
        eff = dW @ b
        stat = eff.mean()
        infl = (eff - stat) + (W @ (Minv @ dbar)) * e
        out.append((stat, infl))
    return idx, out


def wald_x(d, pair=(0, 1), weak_t: float | None = WEAK_T, use_covariates: bool = True) -> EstimateReport:
    """Covariate-adjusted Wald ratio from fully interacted linear fits."""
    idx, ((num, ifn), (den, ifd)) = _wald_x_parts(d, pair, use_covariates)
    n = idx.size
    se_den = math.sqrt(np.mean(ifd**2) / n)
    _weak_check(den, se_den, float(np.std(d.treatment[idx])), pair, weak_t)
    point = num / den
    infl = (ifn - point * ifd) / den
    return EstimateReport("wald_x", float(point), n=int(n)).with_plugin(math.sqrt(np.mean(infl**2) / n))


# ---------------------------------------------------------------------------
# pi(x, v), pi(v), pi^DR
# ---------------------------------------------------------------------------


def pi_xv(qf: QuantileFit, sf: SeriesFit, x, v: float, trim: TrimmingSpec, rearrange: bool = True) -> float:
    j = qf.grid.index(v)
    x = np.atleast_1d(np.asarray(x, dtype=float))[: qf.d_x]
    s = evaluate_surface(qf, sf, rearrange, X=x[None, :])
    return float(_ratio_cells(s.dm[:, j], s.dq[:, j], trim.rho_n or 0.0)[0])


def pi_xv_surface(surface: Surface, rho: float) -> np.ndarray:
    """pi(X_i, v) for every row and grid point."""
    return _ratio_cells(surface.dm, surface.dq, rho)


def _pi_v_from(surface: Surface, j: int, rho: float, mode: str, v: float):
    dq = surface.dq[:, j]
    k = kappa(dq, rho, mode)
    if not np.any(np.abs(dq) >= rho) or not k.any():
        raise AllTrimmedError(f"every observation is trimmed at v={v:.6g}", v=v, rho_n=rho)
    w = dr_weights(dq, rho, mode)
    return float((surface.dm[:, j] * k).sum() / (dq * k).sum()), w


def pi_v(qf, sf, d, v: float, trim: TrimmingSpec, sign_mode: str = "abs", rearrange: bool = True) -> float:
    trim = resolve_trimming(qf, d, trim)
    j = qf.grid.index(v)
    s = evaluate_surface(qf, sf, rearrange)
    return _pi_v_from(s, j, trim.rho_n, sign_mode, v)[0]


def dr_from_surface(surface: Surface, rho: float, mode: str = "abs", estimand_id: str | None = None, n=None):
    dq = surface.dq
    keep = np.abs(dq) >= rho
    if not keep.any() or not np.any(np.abs(dq[keep]) > 0):
        raise AllTrimmedError("every (i, v) cell is trimmed", rho_n=rho)
    k = kappa(dq, rho, mode)
    if not k.any() or not np.any(dq * k != 0):
        raise EmptySignSetError(f"no cells with {mode} quantile change beyond the threshold", rho_n=rho, mode=mode)
    A = float(np.mean(surface.dm * k))
    B = float(np.mean(dq * k))
    sid = estimand_id or {"abs": "pi_dr", "positive": "pi_dr_plus", "negative": "pi_dr_minus"}[mode]
    return EstimateReport(
        sid,
        A / B,
        trimmed_fraction=float(np.mean(~keep)),
        B_hat=B,
        rho_n=float(rho),
        n=n,
    )


def pi_dr(qf, sf, d, config: EstimandConfig) -> EstimateReport:
    trim = resolve_trimming(qf, d, config.trimming)
    s = evaluate_surface(qf, sf, config.rearrange)
    rep = dr_from_surface(s, trim.rho_n, config.sign_mode, n=qf.n)
    return rep.add_warnings(*qf.warnings, *sf.warnings)


def pi_dr_fits(pf: PairFits, mode: str = "abs", estimand_id=None) -> EstimateReport:
    rep = dr_from_surface(pf.surface, pf.rho, mode, estimand_id=estimand_id, n=pf.qf.n)
    return rep.add_warnings(*pf.warnings)


# ---------------------------------------------------------------------------
# multi-valued instruments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaWeights:
    order: tuple  # codes sorted by cell mean of T
    lam: np.ndarray  # (K,)
    p_hat: np.ndarray  # cell means, in ``order``
    r_hat: np.ndarray  # cell shares, in ``order``
    p_bar: float
    warnings: tuple = ()

    @property
    def pairs(self):
        return [(self.order[k - 1], self.order[k]) for k in range(1, len(self.order))]


def lambda_weights(d) -> LambdaWeights:
    K = d.K
    t = d.treatment
    means = np.array([math.fsum(t[d.instrument == k].tolist()) / np.count_nonzero(d.instrument == k) for k in range(K + 1)])
    shares = np.bincount(d.instrument, minlength=K + 1) / d.n
    pbar = math.fsum(t.tolist()) / d.n
    order = np.argsort(means, kind="stable")
    p, r = means[order], shares[order]
    notes = []
    sd_t = float(np.std(t))
    if np.any(np.diff(p) <= 1e-10 * max(sd_t, 1e-300)):
        msg = "tied treatment cell means; ties broken by code order"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    tail = np.array([np.sum(r[k:] * (p[k:] - pbar)) for k in range(1, K + 1)])
    A = np.diff(p) * tail
    total = A.sum()
    if not total > 0 or math.sqrt(total) < WEAK_REL_TOL * sd_t:
        raise WeakFirstStageError(
            "treatment cell means are (nearly) equal; instrument weights undefined",
            kind_detail="weak_multi_first_stage",
            spread=float(math.sqrt(max(total, 0.0))),
        )
    lam = A / total
    return LambdaWeights(tuple(int(c) for c in order), lam, p, r, float(pbar), tuple(notes))


def multi_pair_fits(d, config: EstimandConfig, lw: LambdaWeights | None = None, outcome=None):
    lw = lw or lambda_weights(d)
    fits, skipped = [], []
    for k, pair in enumerate(lw.pairs):
        try:
            fits.append(fit_pair(d, config, pair=pair, outcome=outcome))
        except DrcivError as exc:
            raise PairError(f"pair {pair} failed: {exc}", pair=list(pair), cause=exc.to_dict()) from exc
    return lw, fits


def aggregate_multi(lw: LambdaWeights, fits, mode: str = "abs") -> tuple[EstimateReport, list]:
    points, reps, notes = [], [], list(lw.warnings)
    for k, pf in enumerate(fits):
        try:
            rep = pi_dr_fits(pf, mode)
        except (AllTrimmedError, EmptySignSetError) as exc:
            if lw.lam[k] <= 1e-12:
                notes.append(f"pair {pf.pair} fully trimmed with zero weight; skipped")
                rep = EstimateReport("pi_dr", 0.0, trimmed_fraction=1.0, B_hat=0.0, rho_n=pf.rho)
            else:
                raise PairError(f"pair {pf.pair} failed: {exc}", pair=list(pf.pair), cause=exc.to_dict()) from exc
        reps.append(rep)
        points.append(rep.point)
    agg = float(np.dot(lw.lam, points))
    per_pair = tuple(
        {
            "pair": list(pf.pair),
            "point": r.point,
            "lambda": float(lw.lam[k]),
            "B_hat": r.B_hat,
            "rho_n": r.rho_n,
            "trimmed_fraction": r.trimmed_fraction,
        }
        for k, (pf, r) in enumerate(zip(fits, reps))
    )
    trimmed = float(np.mean([r.trimmed_fraction for r in reps]))
    sid = {"abs": "pi_dr_multi", "positive": "pi_dr_multi_plus", "negative": "pi_dr_multi_minus"}[mode]
    rep = EstimateReport(sid, agg, trimmed_fraction=trimmed, per_pair=per_pair, warnings=tuple(notes))
    return rep, reps


def pi_dr_multi(d, config: EstimandConfig, outcome=None) -> EstimateReport:
    if d.K < 2:
        raise SupportError("multi-valued estimand needs at least three instrument cells", K=d.K)
    lw, fits = multi_pair_fits(d, config, outcome=outcome)
    rep, _ = aggregate_multi(lw, fits, config.sign_mode)
    return replace(rep, n=d.n)


def wald_x_multi(d, use_covariates: bool = True) -> EstimateReport:
    """Sum_k lambda_k wald_x_k over ordered adjacent pairs."""
    lw = lambda_weights(d)
    reps = [wald_x(d, pair, weak_t=None, use_covariates=use_covariates) for pair in lw.pairs]
    per_pair = tuple(
        {"pair": list(p), "point": r.point, "lambda": float(lw.lam[k])} for k, (p, r) in enumerate(zip(lw.pairs, reps))
    )
    agg = float(np.dot(lw.lam, [r.point for r in reps]))
    return EstimateReport("wald_x_multi", agg, per_pair=per_pair, n=d.n, warnings=lw.warnings)


def distributional_dr(d, y_threshold: float, config: EstimandConfig) -> EstimateReport:
    """Doubly robust estimate with the outcome replaced by 1(Y <= y_threshold)."""
    ind = (d.outcome <= y_threshold).astype(float)
    if config.multi:
        rep = pi_dr_multi(d, config, outcome=ind)
    else:
        pf = fit_pair(d, config, outcome=ind)
        rep = pi_dr_fits(pf, config.sign_mode)
    return replace(rep, estimand_id=f"distributional({y_threshold:g})")
