"""Influence-function standard errors, the pairs bootstrap and the
multiplier score bootstrap."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import AllTrimmedError, BootstrapUnstableError, DrcivError, EmptySignSetError
from .estimands import (
    EstimandConfig,
    LambdaWeights,
    PairFits,
    TrimmingSpec,
    evaluate_surface,
    kappa,
    resolve_trimming,
)
from .quantreg import QuantileFit, delta_design, qr_influence, stack_design
from .sieve import build_basis

_MODE_CODE = {"abs": 0, "positive": 1, "negative": 2}
DEGENERATE_SE = 1e-9


# ---------------------------------------------------------------------------
# trimming threshold
# ---------------------------------------------------------------------------


def baseline_rho(qf: QuantileFit, qinf=None) -> tuple[float, tuple]:
    qinf = qinf or qr_influence(qf)
    se = qinf.se_dq_matrix(qf.covariates)
    smin = float(se.min())
    scale = float(np.std(qf.response)) or 1.0
    if smin <= DEGENERATE_SE * scale:
        msg = "standard errors of the quantile change are degenerate; trimming threshold set to 0"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        return 0.0, (msg,)
    return 1.96 * smin / math.log(qf.n), ()


def trim_threshold(qf: QuantileFit, d=None, rule: TrimmingSpec | str = "baseline", qinf=None) -> TrimmingSpec:
    """Resolve the trimming rule into a numeric threshold rho_n.

    baseline: 1.96 min_{i,v} se(Delta q(X_i, v)) / log(n); ``multiple`` scales
    the baseline; ``fixed`` passes its value through.
    """
    if isinstance(rule, str):
        rule = TrimmingSpec(rule)
    if rule.rule == "fixed":
        return replace(rule, rho_n=float(rule.value))
    base, notes = baseline_rho(qf, qinf)
    m = rule.multiplier if rule.rule == "multiple" else 1.0
    return replace(rule, rho_n=m * base, notes=notes)


# ---------------------------------------------------------------------------
# influence functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InfluenceDecomposition:
    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    b_hat: float
    n: int
    r4: np.ndarray | None = None
    per_pair: tuple = ()
    flagged_v: tuple = ()

    @property
    def total(self) -> np.ndarray:
        """Influence of the estimator itself, (R1 + R2 + R3) / B (+ R4 for multi)."""
        if self.r4 is not None:
            return self.r1 + self.r4
        return (self.r1 + self.r2 + self.r3) / self.b_hat

    @property
    def sigma(self) -> float:
        return float(np.sqrt(np.mean(self.total**2)))

    @property
    def se(self) -> float:
        return self.sigma / math.sqrt(self.n)


def _iota(dq_col: np.ndarray, n: int, fallback: float) -> float:
    sd = float(np.std(dq_col))
    if sd <= 1e-12 * max(fallback, 1e-300):
        sd = fallback
    return n ** (-0.25) * sd


def _grad_terms(s, dS, S0, S1, k, resid, point, rho, mode, iotas):
    """Population gradient of (Delta m - pi Delta q) kappa w.r.t. a(v), per v (l, p)."""
    n, l = k.shape
    base = (
        (s.g1 * k).T @ S1
        - (s.g0 * k).T @ S0
        - point * (k.T @ dS)
    ) / n
    code = _MODE_CODE[mode]
    dq = s.dq
    for j in range(l):
        base[j] += kernels.trim_grad(
            np.ascontiguousarray(dq[:, j]), np.ascontiguousarray(resid[:, j]), dS, float(rho), iotas[j], code
        )
    return base


def _delta_psi_sum(sf, s, k: np.ndarray) -> np.ndarray:
    """sum_{i,v} Delta psi_i(v) kappa_i(v), using the same clipping as the surface."""
    from .estimands import _clip_support

    e0, _ = _clip_support(sf, s.q0)
    e1, _ = _clip_support(sf, s.q1)
    # psi(x, e1, 1) - psi(x, e0, 0) = (0, B(e1) - B(e0), x, B(e1))
    B0, B1 = sf.spec.t_block(e0), sf.spec.t_block(e1)
    kB1 = np.einsum("ivj,iv->j", B1, k)
    kB0 = np.einsum("ivj,iv->j", B0, k)
    kx = s.X.T @ k.sum(axis=1)
    return np.concatenate([np.zeros_like(kx), kB1 - kB0, kx, kB1])


def _channels(pf: PairFits, point: float, mode: str, cols=None):
    s = pf.surface
    qf, sf, qinf = pf.qf, pf.sf, pf.qinf
    rho = pf.rho
    n = qf.n
    cols = np.arange(qf.grid.l) if cols is None else np.asarray(cols)
    sub = s if cols.size == qf.grid.l else _subsurface(s, cols)
    k = kappa(sub.dq, rho, mode)
    resid = sub.dm - point * sub.dq
    lv = cols.size
    r3 = np.mean(resid * k, axis=1)
    D = _delta_psi_sum(sf, sub, k) / (n * lv)
    r2 = (sf.design @ (sf.gram_pinv @ D)) * sf.residuals
    X = qf.covariates
    dS, S0, S1 = delta_design(X), stack_design(X, 0), stack_design(X, 1)
    fallback = float(np.std(s.dq))
    iotas = [_iota(s.dq[:, j], n, fallback) for j in cols]
    grad = _grad_terms(sub, np.ascontiguousarray(dS), S0, S1, k, resid, point, rho, mode, iotas)
    r1 = np.einsum("vip,vp->i", qinf.phi[cols], grad) / lv
    b = float(np.mean(sub.dq * k))
    flagged = tuple(float(qf.grid.points[j]) for j in cols if qf.ill_conditioned[j])
    return InfluenceDecomposition(r1=r1, r2=r2, r3=r3, b_hat=b, n=n, flagged_v=flagged)


def _subsurface(s, cols):
    return replace(s, q0=s.q0[:, cols], q1=s.q1[:, cols], m0=s.m0[:, cols], m1=s.m1[:, cols], g0=s.g0[:, cols], g1=s.g1[:, cols])


def _as_pairfits(qf, sf, d, config: EstimandConfig) -> PairFits:
    qinf = qr_influence(qf)
    trim = resolve_trimming(qf, d, config.trimming, qinf)
    s = evaluate_surface(qf, sf, config.rearrange)
    return PairFits(qf=qf, sf=sf, qinf=qinf, trim=trim, surface=s, pair=qf.pair)


def influence_pi_dr(qf, sf=None, d=None, config: EstimandConfig | None = None, point: float | None = None,
                    mode: str | None = None) -> InfluenceDecomposition:
    """Influence decomposition of the doubly robust estimate.

    Accepts either ``(qf, sf, d, config, point)`` or a ``PairFits`` as first
    argument followed by ``point``.
    """
    if isinstance(qf, PairFits):
        pf = qf
        point = sf if point is None else point
        mode = mode or (config.sign_mode if config else "abs")
    else:
        config = config or EstimandConfig()
        pf = _as_pairfits(qf, sf, d, config)
        mode = mode or config.sign_mode
    return _channels(pf, float(point), mode)


def influence_pi_v(qf, sf=None, d=None, v: float | None = None, config: EstimandConfig | None = None,
                   point: float | None = None, mode: str | None = None) -> InfluenceDecomposition:
    """Pointwise version at grid point v (no averaging over the grid)."""
    if isinstance(qf, PairFits):
        pf = qf
        mode = mode or (config.sign_mode if config else "abs")
    else:
        config = config or EstimandConfig()
        pf = _as_pairfits(qf, sf, d, config)
        mode = mode or config.sign_mode
    j = pf.qf.grid.index(v)
    return _channels(pf, float(point), mode, cols=[j])


def numeric_weight_derivative(qf, sf, d, v: float, iota: float, point: float, rho: float | None = None,
                              sign_mode: str = "abs", rearrange: bool = True) -> np.ndarray:
    """Central difference in a(v) of n^-1 sum (Delta m - pi Delta q) kappa(Delta S'a)."""
    j = qf.grid.index(v)
    if rho is None:
        rho = trim_threshold(qf, d).rho_n
    s = evaluate_surface(qf, sf, rearrange)
    dq = np.ascontiguousarray(s.dq[:, j])
    resid = np.ascontiguousarray(s.dm[:, j] - point * dq)
    dS = np.ascontiguousarray(delta_design(qf.covariates))
    return kernels.trim_grad(dq, resid, dS, float(rho), float(iota), _MODE_CODE[sign_mode])


def influence_multi(d, config: EstimandConfig, fits, lw: LambdaWeights, points, point_multi: float,
                    mode: str = "abs") -> InfluenceDecomposition:
    """Influence of sum_k lambda_k pi_k with estimated lambda.

    Pairwise influences are embedded through the cell indicators; the R4
    channel is the influence of the lambda weights, built from the influence
    of each A_k = (p_k - p_{k-1}) P_k with P_k = sum_{l>=k} r_l (p_l - pbar).
    """
    n = d.n
    t = d.treatment
    order = lw.order
    Dm = np.stack([(d.instrument == c).astype(float) for c in order])  # (K+1, n)
    p, r, pbar = lw.p_hat, lw.r_hat, lw.p_bar
    K = len(order) - 1
    main = np.zeros(n)
    per_pair = []
    for k, pf in enumerate(fits):
        if lw.lam[k] <= 1e-12 and pf is None:
            continue
        dec = _channels(pf, float(points[k]), mode)
        emb = np.zeros(n)
        share = pf.qf.n / n
        emb[pf.qf.subsample_index] = (dec.r1 + dec.r2 + dec.r3) / (share * dec.b_hat)
        main += lw.lam[k] * emb
        per_pair.append(dec)
    if_q = [None] + [
        (t - p[k]) * Dm[k] / r[k] - (t - p[k - 1]) * Dm[k - 1] / r[k - 1] for k in range(1, K + 1)
    ]
    P = [None] + [float(np.sum(r[k:] * (p[k:] - pbar))) for k in range(1, K + 1)]
    if_p = [None] + [((Dm[k:] - r[k:, None]) * (t - pbar)).sum(axis=0) - P[k] for k in range(1, K + 1)]
    Q = np.diff(p)
    total = float(np.sum(Q * np.array(P[1:])))
    r4 = np.zeros(n)
    for k in range(1, K + 1):
        if_a = if_q[k] * P[k] + Q[k - 1] * if_p[k]
        r4 += if_a * (points[k - 1] - point_multi) / total
    return InfluenceDecomposition(
        r1=main, r2=np.zeros(n), r3=np.zeros(n), b_hat=1.0, n=n, r4=r4, per_pair=tuple(per_pair)
    )


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci: tuple  # (lo, hi, level)
    estimates: np.ndarray
    failures: int
    B: int

    @property
    def failure_share(self) -> float:
        return self.failures / self.B


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


def _one_replicate(d, estimator, seed, b):
    rng = replicate_rng(seed, b)
    rows = rng.integers(0, d.n, size=d.n)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return float(estimator(d.take(rows)))
    except (DrcivError, np.linalg.LinAlgError, FloatingPointError):
        return float("nan")


def map_jobs(func, args, workers: int = 1):
    """Apply ``func`` over ``args`` in order; parallel when workers > 1."""
    if workers and workers > 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=workers)(delayed(func)(*a) for a in args)
    return [func(*a) for a in args]


def pairs_bootstrap(d, estimator, B: int = 200, seed: int = 0, level: float = 0.95, workers: int = 1,
                    max_failure_share: float = 0.2) -> BootstrapResult:
    """Nonparametric bootstrap over rows.

    ``estimator`` maps a Dataset to a float (typically the full pipeline).
    Replicates that raise are dropped and counted.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    vals = np.asarray(map_jobs(_one_replicate, [(d, estimator, seed, b) for b in range(B)], workers))
    ok = np.isfinite(vals)
    failures = int(B - ok.sum())
    if failures > max_failure_share * B or ok.sum() < 2:
        raise BootstrapUnstableError(
            f"{failures} of {B} bootstrap replicates failed", failures=failures, B=B
        )
    good = vals[ok]
    alpha = 1 - level
    lo, hi = np.quantile(good, [alpha / 2, 1 - alpha / 2])
    return BootstrapResult(float(np.std(good, ddof=1)), (float(lo), float(hi), level), vals, failures, B)


def _multipliers(rng, shape, law: str):
    if law == "normal":
        return rng.standard_normal(shape)
    if law == "rademacher":
        return rng.choice([-1.0, 1.0], size=shape)
    if law == "mammen":
        s5 = math.sqrt(5)
        a, b = -(s5 - 1) / 2, (s5 + 1) / 2
        pa = (s5 + 1) / (2 * s5)
        return np.where(rng.random(shape) < pa, a, b)
    raise ValueError(f"unknown multiplier law {law!r}")


@dataclass(frozen=True)
class ScoreBand:
    z_star: float
    points: tuple  # (x, v) kept
    pi: np.ndarray
    sigma: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n: int
    dropped: int = 0


def score_bootstrap_band(sf, qf, d, eval_set, B: int = 1000, level: float = 0.05, seed: int = 0,
                         multiplier: str = "normal", rho: float | None = None, rearrange: bool = True,
                         chunk: int = 500) -> ScoreBand:
    """Critical value for a uniform band over ``eval_set`` of (x, v) points.

    ``level`` is the significance level: z* is the (1 - level) quantile of the
    sup over the set of |z*_n(x, v)|.
    """
    if rho is None:
        rho = trim_threshold(qf, d).rho_n
    pts, rows = [], []
    for x, v in eval_set:
        x = np.atleast_1d(np.asarray(x, dtype=float))[: qf.d_x]
        rows.append((x, qf.grid.index(v)))
    X = np.array([r[0] for r in rows]).reshape(len(rows), qf.d_x)
    s = evaluate_surface(qf, sf, rearrange, X=X)
    js = np.array([r[1] for r in rows])
    ii = np.arange(len(rows))
    dq = s.dq[ii, js]
    keep = np.abs(dq) >= rho
    if not keep.any():
        raise AllTrimmedError("every evaluation point is trimmed", rho_n=rho)
    Xb = X[:, None, :]
    from .estimands import _clip_support

    e0, _ = _clip_support(sf, s.q0[ii, js][:, None])
    e1, _ = _clip_support(sf, s.q1[ii, js][:, None])
    dpsi = (build_basis(sf.spec, Xb, e1, 1) - build_basis(sf.spec, Xb, e0, 0))[:, 0, :]
    dpsi, dq = dpsi[keep], dq[keep]
    dm = (s.dm[ii, js])[keep]
    n = sf.n
    sigma = np.sqrt(np.einsum("mp,pq,mq->m", dpsi, sf.mho, dpsi)) / np.abs(dq)
    L = (dpsi @ sf.gram_pinv) / (dq * sigma * math.sqrt(n))[:, None]
    score = sf.design * sf.residuals[:, None]  # (n, P)
    rng = np.random.default_rng(seed)
    sups = np.empty(B)
    for start in range(0, B, chunk):
        m = min(chunk, B - start)
        W = _multipliers(rng, (n, m), multiplier)
        Zs = L @ (score.T @ W)
        sups[start : start + m] = np.abs(Zs).max(axis=0)
    zs = float(np.quantile(sups, 1 - level))
    pi = dm / dq
    half = zs * sigma / math.sqrt(n)
    kept = tuple(pt for pt, kk in zip(eval_set, keep) if kk)
    return ScoreBand(zs, kept, pi, sigma, pi - half, pi + half, n, int((~keep).sum()))
