"""Brute-force population values of the estimands for a DgpSpec.

The rank v is integrated on a midpoint grid; covariates, outcome
disturbances and coupling latents by scrambled Sobol points with a fixed
seed.  Every estimand is a combination of averages of the form
E_x E_v [f(x, v) w(x)], so the error bound combines a Richardson
comparison against the half-resolution grid with the spread across
independent scramblings.
"""
from __future__ import annotations

import re
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from ..errors import ResolutionError, SpecError
from .spec import DgpSpec

DEFAULT_DRAWS = 2**16
SCRAMBLES = 8
_SEED = 8675309
_CHUNK = 2_000_000
_GL_NODES = 16

ORACLE_IDS = (
    "tau_u",
    "pi_v",
    "tau_dr",
    "tau_dr_plus",
    "tau_dr_minus",
    "pi_dr",
    "pi_dr_plus",
    "pi_dr_minus",
    "wald_weighted_late",
    "wald_x",
    "wald",
    "pi_dr_multi",
    "distributional",
)
_PAT = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*$")


class OracleValue(NamedTuple):
    value: float
    error_bound: float


def parse_oracle_id(text: str):
    m = _PAT.match(text)
    if not m or m.group(1) not in ORACLE_IDS:
        raise SpecError(f"unknown oracle estimand {text!r}; choose from {', '.join(ORACLE_IDS)}")
    name, arg = m.group(1), m.group(2)
    if name in ("tau_u", "pi_v", "distributional") and arg is None:
        raise SpecError(f"{name} needs an argument")
    return name, None if arg is None else float(arg)


class _Block:
    """Structural quantities for one chunk of v values and one point set."""

    def __init__(self, spec: DgpSpec, v, pts):
        self.spec = spec
        self.v = v[:, None]
        dw, m = spec.d_w, spec.n_eta
        self.X = spec.covariate_values(pts[:, :dw])[None]
        u = np.clip(pts[:, dw:], 1e-15, 1 - 1e-15)
        self.eta = ndtri(u[None, :, :m]) if m else np.zeros((1, pts.shape[0], 0))
        self.xi = ndtri(u[None, :, m]) if spec.coupling == "similar" else np.zeros((1, pts.shape[0]))
        self._cache = {}

    def q(self, z):
        key = ("q", z)
        if key not in self._cache:
            self._cache[key] = self.spec.treatment(z, self.X, self.v)
        return self._cache[key]

    def g(self, z, cond, transform=None):
        """g(T_z(x, v), x, V, eta) with V drawn given U_cond = v."""
        key = ("g", z, cond, transform)
        if key not in self._cache:
            V = self.spec.latent_given_rank(cond, self.v, self.eta, self.xi)
            y = self.spec.outcome_value(self.q(z), self.X, V, self.eta)
            if transform is not None:
                y = (y <= transform).astype(float)
            self._cache[key] = y
        return self._cache[key]

    def dg_path(self, a, b):
        """int_{T_a}^{T_b} d/dt g(t, x, V, eta) dt at a common rank (Gauss-Legendre)."""
        nodes, weights = np.polynomial.legendre.leggauss(_GL_NODES)
        lo, hi = self.q(a), self.q(b)
        V = self.spec.latent_given_rank(a, self.v, self.eta, self.xi)
        half = 0.5 * (hi - lo)
        out = np.zeros(np.broadcast_shapes(half.shape, V.shape))
        for s, w in zip(nodes, weights):
            t = lo + half * (s + 1)
            h = 1e-5 * (1.0 + np.abs(t))
            d = (self.spec.outcome_value(t + h, self.X, V, self.eta) - self.spec.outcome_value(t - h, self.X, V, self.eta)) / (2 * h)
            out += w * half * d
        return out


def _terms(spec: DgpSpec, name: str, arg, pair, form):
    """Return (terms, combine): terms are (f(block), weight(r)) pairs averaged over (v, x)."""
    a, b = pair

    def pair_w(r):
        return r[:, a] + r[:, b]

    if name == "wald":
        terms = [
            (lambda B: B.g(b, b), lambda r: r[:, b]),
            (lambda B: np.ones_like(B.v), lambda r: r[:, b]),
            (lambda B: B.g(a, a), lambda r: r[:, a]),
            (lambda B: np.ones_like(B.v), lambda r: r[:, a]),
            (lambda B: B.q(b), lambda r: r[:, b]),
            (lambda B: B.q(a), lambda r: r[:, a]),
        ]

        def combine(s):
            num = s[0] / s[1] - s[2] / s[3]
            den = s[4] / s[1] - s[5] / s[3]
            return num, den

        return terms, combine

    cond = (None, None) if name.startswith("tau") else (a, b)
    transform = arg if name == "distributional" else None

    def dq(B):
        return B.q(b) - B.q(a)

    def dg(B):
        if cond[0] is None:
            return B.g(b, a, transform) - B.g(a, a, transform)
        return B.g(b, b, transform) - B.g(a, a, transform)

    base = name.replace("tau_dr", "dr").replace("pi_dr", "dr")
    if name in ("wald_weighted_late", "wald_x"):
        if form == "derivative":
            if spec.coupling != "invariant":
                raise SpecError("the derivative form needs rank invariance")
            terms = [(lambda B: B.dg_path(a, b), pair_w), (dq, pair_w)]
        else:
            terms = [(dg, pair_w), (dq, pair_w)]
    elif base in ("dr", "distributional", "tau_u", "pi_v"):
        terms = [(lambda B: np.sign(dq(B)) * dg(B), pair_w), (lambda B: np.abs(dq(B)), pair_w)]
    elif base == "dr_plus":
        terms = [(lambda B: (dq(B) > 0) * dg(B), pair_w), (lambda B: np.maximum(dq(B), 0), pair_w)]
    elif base == "dr_minus":
        terms = [(lambda B: (dq(B) < 0) * dg(B), pair_w), (lambda B: np.minimum(dq(B), 0), pair_w)]
    else:
        raise SpecError(f"no quadrature rule for {name}")
    return terms, lambda s: (s[0], s[1])


def _point_sets(dims: int, draws: int):
    if dims == 0:
        return [np.zeros((1, 0))]
    per = max(draws // SCRAMBLES, 2)
    m = int(np.ceil(np.log2(per)))
    seeds = np.random.SeedSequence(_SEED).spawn(SCRAMBLES)
    return [qmc.Sobol(dims, scramble=True, seed=np.random.default_rng(s)).random_base2(m) for s in seeds]


def _averages(spec, terms, v_grid, pts):
    """Average each term over the v grid and the point set."""
    r = spec.arm_probabilities(spec.covariate_values(pts[:, : spec.d_w]))
    out = np.zeros(len(terms))
    step = max(1, _CHUNK // max(pts.shape[0], 1))
    for lo in range(0, v_grid.size, step):
        B = _Block(spec, v_grid[lo : lo + step], pts)
        for j, (f, w) in enumerate(terms):
            val = np.broadcast_to(f(B), (B.v.shape[0], pts.shape[0]))
            out[j] += float(np.sum(val.sum(axis=0) * w(r)))
    return out / (v_grid.size * pts.shape[0])


def _dims(spec: DgpSpec) -> int:
    return spec.d_w + spec.n_eta + (1 if spec.coupling == "similar" else 0)


def _midpoints(R):
    return (np.arange(1, R + 1) - 0.5) / R


def _ratio(num, den, what):
    if not np.isfinite(num) or not np.isfinite(den) or abs(den) <= 1e-12:
        raise ResolutionError(f"{what}: the population ratio has a vanishing denominator", denominator=float(den))
    return num / den


def _evaluate(spec, terms, combine, grids, point_sets, what):
    """Value per v grid, pooled over scramblings, plus the per-scramble spread."""
    vals, spread = [], 0.0
    for grid in grids:
        sums = np.array([_averages(spec, terms, grid, pts) for pts in point_sets])
        vals.append(_ratio(*combine(sums.mean(axis=0)), what))
        if grid is grids[0] and len(point_sets) > 1:
            per = [_ratio(*combine(s), what) for s in sums]
            spread = float(np.std(per, ddof=1) / np.sqrt(len(per)))
    return vals, spread


def _lambda(spec, point_sets, R):
    """Population multi-arm weights from cell means of T and arm shares."""
    K = spec.K
    grid = _midpoints(R)
    terms = []
    for k in range(K + 1):
        terms.append((lambda B, k=k: B.q(k), lambda r, k=k: r[:, k]))
        terms.append((lambda B: np.ones_like(B.v), lambda r, k=k: r[:, k]))
    sums = np.mean([_averages(spec, terms, grid, pts) for pts in point_sets], axis=0)
    rk = sums[1::2]
    pk = sums[0::2] / rk
    order = np.argsort(pk, kind="stable")
    p, r = pk[order], rk[order]
    pbar = float(np.sum(r * p))
    A = np.array([(p[k] - p[k - 1]) * np.sum(r[k:] * (p[k:] - pbar)) for k in range(1, K + 1)])
    if A.sum() <= 1e-12:
        raise ResolutionError("cell means of T coincide; multi-arm weights undefined")
    return order, A / A.sum()


def oracle(spec: DgpSpec, estimand_id: str, resolution: int = 200, draws: int = DEFAULT_DRAWS,
           pair=(0, 1), form: str = "ratio") -> OracleValue:
    """True value of ``estimand_id`` under ``spec`` with a quadrature error bound.

    Estimand ids: tau_u(u), pi_v(v), tau_dr, tau_dr_plus, tau_dr_minus,
    pi_dr, pi_dr_plus, pi_dr_minus, wald_weighted_late (alias wald_x), wald,
    pi_dr_multi and distributional(y).  ``tau_*`` evaluate both potential
    outcomes at a common rank with disturbances drawn given the lower arm's
    rank equal to u; ``pi_*``
    are the identified ratios m_1(q_1) - m_0(q_0) over q_1 - q_0 that the
    estimator targets.  They agree whenever rank similarity holds.
    ``form="derivative"`` evaluates wald_weighted_late as the average of
    int dg/dt over [T_0(u), T_1(u)] (needs rank invariance).
    """
    return _oracle_cached(spec, estimand_id.strip(), int(resolution), int(draws), tuple(pair), form)


@lru_cache(maxsize=128)
def _oracle_cached(spec, estimand_id, resolution, draws, pair, form):
    name, arg = parse_oracle_id(estimand_id)
    if resolution < 8 or resolution % 4:
        raise ResolutionError("resolution must be a multiple of 4 and at least 8", resolution=resolution)
    point_sets = _point_sets(_dims(spec), draws)
    if name == "pi_dr_multi":
        order, lam = _lambda(spec, point_sets, resolution)
        _, lam_half = _lambda(spec, point_sets, resolution // 2)
        parts = [
            _oracle_cached(spec, "pi_dr", resolution, draws, (int(order[k - 1]), int(order[k])), "ratio")
            for k in range(1, spec.K + 1)
        ]
        pis = np.array([p.value for p in parts])
        bound = float(lam @ np.array([p.error_bound for p in parts]) + np.abs(lam - lam_half) @ np.abs(pis))
        return OracleValue(float(lam @ pis), bound + 1e-12)
    terms, combine = _terms(spec, name, arg, pair, form)
    if name in ("tau_u", "pi_v"):
        if not 0.0 < arg < 1.0:
            raise SpecError("rank argument must lie in (0, 1)")
        grids = [np.array([arg])]
    else:
        grids = [_midpoints(resolution), _midpoints(resolution // 2), _midpoints(resolution // 4)]
    vals, spread = _evaluate(spec, terms, combine, grids, point_sets, estimand_id)
    value = vals[0]
    floor = 1e-12 * (1.0 + abs(value))
    if len(vals) == 1:
        return OracleValue(float(value), float(3 * spread + floor))
    fine, coarse = abs(vals[1] - vals[0]), abs(vals[2] - vals[1])
    # differences already inside the sampling noise over eta carry no trend
    if fine > coarse + max(1e-9 * (1.0 + abs(value)), 3 * spread):
        raise ResolutionError(
            f"{estimand_id}: quadrature differences do not shrink ({coarse:.3g} then {fine:.3g})",
            resolution=resolution,
        )
    return OracleValue(float(value), float(fine + 3 * spread + floor))
