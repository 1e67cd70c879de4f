"""Partially linear series regression of Y on psi(x, t, z).

psi(x, t, z) = (x', B(t)', z x', z B(t)')' where B is a power or B-spline
basis in t that contains the constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import BSpline

from .errors import ExtrapolationError, SampleSizeError

PINV_RTOL = 1e-10
PAD = 0.01


@dataclass(frozen=True)
class BasisSpec:
    """Basis in t.

    ``J`` counts basis functions including the constant, so the power family
    with J=2 is (1, t).  ``t_range`` is filled in from data by ``resolve``;
    an unresolved power spec evaluates raw monomials.
    """

    family: str = "power"
    J: int = 2
    order: int = 4
    knots: str = "quantile"
    t_range: tuple | None = None
    interior_knots: tuple = ()

    def __post_init__(self):
        if self.family not in ("power", "bspline"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.J < 1:
            raise ValueError("J must be at least 1")
        if self.family == "bspline":
            if self.order < 2:
                raise ValueError("B-spline order must be at least 2")
            if self.J < self.order:
                raise ValueError("B-spline basis needs J >= order")
            if self.knots not in ("quantile", "uniform"):
                raise ValueError("knot rule must be 'quantile' or 'uniform'")

    @property
    def resolved(self) -> bool:
        return self.t_range is not None

    def resolve(self, t: np.ndarray) -> "BasisSpec":
        lo, hi = float(np.min(t)), float(np.max(t))
        pad = PAD * (hi - lo) if hi > lo else PAD * max(abs(lo), 1.0)
        rng = (lo - pad, hi + pad)
        if self.family == "power":
            return replace(self, t_range=rng, interior_knots=())
        m = self.J - self.order
        if m == 0:
            inner = ()
        elif self.knots == "uniform":
            inner = tuple(np.linspace(rng[0], rng[1], m + 2)[1:-1])
        else:
            inner = tuple(np.quantile(t, np.arange(1, m + 1) / (m + 1)))
        return replace(self, t_range=rng, interior_knots=inner)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "J": self.J,
            "order": self.order,
            "knots": self.knots,
        }

    # -- t block ---------------------------------------------------------
    def _affine(self):
        if self.t_range is None:
            return 0.0, 1.0
        lo, hi = self.t_range
        return 0.5 * (lo + hi), 0.5 * (hi - lo)

    def _spline(self):
        if self.t_range is None:
            raise ValueError("B-spline basis needs a resolved t_range")
        lo, hi = self.t_range
        k = self.order - 1
        knots = np.r_[[lo] * self.order, self.interior_knots, [hi] * self.order]
        return BSpline(knots, np.eye(self.J), k, extrapolate=False)

    def _check_support(self, t):
        lo, hi = self.t_range
        bad = (t < lo) | (t > hi)
        if bad.any():
            raise ExtrapolationError(
                f"{int(bad.sum())} evaluation points outside the spline support [{lo:.6g}, {hi:.6g}]",
                t_range=self.t_range,
            )

    def t_block(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.family == "power":
            c, s = self._affine()
            u = (t - c) / s
            out = np.empty(t.shape + (self.J,))
            out[..., 0] = 1.0
            for j in range(1, self.J):
                out[..., j] = out[..., j - 1] * u
            return out
        self._check_support(t)
        out = self._spline()(t)
        return np.nan_to_num(out)

    def t_block_deriv(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.family == "power":
            s = self._affine()[1]
            out = np.zeros(t.shape + (self.J,))
            if self.J > 1:
                powers = self.t_block(t)
                for j in range(1, self.J):
                    out[..., j] = j * powers[..., j - 1] / s
            return out
        self._check_support(t)
        return np.nan_to_num(self._spline().derivative()(t))


def build_basis(spec: BasisSpec, x, t, z) -> np.ndarray:
    """psi(x, t, z); x must broadcast to t.shape + (d_x,)."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    B = spec.t_block(t)
    x = np.broadcast_to(x, B.shape[:-1] + (x.shape[-1],))
    z = np.asarray(z, dtype=float)[..., None] * np.ones(B.shape[:-1] + (1,))
    return np.concatenate([x, B, z * x, z * B], axis=-1)


def build_basis_deriv(spec: BasisSpec, x, t, z) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    dB = spec.t_block_deriv(t)
    zeros = np.zeros(dB.shape[:-1] + (np.shape(x)[-1],))
    z = np.asarray(z, dtype=float)[..., None] * np.ones(dB.shape[:-1] + (1,))
    return np.concatenate([zeros, dB, zeros, z * dB], axis=-1)


@dataclass(frozen=True, eq=False)
class SeriesFit:
    spec: BasisSpec
    coeffs: np.ndarray
    gram: np.ndarray
    gram_pinv: np.ndarray
    rank: int
    residuals: np.ndarray
    omega: np.ndarray
    mho: np.ndarray
    subsample_index: np.ndarray
    design: np.ndarray
    pair: tuple = (0, 1)
    warnings: tuple = field(default_factory=tuple)

    @property
    def n(self) -> int:
        return int(self.design.shape[0])

    @property
    def full_rank(self) -> int:
        return int(self.design.shape[1])

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.full_rank

    @property
    def d_x(self) -> int:
        return self.full_rank // 2 - self.spec.J


def fit_series_arrays(
    X: np.ndarray, t: np.ndarray, z: np.ndarray, y: np.ndarray, spec: BasisSpec, index=None, pair=(0, 1)
) -> SeriesFit:
    n = y.shape[0]
    P = 2 * (X.shape[1] + spec.J)
    if n <= P:
        raise SampleSizeError(f"subsample of {n} rows is too small for {P} sieve terms", n=n, terms=P)
    spec = spec if spec.resolved else spec.resolve(t)
    Psi = build_basis(spec, X, t, z)
    U, s, Vt = np.linalg.svd(Psi / np.sqrt(n), full_matrices=False)
    keep = s > PINV_RTOL * s[0]
    rank = int(keep.sum())
    Uk, sk, Vk = U[:, keep], s[keep], Vt[keep].T
    coeffs = Vk @ ((Uk.T @ y) / sk) / np.sqrt(n)
    gram = Psi.T @ Psi / n
    gram_pinv = (Vk / sk**2) @ Vk.T
    resid = y - Psi @ coeffs
    omega = (Psi * resid[:, None] ** 2).T @ Psi / n
    mho = gram_pinv @ omega @ gram_pinv
    notes = () if rank == P else (f"sieve design rank {rank} < {P}; minimum-norm solution used",)
    return SeriesFit(
        spec=spec,
        coeffs=coeffs,
        gram=gram,
        gram_pinv=0.5 * (gram_pinv + gram_pinv.T),
        rank=rank,
        residuals=resid,
        omega=0.5 * (omega + omega.T),
        mho=0.5 * (mho + mho.T),
        subsample_index=np.arange(n) if index is None else np.asarray(index),
        design=Psi,
        pair=tuple(pair),
        warnings=notes,
    )


def fit_series(d, spec: BasisSpec | None = None, pair=(0, 1), use_covariates: bool = True, outcome=None) -> SeriesFit:
    """Series least squares on the subsample of ``pair`` (upper code recoded to z=1)."""
    spec = spec or BasisSpec()
    idx, X, zind = d.pair_view(pair)
    if not use_covariates:
        X = X[:, :0]
    y = (d.outcome if outcome is None else np.asarray(outcome, dtype=float))[idx]
    return fit_series_arrays(X, d.treatment[idx], zind, y, spec, index=idx, pair=pair)


def _blocks(f: SeriesFit):
    dx, J = f.d_x, f.spec.J
    c = f.coeffs
    return c[:dx], c[dx : dx + J], c[dx + J : 2 * dx + J], c[2 * dx + J :]


def predict_m(f: SeriesFit, x, t, z) -> np.ndarray:
    """m(x, t, z) = psi(x, t, z)'c; x must broadcast to t.shape + (d_x,)."""
    cx, cb, czx, czb = _blocks(f)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    B = f.spec.t_block(t)
    return (x @ cx + B @ cb) + z * (x @ czx + B @ czb)


def predict_dm_dt(f: SeriesFit, x, t, z) -> np.ndarray:
    _, cb, _, czb = _blocks(f)
    z = np.asarray(z, dtype=float)
    dB = f.spec.t_block_deriv(t)
    return dB @ cb + z * (dB @ czb)
