"""Linear quantile regression of T on (1, X, Z, ZX) over a quantile grid."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import kernels
from .errors import ConvergenceError, GridError, SampleSizeError, SingularDesignError

GAP_TOL = 1e-8
MAX_ITER = 200
FLOOR_SHARE_WARN = 0.10


@dataclass(frozen=True)
class QuantileGrid:
    """Midpoint grid v_j = (j - 1/2)/l."""

    l: int = 99

    def __post_init__(self):
        if int(self.l) < 1:
            raise GridError("grid size must be at least 1", l=self.l)

    @property
    def points(self) -> np.ndarray:
        return (np.arange(1, self.l + 1) - 0.5) / self.l

    def index(self, v: float, tol: float = 1e-9) -> int:
        j = int(round(v * self.l + 0.5)) - 1
        if not 0 <= j < self.l or abs(self.points[j] - v) > tol:
            raise GridError(f"v={v} is not a grid point of the l={self.l} grid", v=v, l=self.l)
        return j

    def nearest(self, v: float) -> float:
        return float(self.points[int(np.argmin(np.abs(self.points - v)))])


def check_loss(resid: np.ndarray, v: float) -> float:
    return float(np.sum(resid * (v - (resid < 0))))


def _column_names(p: int, names=None):
    return list(names) if names is not None else [f"col{j}" for j in range(p)]


def _assert_full_rank(design: np.ndarray, names=None) -> None:
    _, s, vt = np.linalg.svd(design, full_matrices=False)
    tol = 1e-10 * max(s[0], 1e-300)
    if s[-1] > tol:
        return
    null = vt[-1]
    cols = _column_names(design.shape[1], names)
    combo = [cols[j] for j in np.flatnonzero(np.abs(null) > 1e-6 * np.abs(null).max())]
    raise SingularDesignError(
        "design is rank deficient; dependent columns: " + ", ".join(combo),
        columns=combo,
        smallest_singular_value=float(s[-1]),
    )


def _polish(X: np.ndarray, y: np.ndarray, beta: np.ndarray, v: float) -> np.ndarray:
    """Move an interior solution to an adjacent exact-fit basic solution.

    The p observations with the smallest residuals span the optimal vertex
    when the optimum is unique; otherwise the interior point is kept unless a
    nearby vertex is at least as good.
    """
    n, p = X.shape
    base = check_loss(y - X @ beta, v)
    order = np.argsort(np.abs(y - X @ beta), kind="stable")
    best, best_loss = beta, base
    slack = 1e-12 * (1.0 + abs(base))
    for combo in itertools.combinations(order[: min(n, p + 2)], p):
        idx = list(combo)
        Xh = X[idx]
        if np.linalg.cond(Xh) > 1e12:
            continue
        b = np.linalg.solve(Xh, y[idx])
        loss = check_loss(y - X @ b, v)
        if loss <= best_loss + slack:
            best, best_loss = b, min(loss, best_loss)
            if loss <= base:
                break
    return best


def _solve(X: np.ndarray, y: np.ndarray, v: float, tol: float, maxit: int) -> np.ndarray:
    scale = float(np.max(np.abs(y))) if y.size else 0.0
    if scale == 0.0:
        return np.zeros(X.shape[1])
    ys = np.ascontiguousarray(y / scale)
    coef, gap, it, ok = kernels.fnb(np.ascontiguousarray(X), ys, float(v), tol, maxit)
    if not ok:
        raise ConvergenceError(
            f"interior point did not converge in {maxit} iterations (gap {gap:.3g})",
            gap=float(gap),
            iterations=int(it),
            v=float(v),
        )
    return _polish(X, ys, np.asarray(coef), v) * scale


def fit_check_loss(
    design: np.ndarray,
    response: np.ndarray,
    v: float,
    tol: float = GAP_TOL,
    maxit: int = MAX_ITER,
    column_names=None,
) -> np.ndarray:
    """Minimize sum_i rho_v(response_i - design_i'a) over a.

    Parameters
    ----------
    design : (n, p) array
    response : (n,) array
    v : quantile level in (0, 1)

    Returns
    -------
    Coefficient vector of length p, an exact-fit basic solution whenever the
    interior point can be rounded to one without loss.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("design and response have incompatible shapes")
    if not 0.0 < v < 1.0:
        raise ValueError("v must lie in (0, 1)")
    n, p = X.shape
    if n <= p:
        raise SampleSizeError(f"need n > p, got n={n}, p={p}", n=n, p=p)
    _assert_full_rank(X, column_names)
    return _solve(X, y, v, tol, maxit)


def hall_sheather(n: int, v: np.ndarray, alpha: float = 0.05) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    x = norm.ppf(v)
    zc = norm.ppf(1 - alpha / 2)
    h = n ** (-1 / 3) * zc ** (2 / 3) * (1.5 * norm.pdf(x) ** 2 / (2 * x**2 + 1)) ** (1 / 3)
    return np.minimum(h, 0.999 * np.minimum(v, 1 - v))


def _robust_scale(t: np.ndarray) -> float:
    q75, q25 = np.percentile(t, [75, 25])
    for s in (q75 - q25, np.std(t)):
        if s > 0:
            return float(s)
    return 1.0


@dataclass(frozen=True, eq=False)
class QuantileFit:
    grid: QuantileGrid
    pair: tuple
    coeffs: np.ndarray  # (l, p)
    coeffs_lo: np.ndarray  # at v - h
    coeffs_hi: np.ndarray  # at v + h
    density_bandwidth: np.ndarray  # (l,)
    theta: np.ndarray  # (l, p, p)
    theta_inv: np.ndarray
    theta_min_eig: np.ndarray
    ill_conditioned: np.ndarray  # (l,) bool
    floored_counts: np.ndarray  # (l,)
    subsample_index: np.ndarray
    covariates: np.ndarray  # (n, d_x) of the subsample
    zind: np.ndarray  # (n,) 0/1
    response: np.ndarray  # T of the subsample
    warnings: tuple = field(default_factory=tuple)

    @property
    def n(self) -> int:
        return int(self.response.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def p(self) -> int:
        return 2 * (self.d_x + 1)

    @property
    def design(self) -> np.ndarray:
        return stack_design(self.covariates, self.zind)


def stack_design(X: np.ndarray, z) -> np.ndarray:
    """S = (1, X', z, zX')' row-wise; z may be a scalar or per-row vector."""
    n = X.shape[0]
    z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
    return np.column_stack([np.ones(n), X, z, z[:, None] * X])


def delta_design(X: np.ndarray) -> np.ndarray:
    """Rows of Delta S(x) = (0, 0', 1, x')."""
    n = X.shape[0]
    return np.column_stack([np.zeros((n, X.shape[1] + 1)), np.ones(n), X])


def _arm_coeffs(W: np.ndarray, t: np.ndarray, taus: np.ndarray, tol, maxit) -> np.ndarray:
    """Per-arm quantile coefficients on design W = (1, X) for each tau."""
    if W.shape[1] == 1:
        srt = np.sort(t)
        k = np.clip(np.ceil(t.shape[0] * taus - 1e-12).astype(int), 1, t.shape[0])
        return srt[k - 1][:, None]
    out = np.empty((taus.shape[0], W.shape[1]))
    for j, tau in enumerate(taus):
        try:
            out[j] = _solve(W, t, float(tau), tol, maxit)
        except ConvergenceError as exc:
            exc.args = (f"{exc.args[0]} at v={tau:.6g}",)
            raise
    return out


def fit_grid(
    d,
    grid: QuantileGrid | None = None,
    pair: tuple = (0, 1),
    tol: float = GAP_TOL,
    maxit: int = MAX_ITER,
    use_covariates: bool = True,
) -> QuantileFit:
    """Quantile regression process on the subsample of ``pair``.

    The fully interacted design separates into one regression of T on (1, X)
    per arm, which is how the solves are organized; the returned coefficients
    are in the joint (1, X, Z, ZX) parameterization.
    """
    grid = grid or QuantileGrid()
    idx, X, zind = d.pair_view(pair)
    if not use_covariates:
        X = X[:, :0]
    T = d.treatment[idx]
    n, dx = X.shape
    if min(zind.sum(), n - zind.sum()) <= dx + 1:
        raise SampleSizeError("an instrument cell is too small for the quantile design", n=n, d_x=dx)
    names = ["1", *d.covariate_names[:dx]]
    v = grid.points
    h = hall_sheather(n, v)
    taus = np.concatenate([v, v - h, v + h])
    b = []
    for arm in (0, 1):
        sel = zind == arm
        W = np.column_stack([np.ones(sel.sum()), X[sel]])
        _assert_full_rank(W, [f"{c}|z={arm}" for c in names])
        b.append(_arm_coeffs(W, T[sel], taus, tol, maxit))
    joint = np.concatenate([b[0], b[1] - b[0]], axis=1)
    l = grid.l
    coeffs, lo, hi = joint[:l], joint[l : 2 * l], joint[2 * l :]

    S = stack_design(X, zind)
    scale = _robust_scale(T)
    floor = 1e-3 / scale
    cap = 1e12 / scale
    spread = S @ (hi - lo).T  # (n, l)
    zero = np.abs(spread) <= 1e-12 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = np.where(zero, cap, 2 * h[None, :] / spread)
    floored = ~zero & (dens < floor)
    dens = np.where(floored, floor, np.minimum(dens, cap))
    theta = np.matmul((dens.T[:, :, None] * S[None]).transpose(0, 2, 1), S) / n
    theta = 0.5 * (theta + np.transpose(theta, (0, 2, 1)))
    eig = np.linalg.eigvalsh(theta)
    min_eig = eig[:, 0]
    ill = min_eig <= 1e-10 * np.maximum(eig[:, -1], 1e-300)
    theta_inv = np.linalg.pinv(theta, hermitian=True)
    counts = floored.sum(axis=0)
    notes = []
    heavy = v[counts > FLOOR_SHARE_WARN * n]
    if heavy.size:
        msg = f"density floor hit for more than 10% of observations at {heavy.size} grid points"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if ill.any():
        notes.append(f"near-singular sandwich matrix at {int(ill.sum())} grid points")
    return QuantileFit(
        grid=grid,
        pair=tuple(pair),
        coeffs=coeffs,
        coeffs_lo=lo,
        coeffs_hi=hi,
        density_bandwidth=h,
        theta=theta,
        theta_inv=theta_inv,
        theta_min_eig=min_eig,
        ill_conditioned=ill,
        floored_counts=counts,
        subsample_index=idx,
        covariates=X,
        zind=zind,
        response=T,
        warnings=tuple(notes),
    )


def delta_q(f: QuantileFit, x, v: float) -> float:
    j = f.grid.index(v)
    a = f.coeffs[j]
    x = np.atleast_1d(np.asarray(x, dtype=float))[: f.d_x]
    return float(a[f.d_x + 1] + x @ a[f.d_x + 2 :])


def quantile_matrix(f: QuantileFit, X: np.ndarray, z: int, rearrange: bool = True) -> np.ndarray:
    """q_z(X_i, v) for every row and grid point, shape (n, l)."""
    q = stack_design(X, z) @ f.coeffs.T
    return np.sort(q, axis=1) if rearrange else q


@dataclass(frozen=True, eq=False)
class QrInfluence:
    phi: np.ndarray  # (l, n, p)
    V: np.ndarray  # (l, p, p) = n^-1 sum phi phi'
    n: int
    d_x: int

    def se_dq(self, x, v_index: int) -> float:
        ds = np.concatenate([[0.0], np.zeros(self.d_x), [1.0], np.atleast_1d(x)[: self.d_x]])
        return float(np.sqrt(max(ds @ self.V[v_index] @ ds, 0.0) / self.n))

    def se_dq_matrix(self, X: np.ndarray) -> np.ndarray:
        """se(Delta q(X_i, v)) for all rows and grid points, shape (n, l)."""
        D = delta_design(X)
        quad = (np.matmul(D[None], self.V) * D[None]).sum(axis=2).T
        return np.sqrt(np.maximum(quad, 0.0) / self.n)


def qr_influence(f: QuantileFit, d=None) -> QrInfluence:
    """phi_i(v) = theta(v)^-1 (1(T_i <= S_i'a(v)) - v) S_i."""
    S = f.design
    fitted = S @ f.coeffs.T  # (n, l)
    tol = 1e-10 * _robust_scale(f.response)
    below = (f.response[:, None] <= fitted + tol).astype(float)
    score = below - f.grid.points[None, :]  # (n, l)
    phi = np.matmul(score.T[:, :, None] * S[None], f.theta_inv.transpose(0, 2, 1))
    V = np.matmul(phi.transpose(0, 2, 1), phi) / f.n
    return QrInfluence(phi=phi, V=V, n=f.n, d_x=f.d_x)
