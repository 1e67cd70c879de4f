"""Data generating processes: structural outcome, arm quantile functions, rank coupling."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from ..dataset import Dataset
from ..errors import SpecConsistencyError, SpecError
from .expr import Expr

COUPLINGS = ("invariant", "similar", "violated")
_PROBE_U = 1000
_PROBE_X = 100
_PROBE_SEED = 20240917


@dataclass(frozen=True)
class DgpSpec:
    """Structural model Y = g(T, X, V, eta) with T = T_Z(X, U_Z).

    ``outcome`` may use t, x1.., v (the unit's latent rank) and eta1..
    (independent standard normals).  ``first_stage`` holds one quantile
    function per instrument code in u and x1..; each must be strictly
    increasing in u.  The arm ranks U_z are tied to V by ``coupling``:

    * invariant: U_z = V for every arm;
    * similar: U_z = Phi(rho qnorm(V) + sqrt(1 - rho^2) xi_z), xi_z iid N(0, 1),
      so the U_z are exchangeable given (V, eta);
    * violated: U_0 = V and, for z >= 1, U_z = 1 - V when eta1 > 0.

    ``covariates`` are expressions in independent uniforms w1..; ``arm_weights``
    are nonnegative expressions in x1.. normalized per x into P(Z = z | x).
    """

    name: str
    outcome: str
    first_stage: tuple
    coupling: str = "invariant"
    rho: float = 0.5
    covariates: tuple = ()
    arm_weights: tuple = ()
    monotone: bool = True
    rank_similar: bool = True
    _parsed: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "first_stage", tuple(str(e) for e in self.first_stage))
        object.__setattr__(self, "covariates", tuple(str(e) for e in self.covariates))
        weights = tuple(str(e) for e in self.arm_weights) or ("1",) * len(self.first_stage)
        object.__setattr__(self, "arm_weights", weights)
        if len(self.first_stage) < 2:
            raise SpecError("need at least two instrument values")
        if len(weights) != len(self.first_stage):
            raise SpecError("arm_weights must have one entry per instrument value")
        if self.coupling not in COUPLINGS:
            raise SpecError(f"coupling must be one of {COUPLINGS}")
        if self.coupling == "similar" and not -1.0 < float(self.rho) < 1.0:
            raise SpecError("similar coupling needs rho in (-1, 1)")
        d_x = len(self.covariates)
        xs = [f"x{j + 1}" for j in range(d_x)]
        parsed = {
            "outcome": Expr.parse(self.outcome, ["t", "v", "eta*", *xs]),
            "first_stage": tuple(Expr.parse(e, ["u", *xs]) for e in self.first_stage),
            "covariates": tuple(Expr.parse(e, ["w*"]) for e in self.covariates),
            "arm_weights": tuple(Expr.parse(e, xs) for e in weights),
        }
        object.__setattr__(self, "_parsed", parsed)
        if self.coupling == "violated" and self.n_eta < 1:
            raise SpecError("violated coupling needs eta1 in the outcome")
        self._probe()

    # -- dimensions ------------------------------------------------------
    @property
    def K(self) -> int:
        return len(self.first_stage) - 1

    @property
    def d_x(self) -> int:
        return len(self.covariates)

    @property
    def d_w(self) -> int:
        return max((e.max_index("w") for e in self._parsed["covariates"]), default=0)

    @property
    def n_eta(self) -> int:
        return self._parsed["outcome"].max_index("eta")

    # -- structural pieces ----------------------------------------------
    def covariate_values(self, w: np.ndarray) -> np.ndarray:
        """(N, d_w) uniforms -> (N, d_x) covariates."""
        env = {f"w{j + 1}": w[:, j] for j in range(w.shape[1])}
        N = w.shape[0]
        cols = [np.broadcast_to(e(**env), (N,)) for e in self._parsed["covariates"]]
        return np.column_stack(cols) if cols else np.zeros((N, 0))

    def _xenv(self, X):
        return {f"x{j + 1}": X[..., j] for j in range(self.d_x)}

    def arm_probabilities(self, X: np.ndarray) -> np.ndarray:
        N = X.shape[0]
        env = self._xenv(X)
        W = np.column_stack([np.broadcast_to(e(**env), (N,)) for e in self._parsed["arm_weights"]])
        if not np.all(np.isfinite(W)) or np.any(W < 0):
            raise SpecError("arm weights must be finite and nonnegative")
        tot = W.sum(axis=1, keepdims=True)
        if np.any(tot <= 0):
            raise SpecError("arm weights sum to zero for some x")
        return W / tot

    def treatment(self, z: int, X: np.ndarray, u: np.ndarray) -> np.ndarray:
        """T_z(x, u); X broadcasts against u with a trailing covariate axis."""
        env = self._xenv(X)
        env["u"] = u
        shape = np.broadcast_shapes(np.shape(u), np.shape(X)[:-1])
        return np.broadcast_to(self._parsed["first_stage"][z](**env), shape)

    def outcome_value(self, t, X, v, eta) -> np.ndarray:
        """g(t, x, v, eta); eta has a trailing axis of length n_eta."""
        env = self._xenv(X)
        env.update(t=t, v=v)
        for j in range(self.n_eta):
            env[f"eta{j + 1}"] = eta[..., j]
        shape = np.broadcast_shapes(np.shape(t), np.shape(v), np.shape(X)[:-1], np.shape(eta)[:-1])
        return np.broadcast_to(self._parsed["outcome"](**env), shape)

    def arm_rank(self, z: int, V, eta, xi):
        """U_z given the latent rank V and disturbances."""
        if self.coupling == "invariant":
            return V
        if self.coupling == "similar":
            r = float(self.rho)
            return ndtr(r * ndtri(V) + np.sqrt(1 - r * r) * xi)
        if z == 0:
            return V
        return np.where(eta[..., 0] > 0, 1.0 - V, V)

    def latent_given_rank(self, z: int, u, eta, xi):
        """A draw of V from its law given U_z = u (xi, eta are the auxiliary draws)."""
        if self.coupling == "invariant":
            return u
        if self.coupling == "similar":
            r = float(self.rho)
            return ndtr(r * ndtri(u) + np.sqrt(1 - r * r) * xi)
        if z == 0:
            return u
        return np.where(eta[..., 0] > 0, 1.0 - u, u)

    # -- validation ------------------------------------------------------
    def _probe(self):
        rng = np.random.default_rng(_PROBE_SEED)
        X = self.covariate_values(rng.random((_PROBE_X, self.d_w)))
        u = (np.arange(1, _PROBE_U + 1) - 0.5) / _PROBE_U
        for z in range(self.K + 1):
            T = self.treatment(z, X[:, None, :], u[None, :])
            if not np.all(np.isfinite(T)):
                raise SpecError(f"first stage of arm {z} is not finite on the probe grid")
            if not np.all(np.diff(T, axis=1) > 0):
                raise SpecError(f"first stage of arm {z} is not strictly increasing in u")
        self.arm_probabilities(X)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("_parsed")
        out["first_stage"] = list(self.first_stage)
        out["covariates"] = list(self.covariates)
        out["arm_weights"] = list(self.arm_weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DgpSpec":
        allowed = {"name", "outcome", "first_stage", "coupling", "rho", "covariates", "arm_weights", "monotone",
                   "rank_similar"}
        unknown = set(data) - allowed
        if unknown:
            raise SpecError(f"unknown DGP keys: {sorted(unknown)}")
        try:
            return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _draw_latents(spec: DgpSpec, rng, n):
    V = rng.random(n)
    eta = rng.standard_normal((n, spec.n_eta))
    xi = rng.standard_normal((n, spec.K + 1)) if spec.coupling == "similar" else np.zeros((n, spec.K + 1))
    return V, eta, xi


def generate(spec: DgpSpec, n: int, seed: int = 0) -> Dataset:
    """Draw n observations; bit-identical for identical (spec, n, seed)."""
    if n < 1:
        raise SpecError("n must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    X = spec.covariate_values(rng.random((n, spec.d_w)))
    P = spec.arm_probabilities(X)
    z = (rng.random(n)[:, None] > np.cumsum(P, axis=1)[:, :-1]).sum(axis=1)
    V, eta, xi = _draw_latents(spec, rng, n)
    T = np.empty(n)
    for k in range(spec.K + 1):
        m = z == k
        U = spec.arm_rank(k, V[m], eta[m], xi[m, k])
        T[m] = spec.treatment(k, X[m], U)
    Y = spec.outcome_value(T, X, V, eta)
    names = tuple(f"x{j + 1}" for j in range(spec.d_x))
    return Dataset(Y, T, z, covariates=X, covariate_names=names)


def verify_restrictions(spec: DgpSpec, probe_size: int = 100_000, seed: int = 0) -> dict:
    """Check monotonicity by simulation and rank similarity from the coupling.

    Raises SpecConsistencyError when the verified flags differ from the
    declared ones.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    X = spec.covariate_values(rng.random((probe_size, spec.d_w)))
    V, eta, xi = _draw_latents(spec, rng, probe_size)
    T = [spec.treatment(k, X, spec.arm_rank(k, V, eta, xi[:, k])) for k in range(spec.K + 1)]
    monotone = all(np.all(T[k] >= T[k - 1] - 1e-12) for k in range(1, spec.K + 1))
    similar = spec.coupling in ("invariant", "similar")
    out = {"monotone_holds": bool(monotone), "rank_similar_holds": similar}
    if monotone != spec.monotone or similar != spec.rank_similar:
        raise SpecConsistencyError(
            f"declared flags (monotone={spec.monotone}, rank_similar={spec.rank_similar}) "
            f"disagree with verified {out}",
            declared={"monotone": spec.monotone, "rank_similar": spec.rank_similar},
            verified=out,
        )
    return out


PRESETS = {
    # monotone mean shift with heterogeneous effects; m_z is quadratic in t
    "dgp_m": DgpSpec(
        name="dgp_m",
        outcome="t + 0.25*t^2 + 0.5*(2*v - 1) + eta1",
        first_stage=("1 + u", "1.5 + u"),
    ),
    # variance shift with zero mean first stage; sign-switching quantile gap
    "dgp_rs": DgpSpec(
        name="dgp_rs",
        outcome="t^2/10 + 0.5*(2*v - 1) + eta1",
        first_stage=("5 + (2*u - 1)", "5 + 2*(2*u - 1)"),
        monotone=False,
    ),
    # instrument propensity depends on x, so the unadjusted ratio is biased
    "dgp_x": DgpSpec(
        name="dgp_x",
        outcome="0.8*t + 0.5*x1 + 0.5*(2*v - 1) + eta1",
        first_stage=("1 + 0.5*x1 + u", "1.6 + 0.8*x1 + u"),
        covariates=("2*w1 - 1",),
        arm_weights=("1", "exp(1.5*x1)"),
    ),
    # ranks reversed for half the population: neither restriction holds
    "dgp_v": DgpSpec(
        name="dgp_v",
        outcome="t + 0.5*(2*v - 1) + eta1",
        first_stage=("1 + u", "1.3 + u"),
        coupling="violated",
        monotone=False,
        rank_similar=False,
    ),
    "constant": DgpSpec(
        name="constant",
        outcome="0.7*t + (2*v - 1) + eta1",
        first_stage=("1 + u", "1.5 + u"),
    ),
    "constant3": DgpSpec(
        name="constant3",
        outcome="0.7*t + (2*v - 1) + eta1",
        first_stage=("1 + u", "1.5 + u", "2 + u"),
    ),
    # pair 1 moves t within [0, 2] where the slope is 0.4; pair 2 jumps across 2
    "hetero3": DgpSpec(
        name="hetero3",
        outcome="ind(t <= 2)*0.4*t + ind(t > 2)*(0.4*(t - 1) - 0.3) + (2*v - 1) + eta1",
        first_stage=("u", "1 + u", "2 + u"),
    ),
}


def preset(name: str) -> DgpSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def load_spec(path) -> DgpSpec:
    """A preset name or a JSON file holding a DgpSpec document."""
    text = str(path)
    if text in PRESETS:
        return PRESETS[text]
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError(f"cannot parse DGP file {text}: {exc}") from None
    if "preset" in data:
        if len(data) != 1:
            raise SpecError("a preset reference takes no other keys")
        return preset(data["preset"])
    return DgpSpec.from_dict(data)
