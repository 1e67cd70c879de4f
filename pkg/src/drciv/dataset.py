"""Observed data model, CSV ingestion and first-stage diagnostics."""
from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from .errors import ParseError, SchemaError, SupportError

MISSING = frozenset({"", "na", "nan", "null", "none", "."})


class DiscreteTreatmentWarning(UserWarning):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    outcome: np.ndarray
    treatment: np.ndarray
    instrument: np.ndarray
    covariates: np.ndarray | None = None
    instrument_labels: tuple | None = None
    covariate_names: tuple = ()
    names: dict = field(default_factory=lambda: {"outcome": "y", "treatment": "t", "instrument": "z"})
    dropped_rows: int = 0
    flags: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float)
        t = np.asarray(self.treatment, dtype=float)
        z = np.asarray(self.instrument)
        if z.dtype.kind == "f":
            if not np.all(z == np.round(z)):
                raise SchemaError("instrument codes must be integers")
        z = z.astype(np.int64)
        n = y.shape[0]
        X = np.zeros((n, 0)) if self.covariates is None else np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if n < 1 or t.shape != (n,) or z.shape != (n,) or X.shape[0] != n:
            raise SchemaError("outcome, treatment, instrument and covariates must share length n >= 1")
        for name, arr in (("outcome", y), ("treatment", t), ("covariates", X)):
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"{name} contains missing or non-finite values")
        if z.min() < 0:
            raise SupportError("instrument codes must be nonnegative")
        K = int(z.max())
        counts = np.bincount(z, minlength=K + 1)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise SupportError(f"instrument codes {empty.tolist()} have no rows", empty_codes=empty)
        if K < 1:
            raise SupportError("the instrument takes a single value; need at least two cells", K=K)
        cov_names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(cov_names) != X.shape[1]:
            raise SchemaError("covariate_names does not match the covariate matrix")
        labels = self.instrument_labels
        labels = tuple(str(c) for c in range(K + 1)) if labels is None else tuple(str(s) for s in labels)
        if len(labels) != K + 1:
            raise SchemaError("instrument_labels must have one entry per code")
        flags = list(self.flags)
        if np.unique(t).size < 0.5 * n and "discrete-suspect" not in flags:
            flags.append("discrete-suspect")
            warnings.warn(
                "treatment has fewer distinct values than half the sample size",
                DiscreteTreatmentWarning,
                stacklevel=3,
            )
        set_ = object.__setattr__
        set_(self, "outcome", _frozen(y))
        set_(self, "treatment", _frozen(t))
        set_(self, "instrument", _frozen(z))
        set_(self, "covariates", _frozen(X))
        set_(self, "instrument_labels", labels)
        set_(self, "covariate_names", cov_names)
        set_(self, "flags", tuple(flags))

    @property
    def n(self) -> int:
        return int(self.outcome.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def K(self) -> int:
        return int(self.instrument.max())

    @property
    def cell_counts(self) -> dict:
        return {k: int(c) for k, c in enumerate(np.bincount(self.instrument))}

    def pair_view(self, pair=(0, 1)):
        """Rows with Z in ``pair``; returns (row index, covariates, 0/1 indicator of pair[1])."""
        lo, hi = pair
        if lo == hi or not (0 <= lo <= self.K and 0 <= hi <= self.K):
            raise SupportError(f"invalid instrument pair {pair}", pair=pair)
        idx = np.flatnonzero((self.instrument == lo) | (self.instrument == hi))
        zind = (self.instrument[idx] == hi).astype(float)
        return idx, self.covariates[idx], zind

    def take(self, rows) -> "Dataset":
        """Row subset (with repetition allowed); keeps code labels if all cells survive."""
        rows = np.asarray(rows)
        return Dataset(
            outcome=self.outcome[rows],
            treatment=self.treatment[rows],
            instrument=self.instrument[rows],
            covariates=self.covariates[rows],
            instrument_labels=self.instrument_labels,
            covariate_names=self.covariate_names,
            names=dict(self.names),
            flags=tuple(f for f in self.flags if f != "discrete-suspect"),
        )

    def replace(self, **changes) -> "Dataset":
        kw = dict(
            outcome=self.outcome,
            treatment=self.treatment,
            instrument=self.instrument,
            covariates=self.covariates,
            instrument_labels=self.instrument_labels,
            covariate_names=self.covariate_names,
            names=dict(self.names),
        )
        kw.update(changes)
        return Dataset(**kw)

    def schema(self) -> dict:
        return {
            "outcome": self.names["outcome"],
            "treatment": self.names["treatment"],
            "instrument": self.names["instrument"],
            "covariates": list(self.covariate_names),
            "instrument_order": list(self.instrument_labels),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.names["outcome"], self.names["treatment"], self.names["instrument"], *self.covariate_names])
        for i in range(self.n):
            w.writerow(
                [
                    repr(float(self.outcome[i])),
                    repr(float(self.treatment[i])),
                    self.instrument_labels[self.instrument[i]],
                    *(repr(float(v)) for v in self.covariates[i]),
                ]
            )
        return buf.getvalue()


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8-sig")
    if isinstance(source, os.PathLike):
        with open(source, encoding="utf-8-sig", newline="") as fh:
            return fh.read()
    if hasattr(source, "read"):
        data = source.read()
        return data.decode("utf-8-sig") if isinstance(data, bytes) else data
    if isinstance(source, str):
        return source
    raise TypeError("source must be bytes, text, a path or a file object")


def _numeric_key(values):
    try:
        return sorted(values, key=float)
    except ValueError:
        return sorted(values)


def load_dataset(source, schema: dict) -> Dataset:
    """Parse delimited text with a header row into a validated Dataset.

    ``schema`` maps ``outcome``, ``treatment``, ``instrument`` to column names,
    optionally ``covariates`` (list) and ``instrument_order`` (raw values in
    the order that defines codes 0..K).  Rows with a missing field in any used
    column are dropped and counted.
    """
    for role in ("outcome", "treatment", "instrument"):
        if not schema.get(role):
            raise SchemaError(f"schema does not name the {role} column", role=role)
    unknown = set(schema) - {"outcome", "treatment", "instrument", "covariates", "instrument_order"}
    if unknown:
        raise SchemaError(f"unknown schema keys {sorted(unknown)}")
    covs = list(schema.get("covariates") or [])
    text = _read_text(source)
    try:
        dialect = csv.Sniffer().sniff(text.split("\n", 1)[0], delimiters=",;\t|")
    except csv.Error:
        dialect = csv.excel
    rows = list(csv.reader(io.StringIO(text), dialect))
    rows = [r for r in rows if r]
    if not rows:
        raise ParseError("empty input", row=0, column=None)
    header = [h.strip() for h in rows[0]]
    used = [schema["outcome"], schema["treatment"], schema["instrument"], *covs]
    missing_cols = [c for c in used if c not in header]
    if missing_cols:
        raise SchemaError(f"columns not found: {missing_cols}", columns=missing_cols)
    pos = [header.index(c) for c in used]
    numeric = [0, 1] + list(range(3, len(used)))
    values, zraw, dropped, raw_classes = [], [], 0, set()
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"row {r} has {len(row)} fields, expected {len(header)}", row=r, column=None)
        cells = [row[p].strip() for p in pos]
        if cells[2].lower() not in MISSING:
            raw_classes.add(cells[2])
        if any(c.lower() in MISSING for c in cells):
            dropped += 1
            continue
        rec = []
        for k in numeric:
            try:
                rec.append(float(cells[k]))
            except ValueError:
                raise ParseError(
                    f"non-numeric value {cells[k]!r} at row {r}, column {used[k]!r}", row=r, column=used[k]
                ) from None
        values.append(rec)
        zraw.append(cells[2])
    order = schema.get("instrument_order")
    if order is not None:
        order = [str(o) for o in order]
        stray = sorted(set(zraw) - set(order))
        if stray:
            raise SchemaError(f"instrument values {stray} not in instrument_order", values=stray)
    else:
        order = _numeric_key(raw_classes)
    present = set(zraw)
    empty = [o for o in order if o not in present]
    if empty:
        raise SupportError(f"instrument classes {empty} have no rows after filtering", classes=empty)
    if not values:
        raise SupportError("no complete rows")
    code = {o: k for k, o in enumerate(order)}
    arr = np.asarray(values, dtype=float)
    return Dataset(
        outcome=arr[:, 0],
        treatment=arr[:, 1],
        instrument=np.asarray([code[s] for s in zraw], dtype=np.int64),
        covariates=arr[:, 2:],
        instrument_labels=tuple(order),
        covariate_names=tuple(covs),
        names={"outcome": used[0], "treatment": used[1], "instrument": used[2]},
        dropped_rows=dropped,
    )


def _fmean(a) -> float:
    return math.fsum(a.tolist()) / len(a)


def _fvar(a) -> float:
    if len(a) < 2:
        return float("nan")
    m = _fmean(a)
    return math.fsum(((a - m) ** 2).tolist()) / (len(a) - 1)


@dataclass(frozen=True)
class Diagnostics:
    cell_counts: dict
    mean_treatment_by_cell: dict
    first_stage_mean_gaps: list  # dicts: pair, gap, se
    ks_dominance: list  # dicts: pair, statistic, pvalue
    quantile_crossing_flags: list  # dicts: pair, crossing
    dropped_rows: int = 0
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {
            "cell_counts": {str(k): v for k, v in self.cell_counts.items()},
            "mean_treatment_by_cell": {str(k): v for k, v in self.mean_treatment_by_cell.items()},
            "first_stage_mean_gaps": self.first_stage_mean_gaps,
            "ks_dominance": self.ks_dominance,
            "quantile_crossing_flags": self.quantile_crossing_flags,
            "dropped_rows": self.dropped_rows,
            "flags": list(self.flags),
        }

    def to_table(self) -> str:
        lines = ["cell  count  mean(T)"]
        for k, c in self.cell_counts.items():
            lines.append(f"{k:>4}  {c:>5}  {self.mean_treatment_by_cell[k]:.4f}")
        lines.append("")
        lines.append("pair    gap      se       KS     p(KS)   crossing")
        for g, ks, qc in zip(self.first_stage_mean_gaps, self.ks_dominance, self.quantile_crossing_flags):
            se = "   nan" if g["se"] is None else f"{g['se']:.4f}"
            lines.append(
                f"{g['pair'][0]}-{g['pair'][1]}  {g['gap']:+.4f}  {se}  {ks['statistic']:.4f}  "
                f"{ks['pvalue']:.4f}  {'yes' if qc['crossing'] else 'no'}"
            )
        return "\n".join(lines)


def diagnose(d: Dataset, grid_size: int = 99) -> Diagnostics:
    """Advisory first-stage diagnostics for each adjacent code pair (k-1, k).

    The KS test is one-sided with null hypothesis that T|Z=k first-order
    stochastically dominates T|Z=k-1.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    cells = [np.sort(d.treatment[d.instrument == k]) for k in range(d.K + 1)]
    means = {k: _fmean(c) for k, c in enumerate(cells)}
    u = (np.arange(1, grid_size + 1) - 0.5) / grid_size
    scale = float(np.ptp(d.treatment)) or 1.0
    gaps, ks, cross = [], [], []
    for k in range(1, d.K + 1):
        a, b = cells[k - 1], cells[k]
        var = _fvar(a) / len(a) + _fvar(b) / len(b)
        gaps.append(
            {"pair": [k - 1, k], "gap": means[k] - means[k - 1], "se": None if math.isnan(var) else math.sqrt(var)}
        )
        res = ks_2samp(b, a, alternative="greater")
        ks.append({"pair": [k - 1, k], "statistic": float(res.statistic), "pvalue": float(res.pvalue)})
        dq = np.quantile(b, u, method="inverted_cdf") - np.quantile(a, u, method="inverted_cdf")
        tol = 1e-12 * scale
        cross.append({"pair": [k - 1, k], "crossing": bool((dq > tol).any() and (dq < -tol).any())})
    return Diagnostics(
        cell_counts=d.cell_counts,
        mean_treatment_by_cell=means,
        first_stage_mean_gaps=gaps,
        ks_dominance=ks,
        quantile_crossing_flags=cross,
        dropped_rows=d.dropped_rows,
        flags=d.flags,
    )
