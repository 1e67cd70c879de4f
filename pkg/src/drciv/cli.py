"""Command-line driver: estimate, diagnose, simulate, mc.

Settings come from flags and/or a JSON config file (``--config``); flags win.
Every run writes ``resolved_config.json`` next to its reports, and feeding
that file back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

from . import __version__
from .dataset import diagnose, load_dataset
from .errors import ConfigError, DrcivError, SchemaError, SpecError
from .estimands import EstimandConfig, TrimmingSpec
from .pipeline import ESTIMANDS, estimate, parse_estimand
from .quantreg import QuantileGrid
from .report import format_table
from .sieve import BasisSpec

COMMANDS = ("estimate", "diagnose", "simulate", "mc")
_DATA_KEYS = ("data", "outcome", "treatment", "iv", "covariates", "iv_order")
_EST_KEYS = ("grid", "basis", "trimming", "sign_mode", "use_covariates", "pair", "multi", "rearrange", "estimands")
KEYS = {
    "estimate": {"command", "out", "seed", "workers", "inference", "bootstrap", "level", *_DATA_KEYS, *_EST_KEYS},
    "diagnose": {"command", "out", "grid", *_DATA_KEYS},
    "simulate": {"command", "out", "seed", "spec", "n"},
    "mc": {"command", "out", "seed", "workers", "spec", "n", "reps", "level", "resolution", "oracles", *_EST_KEYS},
}
DEFAULTS = {
    "out": "drciv-output",
    "seed": 0,
    "workers": 1,
    "inference": "plugin",
    "bootstrap": 200,
    "level": 0.95,
    "covariates": [],
    "iv_order": None,
    "grid": 99,
    "basis": {"family": "power", "J": 2, "order": 4, "knots": "quantile"},
    "trimming": {"rule": "baseline"},
    "sign_mode": "abs",
    "use_covariates": True,
    "pair": [0, 1],
    "multi": False,
    "rearrange": True,
    "estimands": ["pi_dr"],
    "reps": 100,
    "resolution": 200,
    "oracles": {},
}
EXIT_OK, EXIT_ESTIMATION, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drciv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"drciv {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, workers=True):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)
        if workers:
            sp.add_argument("--workers", type=int, help="parallel jobs for bootstrap and MC replicates")

    def data(sp):
        sp.add_argument("--data", help="delimited text file with a header row")
        sp.add_argument("--outcome")
        sp.add_argument("--treatment")
        sp.add_argument("--iv", help="instrument column")
        sp.add_argument("--covariates", help="comma separated covariate columns")
        sp.add_argument("--iv-order", dest="iv_order", help="comma separated raw instrument values in code order")

    def est(sp):
        sp.add_argument("--estimand", dest="estimands", help=f"comma separated, from {', '.join(ESTIMANDS)}")
        sp.add_argument("--grid", type=int, help="number of quantile grid points l")
        sp.add_argument("--basis", dest="basis_family", choices=["power", "bspline"])
        sp.add_argument("--J", type=int, dest="basis_J", help="basis functions in t, constant included")
        sp.add_argument("--order", type=int, dest="basis_order", help="B-spline order")
        sp.add_argument("--knots", dest="basis_knots", choices=["quantile", "uniform"])
        sp.add_argument("--trimming", help="baseline, multiple:M or fixed:VALUE")
        sp.add_argument("--sign-mode", dest="sign_mode", choices=["abs", "positive", "negative"])
        sp.add_argument("--no-covariates", dest="use_covariates", action="store_const", const=False)
        sp.add_argument("--pair", help="two instrument codes, e.g. 0,1")
        sp.add_argument("--multi", action="store_const", const=True, help="aggregate over all arms")
        sp.add_argument("--no-rearrange", dest="rearrange", action="store_const", const=False)

    sp = sub.add_parser("estimate", help="estimate effects on a data file")
    common(sp)
    data(sp)
    est(sp)
    sp.add_argument("--inference", choices=["plugin", "bootstrap", "both"])
    sp.add_argument("--bootstrap", type=int, help="bootstrap replicates B (implies both unless --inference)")
    sp.add_argument("--level", type=float)

    sp = sub.add_parser("diagnose", help="first-stage diagnostics")
    common(sp, seed=False, workers=False)
    data(sp)
    sp.add_argument("--grid", type=int)

    sp = sub.add_parser("simulate", help="draw a dataset from a DGP")
    common(sp, workers=False)
    sp.add_argument("--spec", help="preset name or DGP JSON file")
    sp.add_argument("--n", type=int)

    sp = sub.add_parser("mc", help="Monte Carlo study against the oracle")
    common(sp)
    est(sp)
    sp.add_argument("--spec", help="preset name or DGP JSON file")
    sp.add_argument("--n", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--level", type=float)
    sp.add_argument("--resolution", type=int, help="oracle quadrature resolution")
    sp.add_argument("--oracle", dest="oracles", help="estimand=oracle_id overrides, comma separated; 'none' skips")
    return p


def _split(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _split_estimands(text):
    # commas inside parentheses belong to the argument list
    out, depth, cur = [], 0, ""
    for ch in text:
        depth += ch == "("
        depth -= ch == ")"
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _trimming_from_flag(text):
    rule, _, arg = text.partition(":")
    if rule == "baseline" and not arg:
        return {"rule": "baseline"}
    if rule == "multiple" and arg:
        return {"rule": "multiple", "multiplier": float(arg)}
    if rule == "fixed" and arg:
        return {"rule": "fixed", "value": float(arg)}
    raise UsageError(f"bad --trimming {text!r}; use baseline, multiple:M or fixed:VALUE")


def _flag_values(args) -> dict:
    out = {}
    for k, v in vars(args).items():
        if v is None or k in ("config", "command") or k.startswith("basis_"):
            continue
        out[k] = v
    try:
        if "covariates" in out:
            out["covariates"] = _split(out["covariates"])
        if "iv_order" in out:
            out["iv_order"] = _split(out["iv_order"])
        if "estimands" in out:
            out["estimands"] = _split_estimands(out["estimands"])
        if "pair" in out:
            out["pair"] = [int(s) for s in _split(out["pair"])]
        if "trimming" in out:
            out["trimming"] = _trimming_from_flag(out["trimming"])
        if "oracles" in out:
            pairs = [s.split("=", 1) for s in _split_estimands(out["oracles"])]
            out["oracles"] = {k.strip(): (None if v.strip() == "none" else v.strip()) for k, v in pairs}
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    basis = {k[len("basis_"):]: v for k, v in vars(args).items() if k.startswith("basis_") and v is not None}
    if basis:
        out["basis"] = basis
    return out


def resolve_config(args) -> dict:
    """Merge config file, flags and defaults into the fully resolved run config."""
    cmd = args.command
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        if cfg.get("command", cmd) != cmd:
            raise UsageError(f"config is for {cfg['command']!r}, not {cmd!r}")
        unknown = set(cfg) - KEYS[cmd]
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
    flags = _flag_values(args)
    if cmd == "estimate" and "bootstrap" in flags and "inference" not in flags and "inference" not in cfg:
        flags["inference"] = "both"
    if "basis" in flags:
        flags["basis"] = {**cfg.get("basis", {}), **flags["basis"]}
    cfg.update(flags)
    cfg["command"] = cmd
    for k in sorted(KEYS[cmd]):
        if k not in cfg and k in DEFAULTS:
            cfg[k] = DEFAULTS[k]
    if "basis" in cfg:
        cfg["basis"] = {**DEFAULTS["basis"], **cfg["basis"]}
    _validate(cfg)
    return {k: cfg[k] for k in sorted(cfg)}


def _validate(cfg):
    cmd = cfg["command"]
    need = {"estimate": ("data", "outcome", "treatment", "iv"), "diagnose": ("data", "outcome", "treatment", "iv"),
            "simulate": ("spec", "n"), "mc": ("spec", "n")}[cmd]
    missing = [k for k in need if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{cmd} needs {', '.join('--' + m.replace('_', '-') for m in missing)}")
    checks = [
        ("grid", lambda v: isinstance(v, int) and v >= 2, "an integer >= 2"),
        ("n", lambda v: isinstance(v, int) and v >= 1, "a positive integer"),
        ("reps", lambda v: isinstance(v, int) and v >= 2, "an integer >= 2"),
        ("workers", lambda v: isinstance(v, int) and v >= 1, "a positive integer"),
        ("bootstrap", lambda v: isinstance(v, int) and v >= 2, "an integer >= 2"),
        ("level", lambda v: isinstance(v, (int, float)) and 0 < v < 1, "in (0, 1)"),
        ("resolution", lambda v: isinstance(v, int) and v >= 8 and v % 4 == 0, "a multiple of 4, at least 8"),
        ("inference", lambda v: v in ("plugin", "bootstrap", "both"), "plugin, bootstrap or both"),
        ("sign_mode", lambda v: v in ("abs", "positive", "negative"), "abs, positive or negative"),
        ("seed", lambda v: isinstance(v, int) and v >= 0, "a nonnegative integer"),
        ("pair", lambda v: isinstance(v, list) and len(v) == 2 and all(isinstance(c, int) for c in v), "two codes"),
    ]
    for key, ok, what in checks:
        if key in cfg and not ok(cfg[key]):
            raise UsageError(f"{key} must be {what}, got {cfg[key]!r}")
    for e in cfg.get("estimands", []):
        parse_estimand(e)


def estimand_config(cfg) -> EstimandConfig:
    b = cfg["basis"]
    unknown = set(b) - {"family", "J", "order", "knots"}
    if unknown:
        raise UsageError(f"unknown basis keys {sorted(unknown)}")
    t = dict(cfg["trimming"])
    rule = t.pop("rule", None)
    try:
        if rule == "baseline" and not t:
            trim = TrimmingSpec.baseline()
        elif rule == "multiple" and set(t) == {"multiplier"}:
            trim = TrimmingSpec.multiple(t["multiplier"])
        elif rule == "fixed" and set(t) == {"value"}:
            trim = TrimmingSpec.fixed(t["value"])
        else:
            raise UsageError(f"bad trimming block {cfg['trimming']!r}")
        return EstimandConfig(
            grid=QuantileGrid(cfg["grid"]),
            basis=BasisSpec(family=b["family"], J=int(b["J"]), order=int(b["order"]), knots=b["knots"]),
            trimming=trim,
            sign_mode=cfg["sign_mode"],
            use_covariates=bool(cfg["use_covariates"]),
            pair=tuple(cfg["pair"]),
            multi=bool(cfg["multi"]),
            rearrange=bool(cfg["rearrange"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def tuning_warnings(n: int, l: int, J: int) -> list:
    out = []
    if l < math.sqrt(n) * math.log(n):
        out.append(f"grid size l={l} is below sqrt(n) ln(n) = {math.sqrt(n) * math.log(n):.1f}")
    if J > 1 and J * math.sqrt(J * math.log(J) / n) > 1:
        out.append(f"J={J} is large for n={n}: J sqrt(J ln J / n) = {J * math.sqrt(J * math.log(J) / n):.2f} > 1")
    return out


def _load(cfg):
    schema = {
        "outcome": cfg["outcome"],
        "treatment": cfg["treatment"],
        "instrument": cfg["iv"],
        "covariates": cfg["covariates"],
    }
    if cfg.get("iv_order"):
        schema["instrument_order"] = cfg["iv_order"]
    return load_dataset(Path(cfg["data"]), schema)


def _write(out: Path, cfg, doc, text):
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n",
                                     encoding="utf-8")
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(x):
    """NaN and inf become null so the report is strict JSON."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def run_estimate(cfg) -> int:
    d = _load(cfg)
    config = estimand_config(cfg)
    notes = tuning_warnings(d.n, config.grid.l, config.basis.J)
    plugin = cfg["inference"] in ("plugin", "both")
    B = cfg["bootstrap"] if cfg["inference"] in ("bootstrap", "both") else 0
    reports, errors = [], []
    for e in cfg["estimands"]:
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                r = estimate(d, e, config, plugin=plugin, bootstrap=B, seed=cfg["seed"], level=cfg["level"],
                             workers=cfg["workers"])
            r = r.add_warnings(*notes, *(str(w.message) for w in caught))
            reports.append(r)
        except DrcivError as exc:
            errors.append({"estimand": e, **exc.to_dict()})
    doc = {
        "command": "estimate",
        "version": __version__,
        "n": d.n,
        "dropped_rows": d.dropped_rows,
        "reports": [r.to_dict() for r in reports],
        "errors": errors,
        "warnings": notes,
    }
    text = format_table(reports)
    if errors:
        text += "\n" + "\n".join(f"{e['estimand']}: {e['kind']}: {e['message']}" for e in errors)
    if notes:
        text += "\n" + "\n".join(f"warning: {w}" for w in notes)
    _write(Path(cfg["out"]), cfg, _clean(doc), text)
    print(text)
    return EXIT_ESTIMATION if errors else EXIT_OK


def run_diagnose(cfg) -> int:
    d = _load(cfg)
    diag = diagnose(d, cfg["grid"])
    doc = {"command": "diagnose", "version": __version__, "n": d.n, "diagnostics": diag.to_dict()}
    text = diag.to_table()
    _write(Path(cfg["out"]), cfg, _clean(doc), text)
    print(text)
    return EXIT_OK


def run_simulate(cfg) -> int:
    from .simulate import generate, load_spec

    spec = load_spec(cfg["spec"])
    d = generate(spec, cfg["n"], seed=cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "data.csv").write_text(d.to_csv(), encoding="utf-8")
    doc = {"command": "simulate", "version": __version__, "n": d.n, "spec": spec.to_dict(),
           "schema": d.schema(), "cell_counts": {str(k): v for k, v in d.cell_counts.items()}}
    text = f"wrote {d.n} rows from {spec.name} to {out / 'data.csv'}"
    _write(out, cfg, _clean(doc), text)
    print(text)
    return EXIT_OK


def run_mc(cfg) -> int:
    from .simulate import load_spec
    from .simulate.mc import McEstimator, monte_carlo

    spec = load_spec(cfg["spec"])
    config = estimand_config(cfg)
    oracles = cfg["oracles"]
    stray = set(oracles) - set(cfg["estimands"])
    if stray:
        raise UsageError(f"oracle overrides for unlisted estimands: {sorted(stray)}")
    ests = [McEstimator(e, e, config, oracle=oracles.get(e, "auto")) for e in cfg["estimands"]]
    rep = monte_carlo(spec, ests, reps=cfg["reps"], n=cfg["n"], seed=cfg["seed"], workers=cfg["workers"],
                      level=cfg["level"], resolution=cfg["resolution"])
    notes = tuning_warnings(cfg["n"], config.grid.l, config.basis.J)
    doc = {"command": "mc", "version": __version__, "spec": spec.to_dict(), **rep.to_dict(), "warnings": notes}
    text = rep.to_table() + "".join(f"\nwarning: {w}" for w in notes)
    _write(Path(cfg["out"]), cfg, _clean(doc), text)
    print(text)
    return EXIT_OK


RUNNERS = {"estimate": run_estimate, "diagnose": run_diagnose, "simulate": run_simulate, "mc": run_mc}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cfg = None
    try:
        cfg = resolve_config(args)
        return RUNNERS[cfg["command"]](cfg)
    except (UsageError, ConfigError, SchemaError, SpecError) as exc:
        print(f"drciv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DrcivError as exc:
        print(f"drciv {args.command}: {exc.kind}: {exc}", file=sys.stderr)
        try:
            _write(Path(cfg["out"]), cfg, {"command": args.command, "version": __version__, "error": exc.to_dict()},
                   f"error: {exc.kind}: {exc}")
        except OSError:
            pass
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"drciv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
