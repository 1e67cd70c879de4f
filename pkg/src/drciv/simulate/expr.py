"""A small closed expression language for structural functions.

Expressions are parsed with ``ast`` and only a whitelist of nodes is
accepted, so every structural function is a vectorized numpy formula that
the oracles can evaluate pointwise.
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr, ndtri

from ..errors import SpecError

_FUNCS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "qnorm": ndtri,
    "pnorm": ndtr,
    "ind": lambda a: np.asarray(a, dtype=float),
    "min": np.minimum,
    "max": np.maximum,
}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}
_CMPOPS = {
    ast.Lt: np.less,
    ast.LtE: np.less_equal,
    ast.Gt: np.greater,
    ast.GtE: np.greater_equal,
}
_VAR = re.compile(r"^(t|u|v|x[1-9][0-9]*|eta[1-9][0-9]*|w[1-9][0-9]*)$")


def _check(node, allowed_vars):
    if isinstance(node, ast.Expression):
        return _check(node.body, allowed_vars)
    if isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise SpecError(f"unsupported constant {node.value!r}")
        return set()
    if isinstance(node, ast.Name):
        if not _VAR.match(node.id) or (allowed_vars is not None and not _allowed(node.id, allowed_vars)):
            raise SpecError(f"variable {node.id!r} is not available here")
        return {node.id}
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _check(node.left, allowed_vars) | _check(node.right, allowed_vars)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        return _check(node.operand, allowed_vars)
    if isinstance(node, ast.Compare):
        if not all(type(op) in _CMPOPS for op in node.ops):
            raise SpecError("only <, <=, >, >= comparisons are allowed")
        out = _check(node.left, allowed_vars)
        for c in node.comparators:
            out |= _check(c, allowed_vars)
        return out
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
            raise SpecError(f"unsupported function call in {ast.unparse(node)!r}")
        nargs = 2 if node.func.id in ("min", "max") else 1
        if len(node.args) != nargs:
            raise SpecError(f"{node.func.id} takes {nargs} argument(s)")
        out = set()
        for a in node.args:
            out |= _check(a, allowed_vars)
        return out
    raise SpecError(f"unsupported syntax: {ast.unparse(node)!r}")


def _allowed(name, allowed):
    for a in allowed:
        if a.endswith("*"):
            if re.match(rf"^{a[:-1]}[1-9][0-9]*$", name):
                return True
        elif name == a:
            return True
    return False


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        val = _eval(node.operand, env)
        return -val if isinstance(node.op, ast.USub) else val
    if isinstance(node, ast.Compare):
        left = _eval(node.left, env)
        out = True
        for op, c in zip(node.ops, node.comparators):
            right = _eval(c, env)
            out = np.logical_and(out, _CMPOPS[type(op)](left, right))
            left = right
        return out
    return _FUNCS[node.func.id](*(_eval(a, env) for a in node.args))


@lru_cache(maxsize=256)
def _tree(text: str):
    return ast.parse(text.replace("^", "**"), mode="eval")


@dataclass(frozen=True)
class Expr:
    """Parsed expression; ``variables`` lists the names it references."""

    text: str
    variables: frozenset

    @classmethod
    def parse(cls, text, allowed=None) -> "Expr":
        text = str(text)
        try:
            tree = _tree(text)
        except SyntaxError as exc:
            raise SpecError(f"cannot parse expression {text!r}: {exc.msg}") from None
        names = _check(tree, allowed)
        return cls(text, frozenset(names))

    def __call__(self, **env) -> np.ndarray:
        missing = self.variables - env.keys()
        if missing:
            raise SpecError(f"expression {self.text!r} needs {sorted(missing)}")
        tree = _tree(self.text)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = _eval(tree.body, env)
        shape = np.broadcast_shapes(*(np.shape(env[k]) for k in self.variables)) if self.variables else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape).astype(float)

    def max_index(self, prefix: str) -> int:
        idx = [int(v[len(prefix):]) for v in self.variables if re.match(rf"^{prefix}[0-9]+$", v)]
        return max(idx, default=0)
