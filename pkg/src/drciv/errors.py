"""Exception hierarchy.

Every error carries a ``details`` dict so the CLI can serialize it.
"""
from __future__ import annotations


class DrcivError(Exception):
    kind = "error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "message": str(self)}
        out.update({k: _plain(v) for k, v in self.details.items()})
        return out


def _plain(v):
    if hasattr(v, "tolist"):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    return v


class SchemaError(DrcivError):
    kind = "schema"


class ParseError(DrcivError):
    kind = "parse"


class SupportError(DrcivError):
    kind = "support"


class SingularDesignError(DrcivError):
    kind = "singular_design"


class ConvergenceError(DrcivError):
    kind = "convergence"


class GridError(DrcivError):
    kind = "grid"


class SampleSizeError(DrcivError):
    kind = "sample_size"


class ExtrapolationError(DrcivError):
    kind = "extrapolation"


class WeakFirstStageError(DrcivError):
    kind = "weak_first_stage"


class AllTrimmedError(DrcivError):
    kind = "all_trimmed"


class EmptySignSetError(DrcivError):
    kind = "empty_sign_set"


class PairError(DrcivError):
    kind = "pair_failed"


class BootstrapUnstableError(DrcivError):
    kind = "bootstrap_unstable"


class SpecError(DrcivError):
    kind = "spec"


class SpecConsistencyError(SpecError):
    kind = "spec_consistency"


class ResolutionError(DrcivError):
    kind = "resolution"


class ConfigError(DrcivError):
    kind = "config"
