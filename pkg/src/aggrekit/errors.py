"""Structured error types shared by the solvers, inversions and the CLI."""


class AggrekitError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this failure."""

    exit_code = 3

    def __init__(self, message, stage=None, **details):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.details = details

    def to_dict(self):
        out = {"error": type(self).__name__, "message": self.message}
        if self.stage is not None:
            out["stage"] = self.stage
        if self.details:
            out["details"] = {k: _plain(v) for k, v in self.details.items()}
        return out

    def __str__(self):
        tag = f"[{self.stage}] " if self.stage else ""
        return tag + self.message


class ConfigError(AggrekitError):
    exit_code = 2


class GridError(AggrekitError, ValueError):
    exit_code = 2


class NumericalFailure(AggrekitError):
    exit_code = 3


class CFLViolation(NumericalFailure):
    pass


class NonDivergenceSource(NumericalFailure):
    pass


class NonphysicalDiffusion(NumericalFailure):
    pass


class NonIdentifiable(AggrekitError):
    exit_code = 4


def _plain(v):
    try:
        import numpy as np

        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, np.generic):
            return v.item()
    except ImportError:  # pragma: no cover
        pass
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v
