"""Exception hierarchy. Every error carries a short code used by the CLI."""
from __future__ import annotations


class GenShieldError(Exception):
    """Base class; ``code`` feeds the CLI's one-line stderr format."""

    code = "runtime"


class ConfigError(GenShieldError):
    code = "config"


class ShapeError(GenShieldError):
    """Shape mismatch inside an array primitive."""

    code = "shape"

    def __init__(self, op: str, *shapes) -> None:
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class NumericsError(GenShieldError):
    code = "numerics"


class DataFormatError(GenShieldError):
    code = "data"


class CheckpointError(GenShieldError):
    code = "checkpoint"
