"""
Exception hierarchy for TriTower.

Every error carries the process exit code the CLI reports for it:
2 for usage/config problems, 3 for I/O or missing artefacts, 4 for numerical
failures. Domain errors also subclass the closest builtin so callers that only
know ``ValueError`` / ``OSError`` still catch them.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class TriTowerError(Exception):
    exit_code = EXIT_USAGE


# ---------------------------------------------------------------------------
# Usage / configuration (exit 2)
# ---------------------------------------------------------------------------

class ConfigError(TriTowerError, ValueError):
    """Invalid flag combination or configuration value."""


class SpecInvalid(ConfigError):
    pass


class DimMismatch(TriTowerError, ValueError):
    pass


class ShapeMismatch(TriTowerError, ValueError):
    pass


class NonSquare(ShapeMismatch):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class NotNormalized(TriTowerError, ValueError):
    pass


class NonPositiveTemperature(TriTowerError, ValueError):
    pass


class StepOutOfRange(TriTowerError, ValueError):
    pass


class MissingFrozenTower(ConfigError):
    pass


class UnknownId(TriTowerError, KeyError):
    pass


class EmptyDataset(TriTowerError, ValueError):
    pass


class InsufficientShots(TriTowerError, ValueError):
    pass


class AlphaOutOfRange(ConfigError):
    pass


class NotAProbability(TriTowerError, ValueError):
    pass


class EmptyScores(TriTowerError, ValueError):
    pass


# ---------------------------------------------------------------------------
# I/O and artefacts (exit 3)
# ---------------------------------------------------------------------------

class ArtifactError(TriTowerError, OSError):
    exit_code = EXIT_IO


class MatrixIoError(ArtifactError):
    pass


class BadMagic(MatrixIoError):
    pass


class BadVersion(MatrixIoError):
    pass


class TruncatedFile(MatrixIoError):
    pass


# ---------------------------------------------------------------------------
# Numerical failures (exit 4)
# ---------------------------------------------------------------------------

class NumericalFailure(TriTowerError, ArithmeticError):
    exit_code = EXIT_NUMERICAL


class ZeroRow(NumericalFailure, ValueError):
    pass
