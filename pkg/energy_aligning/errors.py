"""Exception hierarchy."""

from __future__ import annotations


class EnergyAligningError(Exception):
    """Base class for every error raised by the package."""


class ContractViolation(EnergyAligningError, ValueError):
    """An operation was called outside its preconditions."""


class DegenerateClusteringError(ContractViolation):
    """More clusters were requested than there are distinct counts."""


class ConfigurationError(EnergyAligningError, ValueError):
    """A run configuration is incomplete or inconsistent."""


class ParseError(EnergyAligningError, ValueError):
    """An input file is malformed."""


class TrainingDivergedError(EnergyAligningError, RuntimeError):
    """Training produced a non-finite loss."""
