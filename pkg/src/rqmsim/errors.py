"""Exception types raised across the package."""

from __future__ import annotations


class SimulationError(Exception):
    """Base class for all errors raised by this package."""


class SpaceMismatchError(SimulationError):
    """Unknown or duplicate subsystem ids, or incompatible dimensions."""


class InvalidStateError(SimulationError):
    """A state, operator or register violates a structural invariant."""


class ImpossibleOutcomeError(SimulationError):
    """A projection or conditioning with (numerically) zero probability."""


class RecordDestroyedError(SimulationError):
    """Strict-mode read of a record that a later interaction destroyed."""


class MissingEventError(SimulationError):
    """An operation requires a prior event that does not exist."""


class UnrelatedEventsError(SimulationError):
    """Two events passed to a link check are not source and learner."""


class ScenarioError(SimulationError):
    """Scenario construction, parsing or validation failed."""
