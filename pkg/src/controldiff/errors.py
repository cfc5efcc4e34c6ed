"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2 (argparse),
contract/invariant violations exit 3, everything else exits 1.
"""


class ControlDiffError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ControlDiffError):
    """A config value or a combination of config values is invalid."""


class ContractViolation(ControlDiffError):
    """A caller broke an interface contract (wrong shapes, counts, order)."""


class DomainError(ControlDiffError):
    """An argument is outside its valid domain (e.g. timestep out of range)."""


class NumericsError(ControlDiffError):
    """Non-finite values appeared where finite ones are required."""


class StateError(ControlDiffError):
    """An object was used before it reached the required state."""


class CheckpointError(ControlDiffError):
    """Checkpoint is malformed or incompatible with the target model."""
