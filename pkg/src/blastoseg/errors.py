"""Exception taxonomy shared across the toolkit.

Every deliberate failure raises one of these, so callers (CLI, HTTP
service, tests) can map problems to exit codes / status codes without
string matching.
"""


class BlastosegError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(BlastosegError):
    """Array shapes disagree; the message names the offending axis."""


class UnsupportedConfigError(BlastosegError):
    """A layer or op was asked for a configuration it does not implement."""


class StateError(BlastosegError):
    """An object was used before reaching the required state."""


class PreconditionError(BlastosegError):
    """A caller-side precondition was violated (e.g. non-deterministic
    layer handed to the finite-difference checker)."""


class ValidationError(BlastosegError):
    """Input values are outside the accepted domain."""


class ConfigurationError(BlastosegError):
    """A config object or build request is internally inconsistent."""


class CheckpointError(BlastosegError):
    """Checkpoint file is unreadable or does not match the requested
    architecture."""


class TrainingDiverged(BlastosegError):
    """Loss or a gradient became non-finite during training.

    Carries enough context to point at the failing step.
    """

    def __init__(self, message, *, epoch=None, batch=None, parameter=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.parameter = parameter
