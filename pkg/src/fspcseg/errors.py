"""Exception types raised across the package.

Every rejected input raises a subclass of ValueError so callers that only
care about "bad input vs. broken run" can catch one base class; runtime
failures (solver breakdown, diverging training) derive from RuntimeError.
"""


class InputError(ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(InputError):
    """Parameter shapes or configuration values are mutually inconsistent."""


class SamplingError(InputError):
    """An episode cannot be sampled from the given dataset/split."""


class CloudFormatError(ValueError):
    """Base class for point-cloud file parse failures."""


class BadHeaderError(CloudFormatError):
    """Magic string or header line of a cloud file is malformed."""


class TruncatedPayloadError(CloudFormatError):
    """Fewer point values stored than the header declares."""


class LabelMismatchError(CloudFormatError):
    """Label block missing, truncated, or inconsistent with the point count."""


class DegenerateGraphError(RuntimeError):
    """All graph node features coincide (sigma = 0); perturb inputs or skip."""


class SolverError(RuntimeError):
    """The propagation linear system could not be solved to tolerance."""


class NonFiniteLossError(RuntimeError):
    """A training loss became NaN/Inf; carries iteration/seed diagnostics."""

    def __init__(self, message, *, iteration=None, seed=None, loss=None):
        super().__init__(message)
        self.iteration = iteration
        self.seed = seed
        self.loss = loss
