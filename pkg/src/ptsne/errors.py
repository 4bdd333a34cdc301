"""Exception taxonomy for the ptsne package.

Configuration problems (bad sizes, out-of-range knobs, malformed files)
raise subclasses of :class:`ConfigError`; numerical failures detected at
run time raise subclasses of :class:`NumericalError`.  The CLI maps the
former to exit code 2 and the latter to exit code 3.
"""


class PtsneError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PtsneError):
    """A parameter or input file violates a documented precondition."""


class NumericalError(PtsneError):
    """A numerical procedure failed or produced non-finite values."""


# --- configuration / input validation -----------------------------------

class DataFormatError(ConfigError):
    """An input file could not be parsed as a dataset."""


class SpecTooLarge(ConfigError):
    """A synthetic dataset request exceeds the point-count cap."""


class PerplexityTooLarge(ConfigError):
    """3 * perplexity exceeds n - 1, so the neighbor list cannot be built."""


class KTooLarge(ConfigError):
    """A neighborhood size k >= n was requested from a quality metric."""


class NotNormalized(ConfigError):
    """A vector that must sum to one (within 1e-9) does not."""


class SupportViolation(ConfigError):
    """A KL divergence was requested where q == 0 while p > 0."""


# --- numerical failures ---------------------------------------------------

class NoConvergence(NumericalError):
    """The bandwidth bisection failed to meet tolerance within max_iter."""


class NoRealSolution(NumericalError):
    """The degenerate bandwidth equation has no real root (perplexity too
    small for the requested equidistant neighborhood)."""


class IncompleteEpoch(NumericalError):
    """An epoch finished without every chunk being written exactly once."""


class WorkerFailure(NumericalError):
    """A worker thread raised; the run is aborted."""

    def __init__(self, thread: int, cause: BaseException):
        super().__init__(f"worker thread {thread} failed: {cause!r}")
        self.thread = thread
        self.cause = cause


class NonFiniteEmbedding(NumericalError):
    """Positions became NaN/Inf during gradient descent."""

    def __init__(self, thread: int, iteration: int):
        super().__init__(
            f"non-finite positions in thread {thread} at iteration {iteration}"
        )
        self.thread = thread
        self.iteration = iteration
