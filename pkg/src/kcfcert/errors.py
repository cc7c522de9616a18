"""Exception hierarchy shared across the package.

Exit codes used by the CLI: 2 = validation, 3 = numerical, 4 = I/O.
"""


class KcfError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(KcfError):
    """Bad shapes, dimensions, or arguments detected before heavy compute."""

    exit_code = 2


class NumericalError(KcfError):
    """Numerical failure: rank deficiency, divergence, non-finite values."""

    exit_code = 3


class RankDeficiencyError(NumericalError):
    """A data matrix required to have full row rank does not.

    Carries the offending matrix name and the estimated condition number
    of its Gram matrix.
    """

    def __init__(self, name, cond, limit):
        self.name = name
        self.cond = cond
        self.limit = limit
        super().__init__(
            f"{name} is rank deficient or ill-conditioned: "
            f"cond(M M^T) = {cond:.3e} exceeds {limit:.1e}"
        )


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


class ArtifactError(KcfError):
    """Missing or malformed on-disk artifact."""

    exit_code = 4
