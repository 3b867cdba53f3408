"""Exception hierarchy. The CLI maps these onto exit codes."""


class HasaError(Exception):
    pass


class ConfigError(HasaError, ValueError):
    """Invalid configuration or operation setup (exit code 2)."""


class DimensionError(HasaError, ValueError):
    """Tensor shapes do not agree."""


class UsageError(HasaError, RuntimeError):
    """API misuse, e.g. backward on a non-scalar."""


class NumericalError(HasaError, ArithmeticError):
    """Non-finite values appeared (exit code 3)."""


class AssemblyError(HasaError, ValueError):
    """A model could not be assembled from its parts."""


class StructuralError(HasaError, ValueError):
    """A cell or genotype violates its structural invariants."""


class RewriteError(HasaError, ValueError):
    """A re-aggregation rewrite could not be applied."""


class IntegrityError(HasaError, AssertionError):
    """A rewritten model no longer matches its source."""


class ArtifactError(HasaError, OSError):
    """Unreadable artifact on disk (exit code 4)."""


class ChecksumError(ArtifactError):
    pass


class UnsupportedVersionError(ArtifactError):
    pass
