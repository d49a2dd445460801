"""Exception vocabulary shared across the package.

The CLI maps these onto exit codes, so raising the right class matters more
than the message text: ConfigError/DimensionError/ValidationError are user
input problems (exit 2), FormatError and OSError are I/O problems (exit 3),
ToleranceError is a verification failure (exit 1).
"""


class CloudLowerError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(CloudLowerError):
    """A configuration value is outside its allowed range."""


class DimensionError(CloudLowerError):
    """Shapes or band counts do not line up."""


class NumericDomainError(CloudLowerError):
    """An operation was applied outside its numeric domain (div by zero,
    sqrt of a negative plane)."""


class ValidationError(CloudLowerError):
    """A program failed static validation (SSA form, band/scale typing)."""


class LoweringError(CloudLowerError):
    """The network could not be lowered onto the instruction set."""


class FormatError(CloudLowerError):
    """A file or text payload does not conform to its documented format."""


class ToleranceError(CloudLowerError):
    """A numeric verification ran fine but exceeded its tolerance."""
