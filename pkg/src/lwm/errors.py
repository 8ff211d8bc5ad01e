"""Exception types shared across the package."""


class LwmError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(LwmError):
    """Operands or arguments have incompatible dimensions."""


class ContractError(LwmError):
    """A documented precondition was violated by the caller."""


class FileFormatError(LwmError):
    """Base class for problems with the binary file formats."""


class MagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FileFormatError):
    """File carries an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """File ended before the advertised payload was complete."""


class DimensionOverflowError(FileFormatError):
    """A value does not fit the fixed-width field of the file format."""


class ConfigMismatchError(LwmError):
    """Stored metadata disagrees with the requested configuration."""
