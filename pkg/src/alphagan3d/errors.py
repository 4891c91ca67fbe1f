"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Inputs are outside the mathematical domain of the operation."""


class ContractError(RuntimeError):
    """A caller violated an API precondition."""


class ParseError(ValueError):
    """A textual description (layer code, config file) is malformed."""


class FormatError(ValueError):
    """A binary file is not in the expected format."""


class VersionError(FormatError):
    """A binary file has an unsupported format version."""
