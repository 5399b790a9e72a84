"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class DecodeError(ValueError):
    """An image, tensor or checkpoint file could not be parsed."""


class ProtocolError(ValueError):
    """An evaluation protocol cannot be applied to the given data."""


class ManifestError(ValueError):
    """A dataset manifest is malformed or inconsistent."""
