"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: ParameterError/FormatError -> 2,
TransportError -> 3, DegenerateMapError/NumericError -> 4.
"""


class ProbeError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(ProbeError):
    """An argument violates a documented precondition."""


class FormatError(ProbeError):
    """A file or wire payload does not match its declared format."""


class DimensionError(ParameterError):
    """Array shapes do not agree."""


class TransportError(ProbeError):
    """A policy endpoint failed (connect, timeout, malformed reply)."""


class ProtocolError(TransportError):
    """The remote endpoint violated the wire protocol."""


class CapabilityError(ProbeError):
    """The policy does not support the requested operation."""


class PayloadError(ProbeError):
    """An introspection payload violates its invariants."""


class DegenerateMapError(ProbeError):
    """A saliency map carries no mass; derived ratios are undefined."""


class NumericError(ProbeError):
    """A computation produced non-finite or otherwise unusable values."""
