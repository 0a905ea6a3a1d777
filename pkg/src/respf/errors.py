"""Exception taxonomy shared across the toolkit.

The CLI maps these onto process exit codes: configuration problems exit
with 2, file and transport problems with 3, numerical failures with 4.
Library code raises the most specific class available so callers can
distinguish a bad argument from a corrupt file or a diverged solve.
"""

from __future__ import annotations


class RespfError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(RespfError, ValueError):
    """An argument or configuration value violates a documented precondition."""


class ConfigError(ParameterError):
    """A run configuration (file or flags) is malformed or inconsistent."""


class NumericalError(RespfError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


# ---- array container ----


class ArrayFileError(RespfError, IOError):
    """Base class for array container read/write failures."""


class BadMagicError(ArrayFileError):
    """The file does not start with the expected container magic."""


class TruncatedFileError(ArrayFileError):
    """The file ends before the declared header or payload is complete."""


class ShapeMismatchError(ArrayFileError):
    """The payload length does not match the shape declared in the header."""


class NonFiniteValueError(ArrayFileError):
    """The payload contains NaN or Inf and the caller asked for rejection."""


# ---- denoiser bridge ----


class BridgeError(RespfError):
    """Base class for denoiser bridge transport and protocol failures."""


class ProtocolError(BridgeError):
    """A frame or header violates the wire protocol."""


class VersionMismatchError(ProtocolError):
    """The peer speaks a different protocol version."""


class BridgeTimeoutError(BridgeError, TimeoutError):
    """The peer did not produce a complete frame within the deadline."""


class RemoteDenoiserError(BridgeError):
    """The server answered with an error frame; carries the server message."""
