"""Exception hierarchy shared by every uninet module.

Each error carries an ``exit_code`` so the command-line front end can map
failures onto its documented process status without a lookup table.
"""

from __future__ import annotations


class UninetError(Exception):
    """Base class for all recoverable uninet failures."""

    exit_code = 2


class UsageError(UninetError):
    exit_code = 1


# -- capture ingest ---------------------------------------------------------

class CaptureError(UninetError):
    pass


class BadMagic(CaptureError):
    pass


class TruncatedHeader(CaptureError):
    pass


class UnsupportedLinkType(CaptureError):
    pass


class MalformedLine(UninetError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class FieldOutOfRange(UninetError):
    def __init__(self, field: str, value, line_no: int | None = None):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{field}={value!r} out of range")
        self.field = field
        self.value = value
        self.line_no = line_no


# -- assembly / features ----------------------------------------------------

class NonPositiveWindow(UninetError, ValueError):
    pass


class ZeroMask(UninetError, ValueError):
    pass


# -- codec ------------------------------------------------------------------

class EmptyFeature(UninetError, ValueError):
    pass


class UnknownFeature(UninetError, KeyError):
    pass


class EmptySession(UninetError, ValueError):
    pass


class FormatVersionMismatch(UninetError):
    pass


class ArtifactVersionMismatch(UninetError):
    pass


# -- model ------------------------------------------------------------------

class TokenOutOfRange(UninetError, ValueError):
    pass


class SegmentOutOfRange(UninetError, ValueError):
    pass


class NaNDetected(UninetError, FloatingPointError):
    exit_code = 3


class NoMaskedPositions(UninetError, ValueError):
    pass


# -- metrics ----------------------------------------------------------------

class EmptyMatrix(UninetError, ValueError):
    pass


class SingleClass(UninetError, ValueError):
    pass


# -- configuration ----------------------------------------------------------

class ConfigInvalid(UninetError):
    exit_code = 1

    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason
