"""Exception hierarchy shared by all rail modules.

Every error carries a stable ``code`` string that is used verbatim on the
wire (consumer protocol error frames) and in counters, so renaming a class
does not silently change the protocol.
"""

from __future__ import annotations


class RailError(Exception):
    """Base class for all rail errors."""

    code = "RailError"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details


# --- spatial graph store ---

class InvalidObservation(RailError):
    code = "InvalidObservation"


class NoPath(RailError):
    """No acceptable path between two frames.

    ``reason`` is one of ``unknown_frame``, ``disconnected``,
    ``constraint_filtered``.
    """

    code = "NoPath"

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or f"no path ({reason})", reason=reason)
        self.reason = reason


class CursorTooOld(RailError):
    """The requested feed cursor precedes compacted history."""

    code = "CursorTooOld"


class FencedWrite(RailError):
    """Write carried an epoch older than the store's fencing epoch."""

    code = "FencedWrite"


# --- datastores ---

class NotFound(RailError):
    code = "NotFound"


class InvalidPath(RailError):
    code = "InvalidPath"


class TypeClash(RailError):
    """Attribute mutation tried to descend through a non-map value."""

    code = "TypeClash"


class TooLarge(RailError):
    code = "TooLarge"


class CorruptContent(RailError):
    """Stored blob content no longer matches its digest."""

    code = "CorruptContent"


# --- ingest plane ---

class MalformedMessage(RailError):
    code = "MalformedMessage"


class UnsupportedVersion(RailError):
    code = "UnsupportedVersion"


class InvalidTransform(RailError):
    """Wire matrix is not a rigid transform."""

    code = "InvalidTransform"


class NoWorkersAvailable(RailError):
    code = "NoWorkersAvailable"


class AmbiguousExternalId(RailError):
    """Two or more objects carry the same external marker id."""

    code = "AmbiguousExternalId"


# --- query plane ---

class MalformedQuery(RailError):
    code = "MalformedQuery"


class UnknownFrame(RailError):
    code = "UnknownFrame"


class SubscriptionOverflow(RailError):
    """Consumer fell behind the subscription event buffer."""

    code = "SubscriptionOverflow"


class NoEndpointKnown(RailError):
    """No live announcement for the requested role."""

    code = "NoEndpointKnown"


# --- control plane ---

class MalformedAnnouncement(RailError):
    code = "MalformedAnnouncement"


class UnknownModule(RailError):
    code = "UnknownModule"


class NoSlaveAvailable(RailError):
    code = "NoSlaveAvailable"


# --- harness / CLI ---

class InvalidScenario(RailError):
    code = "InvalidScenario"


class MalformedSnapshot(RailError):
    code = "MalformedSnapshot"
