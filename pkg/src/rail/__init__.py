"""rail: a dynamic semantic spatial model of industrial indoor environments.

Sensors push relative 6D transform observations and object attributes through
a session-less datagram interface; consumers query poses, objects and spatial
ranges over a framed stream protocol and subscribe to change feeds.  Modules
mirror to slaves and fail over behind broadcast discovery.
"""

from .config import RailConfig, load_config
from .core import RailCore
from .datastores import (
    AttributePredicate,
    BlobRef,
    BlobStore,
    Clause,
    ObjectDocument,
    ObjectStore,
)
from .geometry import (
    GeometryPrimitive,
    Pose6D,
    compose,
    intersects_sphere,
    invert,
    transform_point,
)
from .graph_store import (
    EdgeKey,
    EdgeUpdateResult,
    GraphStore,
    PathConstraints,
    PathResult,
    TransformObservation,
)
from .sim import ScenarioRun, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AttributePredicate",
    "BlobRef",
    "BlobStore",
    "Clause",
    "EdgeKey",
    "EdgeUpdateResult",
    "GeometryPrimitive",
    "GraphStore",
    "ObjectDocument",
    "ObjectStore",
    "PathConstraints",
    "PathResult",
    "Pose6D",
    "RailConfig",
    "RailCore",
    "ScenarioRun",
    "TransformObservation",
    "compose",
    "intersects_sphere",
    "invert",
    "load_config",
    "run_scenario",
    "transform_point",
]
