"""Configuration tree with exhaustive defaults.

An empty config runs.  Values load from a JSON file and can be overridden
per key with environment variables named ``RAIL_<SECTION>_<KEY>`` (e.g.
``RAIL_PORTS_INGEST=47500``, ``RAIL_REPLICATION_MODE=async``).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


@dataclass
class PortsConfig:
    discovery: int = 47474
    ingest: int = 47400
    query: int = 47410
    replication: int = 47420


@dataclass
class DiscoveryConfig:
    announce_interval_us: int = 1_000_000
    stale_intervals: int = 3
    bind_host: str = "0.0.0.0"
    # Broadcast by default; tests and single-host setups point this at a
    # unicast address instead.
    target_host: str = "255.255.255.255"


@dataclass
class HeartbeatConfig:
    interval_us: int = 500_000
    suspect_misses: int = 1
    failed_misses: int = 3


@dataclass
class IngestConfig:
    workers: int = 4
    max_observations: int = 64
    max_datagram_bytes: int = 60 * 1024
    unknown_marker_policy: str = "create_provisional"  # or "drop"


@dataclass
class CacheConfig:
    max_entries: int = 4096


@dataclass
class QueryConfig:
    subscription_buffer: int = 10_000
    max_frame_bytes: int = 16 * 1024 * 1024


@dataclass
class ReplicationConfig:
    mode: str = "sync"  # or "async"
    async_interval_us: int = 100_000


@dataclass
class StoreConfig:
    index_paths: list = field(default_factory=lambda: ["marker.*.id"])
    blob_limit_bytes: int = 256 * 1024 * 1024
    # Lexicographic path objective: uncertainty before resolution by default.
    sigma_first: bool = True


@dataclass
class RailConfig:
    ports: PortsConfig = field(default_factory=PortsConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    heartbeat: HeartbeatConfig = field(default_factory=HeartbeatConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    replication: ReplicationConfig = field(default_factory=ReplicationConfig)
    store: StoreConfig = field(default_factory=StoreConfig)


def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def load_config(path: Optional[str] = None, env: Optional[dict] = None) -> RailConfig:
    """Build a config from defaults, an optional JSON file, then env overrides."""
    config = RailConfig()
    if path:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("config root must be a JSON object")
        for section_name, values in data.items():
            section = getattr(config, section_name, None)
            if section is None or not dataclasses.is_dataclass(section):
                raise ValueError(f"unknown config section {section_name!r}")
            if not isinstance(values, dict):
                raise ValueError(f"config section {section_name!r} must be an object")
            for key, value in values.items():
                if not hasattr(section, key):
                    raise ValueError(f"unknown config key {section_name}.{key}")
                setattr(section, key, value)
    env = os.environ if env is None else env
    for section_field in dataclasses.fields(config):
        section = getattr(config, section_field.name)
        for key_field in dataclasses.fields(section):
            env_name = f"RAIL_{section_field.name.upper()}_{key_field.name.upper()}"
            if env_name in env:
                current = getattr(section, key_field.name)
                setattr(section, key_field.name, _coerce(current, env[env_name]))
    return config
