"""Broker configuration: defaults plus a key=value config-file loader.

File format: one ``key = value`` pair per line, ``#`` starts a comment.
Peer lists are comma-separated ``id@host:port`` entries.  Durations are
given in milliseconds in the file and held as seconds internally.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field


@dataclass
class ServerConfig:
    server_id: int = 0
    listen_address: str = "127.0.0.1:7000"
    peers: dict[int, str] = field(default_factory=dict)  # id -> host:port, self excluded

    io_threads: int = 0          # 0 = number of CPUs
    workers: int = 0             # 0 = number of CPUs
    num_groups: int = 100
    cache_depth: int = 1000
    max_connections: int = 1_000_000

    batch_max_delay: float = 0.0     # 0 = batching off
    batch_max_bytes: int = 65536
    conflation_window: float = 0.0   # 0 = conflation off
    max_outbound_bytes: int = 4 * 1024 * 1024

    # protocol timers (seconds)
    publish_timeout: float = 2.0     # contact gives up waiting for the broadcast
    replicate_retry: float = 0.25    # coordinator retransmit interval
    session_timeout: float = 5.0     # coordination-KV session expiry
    session_heartbeat: float = 1.0
    peer_ping_interval: float = 0.5
    peer_timeout: float = 2.0        # peer silence before it counts as unresponsive
    reconcile_timeout: float = 1.0
    kv_heartbeat: float = 0.05       # leader append/keepalive interval
    kv_election_min: float = 0.15
    kv_election_max: float = 0.30
    kv_propose_timeout: float = 1.5

    def resolved_io_threads(self) -> int:
        return self.io_threads or os.cpu_count() or 1

    def resolved_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    @property
    def replication_enabled(self) -> bool:
        return bool(self.peers)

    def cluster_size(self) -> int:
        return len(self.peers) + 1

    def validate(self) -> None:
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")
        if self.cache_depth < 1:
            raise ValueError("cache_depth must be >= 1")
        if self.peers and self.cluster_size() < 3:
            raise ValueError("replication requires a cluster of at least 3 servers")
        if self.server_id in self.peers:
            raise ValueError("peer list must not contain the server itself")


_MS_KEYS = {
    "batch_max_delay_ms": "batch_max_delay",
    "conflation_window_ms": "conflation_window",
    "publish_timeout_ms": "publish_timeout",
    "replicate_retry_ms": "replicate_retry",
    "session_timeout_ms": "session_timeout",
    "peer_timeout_ms": "peer_timeout",
}
_INT_KEYS = {
    "server_id", "io_threads", "workers", "num_groups", "cache_depth",
    "batch_max_bytes", "max_outbound_bytes", "max_connections",
}


def parse_peers(raw: str) -> dict[int, str]:
    peers: dict[int, str] = {}
    for entry in raw.split(","):
        entry = entry.strip()
        if not entry:
            continue
        sid, _, addr = entry.partition("@")
        peers[int(sid)] = addr
    return peers


def load_config(path: str) -> ServerConfig:
    cfg = ServerConfig()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "listen_address":
                cfg.listen_address = value
            elif key == "peers":
                cfg.peers = parse_peers(value)
            elif key in _MS_KEYS:
                setattr(cfg, _MS_KEYS[key], float(value) / 1000.0)
            elif key in _INT_KEYS:
                setattr(cfg, key, int(value))
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    cfg.validate()
    return cfg
