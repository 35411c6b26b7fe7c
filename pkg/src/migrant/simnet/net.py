"""Deterministic discrete-event network hosting servers and clients.

One event runs at a time in virtual-time order with insertion-index
tie-breaking, so a (seed, config, script, workload) tuple always produces a
bit-identical event trace.  Links are reliable-FIFO byte pipes unless a fault
says otherwise: each transmission is one encoded frame block, faults drop
whole blocks, and delivery may optionally split a block to exercise
incremental decoding.  Server-to-server frames cross a partition cut are
dropped silently; connections between clients and their server survive a
partition (the fencing logic, not the network, kicks those clients out).
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

TINY = 1e-9  # per-pipe FIFO spacing


@dataclass(frozen=True)
class TraceEvent:
    t: float
    kind: str
    fields: tuple  # sorted (name, value) pairs

    def get(self, name, default=None):
        for k, v in self.fields:
            if k == name:
                return v
        return default


class SimTimer:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


# ---------------------------------------------------------------------------
# fault script


@dataclass(frozen=True)
class Crash:
    t: float
    server: int


@dataclass(frozen=True)
class Restart:
    t: float
    server: int


@dataclass(frozen=True)
class Partition:
    """Servers in different sets cannot exchange frames."""

    t: float
    sets: tuple[frozenset[int], ...]


@dataclass(frozen=True)
class Heal:
    t: float


@dataclass(frozen=True)
class DropNext:
    """Silently drop the next `count` frames sent src -> dst (server ids).

    With `kind` set, only frames of that wire kind are counted and dropped,
    letting a script target e.g. the replication stream while the
    coordination traffic sharing the link flows on.
    """

    t: float
    src: int
    dst: int
    count: int
    kind: Optional[int] = None


FaultEvent = Crash | Restart | Partition | Heal | DropNext


@dataclass
class SimConfig:
    seed: int = 0
    servers: int = 3
    link_delay: tuple[float, float] = (0.001, 0.010)  # seconds
    horizon: float = 60.0
    chunk_split_prob: float = 0.0
    max_events: int = 5_000_000


# ---------------------------------------------------------------------------


class _ServerEnv:
    """Environment handed to a hosted server node."""

    def __init__(self, net: SimNet, server: _SimServer):
        self._net = net
        self._server = server
        self.rng = random.Random(net.master_rng.getrandbits(64))

    @property
    def alive(self) -> bool:
        return self._server.alive

    def now(self) -> float:
        return self._net.t

    def call_later(self, delay: float, fn: Callable, *args) -> SimTimer:
        gen = self._server.gen
        timer = SimTimer()

        def fire():
            if timer.cancelled or self._server.gen != gen or not self._server.alive:
                return
            fn(*args)

        self._net.schedule(delay, fire)
        return timer

    def defer(self, fn: Callable, *args) -> None:
        self.call_later(0.0, fn, *args)

    def send_client(self, conn_id: int, data: bytes) -> None:
        self._net._server_to_client(self._server, conn_id, data)

    def close_client(self, conn_id: int) -> None:
        self._net._server_close_conn(self._server, conn_id)

    def outbound_backlog(self, conn_id: int) -> int:
        return 0

    def send_peer(self, peer: int, data: bytes) -> None:
        self._net._server_to_server(self._server.sid, peer, data)

    def set_accepting(self, flag: bool) -> None:
        self._server.accepting = flag

    def trace(self, kind: str, **fields) -> None:
        self._net.record(kind, server=self._server.sid, **fields)

    def storage(self) -> dict:
        """Per-server dict surviving restarts (stands in for a disk)."""
        return self._net._storage.setdefault(self._server.sid, {})


class _SimServer:
    def __init__(self, sid: int):
        self.sid = sid
        self.alive = True
        self.accepting = True
        self.gen = 0
        self.node = None
        self.env: Optional[_ServerEnv] = None
        self.conns: dict[int, _SimConn] = {}
        self.next_conn_id = 1


class _SimConn:
    __slots__ = ("client", "client_cid", "server_sid", "server_conn_id", "open")

    def __init__(self, client: SimClient, client_cid: int, server_sid: int, server_conn_id: int):
        self.client = client
        self.client_cid = client_cid
        self.server_sid = server_sid
        self.server_conn_id = server_conn_id
        self.open = True


class SimClient:
    """A client endpoint; handlers are assigned by the hosted client logic."""

    def __init__(self, net: SimNet, name: str):
        self._net = net
        self.name = name
        self.rng = random.Random(net.master_rng.getrandbits(64))
        self.next_cid = 1
        self.conns: dict[int, _SimConn] = {}
        # handler slots
        self.on_connected: Callable[[int], None] = lambda cid: None
        self.on_connect_failed: Callable[[int], None] = lambda cid: None
        self.on_bytes: Callable[[int, bytes], None] = lambda cid, data: None
        self.on_closed: Callable[[int], None] = lambda cid: None

    def now(self) -> float:
        return self._net.t

    def call_later(self, delay: float, fn: Callable, *args) -> SimTimer:
        timer = SimTimer()

        def fire():
            if not timer.cancelled:
                fn(*args)

        self._net.schedule(delay, fire)
        return timer

    def defer(self, fn: Callable, *args) -> None:
        self.call_later(0.0, fn, *args)

    def trace(self, kind: str, **fields) -> None:
        self._net.record(kind, client=self.name, **fields)

    def connect(self, address: str) -> int:
        """Open a connection to a server label ("s0", "s1", ...)."""
        cid = self.next_cid
        self.next_cid += 1
        self._net._client_connect(self, cid, address)
        return cid

    def send(self, cid: int, data: bytes) -> None:
        self._net._client_to_server(self, cid, data)

    def close(self, cid: int) -> None:
        self._net._client_close(self, cid)


class SimNet:
    def __init__(self, config: SimConfig):
        self.config = config
        self.t = 0.0
        self.master_rng = random.Random(config.seed)
        self.link_rng = random.Random(self.master_rng.getrandbits(64))
        self._heap: list = []
        self._idx = 0
        self._events_run = 0
        self.servers: dict[int, _SimServer] = {}
        self.clients: dict[str, SimClient] = {}
        self.trace: list[TraceEvent] = []
        self._storage: dict[int, dict] = {}
        self._node_factories: dict[int, Callable] = {}
        self._partition: Optional[tuple[frozenset[int], ...]] = None
        self._drop_rules: dict[tuple[int, int], int] = {}
        self._pipe_clock: dict[tuple, float] = {}
        self._trace_probes: dict[str, list[Callable]] = {}
        self.failures: list[str] = []

    # ------------------------------------------------------------------
    # construction

    def add_server(self, sid: int, node_factory: Callable) -> None:
        """node_factory(env) -> node; the node must expose
        on_client_connect/on_client_bytes/on_client_close/on_peer_bytes."""
        server = _SimServer(sid)
        self.servers[sid] = server
        self._node_factories[sid] = node_factory
        env = _ServerEnv(self, server)
        server.env = env
        server.node = node_factory(env)

    def add_client(self, name: str) -> SimClient:
        client = SimClient(self, name)
        self.clients[name] = client
        return client

    # ------------------------------------------------------------------
    # scheduling

    def schedule(self, delay: float, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (self.t + delay, self._idx, fn, args))
        self._idx += 1

    def run(self, until: Optional[float] = None) -> None:
        horizon = self.config.horizon if until is None else until
        while self._heap and self._heap[0][0] <= horizon:
            t, _, fn, args = heapq.heappop(self._heap)
            assert t >= self.t - TINY, "virtual time went backward"
            self.t = max(self.t, t)
            self._events_run += 1
            if self._events_run > self.config.max_events:
                raise RuntimeError("event budget exceeded")
            fn(*args)
        self.t = max(self.t, horizon)

    def record(self, kind: str, **fields) -> None:
        ev = TraceEvent(self.t, kind, tuple(sorted(fields.items())))
        self.trace.append(ev)
        for probe in self._trace_probes.get(kind, ()):
            probe(self, ev)

    def on_trace(self, kind: str, probe: Callable) -> None:
        """Register a probe invoked synchronously at each event of `kind`."""
        self._trace_probes.setdefault(kind, []).append(probe)

    def trace_hash(self) -> str:
        h = hashlib.sha256()
        for ev in self.trace:
            h.update(repr((round(ev.t, 9), ev.kind, ev.fields)).encode())
        return h.hexdigest()

    def events(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.trace if e.kind == kind]

    # ------------------------------------------------------------------
    # fault injection

    def apply_script(self, script: list[FaultEvent]) -> None:
        for ev in script:
            self.schedule(ev.t - self.t, self.inject, ev)

    def inject(self, ev: FaultEvent) -> None:
        if isinstance(ev, Crash):
            self._crash(ev.server)
        elif isinstance(ev, Restart):
            self._restart(ev.server)
        elif isinstance(ev, Partition):
            self._partition = ev.sets
            self.record("partition", sets=tuple(tuple(sorted(s)) for s in ev.sets))
        elif isinstance(ev, Heal):
            self._partition = None
            self.record("heal")
            for server in self.servers.values():
                if server.alive and hasattr(server.node, "on_heal_hint"):
                    server.node.on_heal_hint()
        elif isinstance(ev, DropNext):
            key = (ev.src, ev.dst, ev.kind)
            self._drop_rules[key] = self._drop_rules.get(key, 0) + ev.count
            self.record("drop_rule", src=ev.src, dst=ev.dst, count=ev.count)
        else:
            raise TypeError(f"unknown fault event {ev!r}")

    def _crash(self, sid: int) -> None:
        server = self.servers[sid]
        if not server.alive:
            return
        server.alive = False
        self.record("crash", server=sid)
        for conn in list(server.conns.values()):
            if conn.open:
                conn.open = False
                self._deliver_to_client(conn.client, "closed", conn.client_cid)
        server.conns.clear()
        for other in self.servers.values():
            if other.sid != sid and other.alive and hasattr(other.node, "on_peer_down"):
                peer = other
                self._pipe_schedule(("peer", sid, peer.sid), lambda p=peer, s=sid: (
                    p.alive and p.node.on_peer_down(s)
                ))

    def _restart(self, sid: int) -> None:
        server = self.servers[sid]
        if server.alive:
            return
        server.gen += 1
        server.alive = True
        server.accepting = True
        server.conns.clear()
        env = _ServerEnv(self, server)
        server.env = env
        server.node = self._node_factories[sid](env)
        self.record("restart", server=sid)
        if hasattr(server.node, "on_started"):
            server.node.on_started()

    def _cut(self, a: int, b: int) -> bool:
        if self._partition is None:
            return False
        for group in self._partition:
            if a in group and b in group:
                return False
        return True

    # ------------------------------------------------------------------
    # transmission

    def _pipe_schedule(self, pipe: tuple, fn: Callable) -> None:
        """FIFO-preserving delayed delivery on a directed pipe."""
        delay = self.link_rng.uniform(*self.config.link_delay)
        at = max(self.t + delay, self._pipe_clock.get(pipe, 0.0) + TINY)
        self._pipe_clock[pipe] = at
        self.schedule(at - self.t, fn)

    def _server_to_server(self, src: int, dst: int, data: bytes) -> None:
        if dst not in self.servers:
            return
        if self._cut(src, dst):
            return
        frame_kind = data[4] if len(data) >= 5 else None
        for key in ((src, dst, None), (src, dst, frame_kind)):
            left = self._drop_rules.get(key, 0)
            if left > 0:
                self._drop_rules[key] = left - 1
                self.record("dropped_frame", src=src, dst=dst, frame_kind=frame_kind)
                return
        dst_server = self.servers[dst]
        if not dst_server.alive:
            return
        gen = dst_server.gen

        def deliver():
            if dst_server.alive and dst_server.gen == gen:
                dst_server.node.on_peer_bytes(src, data)

        self._pipe_schedule(("peer", src, dst), deliver)

    def _client_connect(self, client: SimClient, cid: int, address: str) -> None:
        sid = int(address.lstrip("s"))

        def attempt():
            server = self.servers.get(sid)
            if server is None or not server.alive or not server.accepting:
                self._deliver_to_client(client, "connect_failed", cid)
                return
            conn_id = server.next_conn_id
            server.next_conn_id += 1
            conn = _SimConn(client, cid, sid, conn_id)
            server.conns[conn_id] = conn
            client.conns[cid] = conn
            server.node.on_client_connect(conn_id, client.name)
            self._deliver_to_client(client, "connected", cid)

        self._pipe_schedule(("dial", client.name, sid), attempt)

    def _client_to_server(self, client: SimClient, cid: int, data: bytes) -> None:
        conn = client.conns.get(cid)
        if conn is None or not conn.open:
            return
        server = self.servers[conn.server_sid]
        gen = server.gen

        def deliver():
            if server.alive and server.gen == gen and conn.open:
                server.node.on_client_bytes(conn.server_conn_id, data)

        self._pipe_schedule(("c2s", client.name, cid), deliver)

    def _server_to_client(self, server: _SimServer, conn_id: int, data: bytes) -> None:
        conn = server.conns.get(conn_id)
        if conn is None or not conn.open:
            return
        client = conn.client
        if (
            self.config.chunk_split_prob > 0
            and len(data) > 1
            and self.link_rng.random() < self.config.chunk_split_prob
        ):
            cut = self.link_rng.randrange(1, len(data))
            parts = [data[:cut], data[cut:]]
        else:
            parts = [data]
        for part in parts:
            self._pipe_schedule(
                ("s2c", server.sid, conn.client_cid, client.name),
                lambda p=part: conn.open and client.on_bytes(conn.client_cid, p),
            )

    def _server_close_conn(self, server: _SimServer, conn_id: int) -> None:
        conn = server.conns.pop(conn_id, None)
        if conn is None or not conn.open:
            return
        conn.open = False
        self._deliver_to_client(conn.client, "closed", conn.client_cid)

    def _client_close(self, client: SimClient, cid: int) -> None:
        conn = client.conns.pop(cid, None)
        if conn is None or not conn.open:
            return
        conn.open = False
        server = self.servers[conn.server_sid]
        gen = server.gen

        def deliver():
            if server.alive and server.gen == gen:
                server.conns.pop(conn.server_conn_id, None)
                server.node.on_client_close(conn.server_conn_id)

        self._pipe_schedule(("c2s", client.name, cid), deliver)

    def _deliver_to_client(self, client: SimClient, what: str, cid: int) -> None:
        def deliver():
            conn = client.conns.get(cid)
            if what == "connected":
                client.on_connected(cid)
            elif what == "connect_failed":
                client.conns.pop(cid, None)
                client.on_connect_failed(cid)
            else:
                if conn is not None:
                    conn.open = False
                client.conns.pop(cid, None)
                client.on_closed(cid)

        self._pipe_schedule(("s2c-ctl", client.name, cid), deliver)
