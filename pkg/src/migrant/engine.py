"""Single-node broker runtime: sharded I/O and worker layers, the
group-sharded topic cache, local fan-out, batching and conflation.

The engine is sans-I/O: it consumes decoded byte events and emits writes,
closes and timers through an injected environment, so the same code runs
under the deterministic simulation scheduler and under the asyncio socket
runtime.  Each connection is pinned to one IoShard and one WorkerShard for
its whole lifetime (by hashing its address); cross-shard hand-off goes
through per-shard FIFO queues drained by deferred pump calls, which keeps
per-connection ordering while letting a driver execute shards concurrently.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .config import ServerConfig
from .core import Message, OrderKey, ZERO_KEY, client_shard, topic_group, validate_topic
from .wire import (
    CLOSE_CONNECTION_LIMIT,
    CLOSE_PROTOCOL_VIOLATION,
    CLOSE_SLOW_CONSUMER,
    Close,
    Connack,
    Connect,
    DecodeBuffer,
    Frame,
    MalformedFrame,
    Notify,
    Ping,
    Pong,
    Publish,
    Recover,
    RecoverEnd,
    Suback,
    Subscribe,
    encode_frame,
)

log = logging.getLogger(__name__)


class ConnectionLimitReached(Exception):
    pass


class InstrumentedLock:
    """Mutex that counts acquisitions and contended acquisitions."""

    __slots__ = ("_lock", "acquisitions", "contended")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.acquisitions = 0
        self.contended = 0

    def __enter__(self):
        if not self._lock.acquire(blocking=False):
            self.contended += 1
            self._lock.acquire()
        self.acquisitions += 1
        return self

    def __exit__(self, *exc):
        self._lock.release()


class _TopicHistory:
    __slots__ = ("entries", "last_evicted")

    def __init__(self) -> None:
        self.entries: deque[Message] = deque()
        self.last_evicted: Optional[OrderKey] = None


class TopicCache:
    """Per-topic message history, sharded into independently locked groups.

    Within a topic, keys are strictly increasing and eviction is strictly
    oldest-first with at most `depth` retained messages.
    """

    def __init__(self, num_groups: int, depth: int) -> None:
        self.num_groups = num_groups
        self.depth = depth
        self._groups: list[dict[str, _TopicHistory]] = [{} for _ in range(num_groups)]
        self.locks = [InstrumentedLock() for _ in range(num_groups)]
        self.out_of_order_drops = 0

    def _history(self, topic: str, create: bool) -> Optional[_TopicHistory]:
        group = self._groups[topic_group(topic, self.num_groups)]
        hist = group.get(topic)
        if hist is None and create:
            hist = group[topic] = _TopicHistory()
        return hist

    def append(self, m: Message) -> bool:
        """Append in key order; returns False (drop) on out-of-order keys."""
        gid = topic_group(m.topic, self.num_groups)
        with self.locks[gid]:
            hist = self._history(m.topic, create=True)
            if hist.entries and m.key <= hist.entries[-1].key:
                self.out_of_order_drops += 1
                log.debug("out-of-order append dropped: %s %s", m.topic, m.key)
                return False
            hist.entries.append(m)
            if len(hist.entries) > self.depth:
                evicted = hist.entries.popleft()
                hist.last_evicted = evicted.key
            return True

    def read_after(self, topic: str, after: OrderKey) -> tuple[list[Message], bool]:
        """All cached messages with key > after, plus a gap flag.

        truncated is True iff messages newer than `after` were evicted, i.e.
        the predecessor of the oldest retained key is still > after.
        """
        gid = topic_group(topic, self.num_groups)
        with self.locks[gid]:
            hist = self._history(topic, create=False)
            if hist is None:
                return [], False
            msgs = [m for m in hist.entries if m.key > after]
            truncated = hist.last_evicted is not None and hist.last_evicted > after
            return msgs, truncated

    def last_key(self, topic: str) -> Optional[OrderKey]:
        gid = topic_group(topic, self.num_groups)
        with self.locks[gid]:
            hist = self._history(topic, create=False)
            if hist is None or not hist.entries:
                return None
            return hist.entries[-1].key

    def topics_in_group(self, gid: int) -> list[str]:
        with self.locks[gid]:
            return list(self._groups[gid])

    def known_keys(self, gid: int) -> list[tuple[str, OrderKey]]:
        """Last held key per topic of a group (ZERO_KEY for empty histories)."""
        with self.locks[gid]:
            out = []
            for topic, hist in self._groups[gid].items():
                out.append((topic, hist.entries[-1].key if hist.entries else ZERO_KEY))
            return out

    def note_gap_before(self, topic: str, first_available: OrderKey) -> None:
        """Record that history older than first_available was lost upstream
        (a peer's cache was already truncated when we reconciled)."""
        if first_available.seq > 1:
            marker = OrderKey(first_available.epoch, first_available.seq - 1)
        else:
            marker = OrderKey(first_available.epoch - 1, (1 << 63) - 1)
        gid = topic_group(topic, self.num_groups)
        with self.locks[gid]:
            hist = self._history(topic, create=True)
            if hist.last_evicted is None or marker > hist.last_evicted:
                hist.last_evicted = marker

    def contains(self, topic: str, msg_id: bytes) -> bool:
        gid = topic_group(topic, self.num_groups)
        with self.locks[gid]:
            hist = self._history(topic, create=False)
            if hist is None:
                return False
            return any(m.publisher_msg_id == msg_id for m in hist.entries)

    def dump(self) -> dict[str, list[Message]]:
        out: dict[str, list[Message]] = {}
        for gid, group in enumerate(self._groups):
            with self.locks[gid]:
                for topic, hist in group.items():
                    out[topic] = list(hist.entries)
        return out


@dataclass(frozen=True)
class BatchPolicy:
    """Coalesce outbound frames into one write, bounded by delay and size."""

    max_delay: float
    max_bytes: int

    @property
    def enabled(self) -> bool:
        return self.max_delay > 0


def keep_latest(pending: list[Message]) -> Message:
    return max(pending, key=lambda m: m.key)


@dataclass(frozen=True)
class ConflationPolicy:
    """At most one notification per topic per window per client."""

    window: float
    aggregator: Callable[[list[Message]], Message] = keep_latest

    @property
    def enabled(self) -> bool:
        return self.window > 0


def conflate_flush(topic: str, pending: list[Message]) -> Message:
    """Reduce a window's pending messages for one topic (keep-latest)."""
    if not pending:
        raise ValueError("conflate_flush on empty window")
    return keep_latest(pending)


class _Conn:
    __slots__ = (
        "conn_id", "address", "io_shard", "worker_shard", "ready", "decode",
        "subs", "batch_buf", "batch_timer", "conflate_pending", "conflate_timers",
        "closing",
    )

    def __init__(self, conn_id: int, address: str, io_shard: int, worker_shard: int):
        self.conn_id = conn_id
        self.address = address
        self.io_shard = io_shard
        self.worker_shard = worker_shard
        self.ready = False  # CONNECT handshake completed
        self.decode = DecodeBuffer()
        self.subs: dict[str, OrderKey] = {}  # topic -> last key sent
        self.batch_buf = bytearray()
        self.batch_timer = None
        self.conflate_pending: dict[str, list[Message]] = {}
        self.conflate_timers: dict[str, object] = {}
        self.closing = False


class WorkerShard:
    """Owns the subscription index and message processing for its clients."""

    __slots__ = ("index", "inbox", "pump_scheduled", "subscriptions")

    def __init__(self) -> None:
        # topic -> ordered set of conn ids (dict used as ordered set)
        self.subscriptions: dict[str, dict[int, None]] = {}
        self.inbox: deque = deque()
        self.pump_scheduled = False


class IoShard:
    __slots__ = ("conns",)

    def __init__(self) -> None:
        self.conns: dict[int, None] = {}


class Engine:
    """Wires connections, shards, cache and outbound policy together.

    `publish_sink(conn_id, frame)` receives client publications for the
    replication layer; `on_client_gone(conn_id)` (optional) is told about
    every disconnect the engine initiates or observes.
    """

    def __init__(
        self,
        config: ServerConfig,
        env,
        publish_sink: Callable[[int, Publish], None],
        on_client_gone: Optional[Callable[[int], None]] = None,
    ) -> None:
        self.config = config
        self.env = env
        self.publish_sink = publish_sink
        self.on_client_gone = on_client_gone
        self.n_io = config.resolved_io_threads()
        self.n_workers = config.resolved_workers()
        self.cache = TopicCache(config.num_groups, config.cache_depth)
        self.io_shards = [IoShard() for _ in range(self.n_io)]
        self.workers = [WorkerShard() for _ in range(self.n_workers)]
        self.batch = BatchPolicy(config.batch_max_delay, config.batch_max_bytes)
        self.conflation = ConflationPolicy(config.conflation_window)
        self.conns: dict[int, _Conn] = {}
        self.accepting = True
        self.stats = {
            "suppressed_notifies": 0,
            "protocol_violations": 0,
            "slow_consumer_drops": 0,
        }

    # ------------------------------------------------------------------
    # connection lifecycle

    def accept(self, conn_id: int, address: str) -> _Conn:
        """Pin a new connection to its io/worker shards."""
        if len(self.conns) >= self.config.max_connections:
            raise ConnectionLimitReached()
        conn = _Conn(
            conn_id,
            address,
            client_shard(address, self.n_io),
            client_shard(address, self.n_workers),
        )
        self.conns[conn_id] = conn
        self.io_shards[conn.io_shard].conns[conn_id] = None
        return conn

    def on_bytes(self, conn_id: int, data: bytes) -> None:
        """IoShard inbound path: decode and queue frames for the worker."""
        conn = self.conns.get(conn_id)
        if conn is None or conn.closing:
            return
        try:
            frames = conn.decode.feed(data)
        except MalformedFrame:
            self._violation(conn)
            return
        if not frames:
            return
        worker = self.workers[conn.worker_shard]
        for f in frames:
            worker.inbox.append((conn_id, f))
        self._schedule_pump(conn.worker_shard)

    def on_conn_lost(self, conn_id: int) -> None:
        """Transport-level disconnect observed by the driver."""
        self._cleanup(conn_id)

    def drop(self, conn_id: int, reason: int) -> None:
        """Engine-initiated disconnect: CLOSE frame, then drop state."""
        conn = self.conns.get(conn_id)
        if conn is None or conn.closing:
            return
        conn.closing = True
        self._write_now(conn, encode_frame(Close(reason=reason)))
        self.env.close_client(conn_id)
        self._cleanup(conn_id)

    def close_all_clients(self, reason: int) -> int:
        """Disconnect every client (partition fencing); returns the count."""
        ids = list(self.conns)
        for conn_id in ids:
            self.drop(conn_id, reason)
        return len(ids)

    def connection_count(self) -> int:
        return len(self.conns)

    def _cleanup(self, conn_id: int) -> None:
        conn = self.conns.pop(conn_id, None)
        if conn is None:
            return
        self.io_shards[conn.io_shard].conns.pop(conn_id, None)
        worker = self.workers[conn.worker_shard]
        for topic in conn.subs:
            members = worker.subscriptions.get(topic)
            if members is not None:
                members.pop(conn_id, None)
                if not members:
                    del worker.subscriptions[topic]
        if conn.batch_timer is not None:
            conn.batch_timer.cancel()
        for timer in conn.conflate_timers.values():
            timer.cancel()
        if self.on_client_gone is not None:
            self.on_client_gone(conn_id)

    def _violation(self, conn: _Conn) -> None:
        self.stats["protocol_violations"] += 1
        self.drop(conn.conn_id, CLOSE_PROTOCOL_VIOLATION)

    # ------------------------------------------------------------------
    # worker layer

    def _schedule_pump(self, worker_idx: int) -> None:
        worker = self.workers[worker_idx]
        if worker.pump_scheduled:
            return
        worker.pump_scheduled = True
        self.env.defer(self._pump_worker, worker_idx)

    def _pump_worker(self, worker_idx: int) -> None:
        worker = self.workers[worker_idx]
        worker.pump_scheduled = False
        while worker.inbox:
            item = worker.inbox.popleft()
            if item[0] is None:  # local delivery event
                _, topic, key, msg_id, encoded = item
                self._fan_out(worker, topic, key, msg_id, encoded)
            else:
                conn_id, frame = item
                conn = self.conns.get(conn_id)
                if conn is not None and not conn.closing:
                    self._handle_frame(conn, frame)

    def _handle_frame(self, conn: _Conn, f: Frame) -> None:
        if isinstance(f, Connect):
            if conn.ready:
                self._violation(conn)
                return
            conn.ready = True
            self.send_frame(conn.conn_id, Connack(server_id=self.config.server_id))
            return
        if not conn.ready:
            self._violation(conn)
            return
        if isinstance(f, Ping):
            self.send_frame(conn.conn_id, Pong())
        elif isinstance(f, Subscribe):
            self._subscribe(conn, f)
        elif isinstance(f, Publish):
            try:
                validate_topic(f.topic)
            except ValueError:
                self._violation(conn)
                return
            self.publish_sink(conn.conn_id, f)
        elif isinstance(f, Recover):
            self._replay(conn, f.topic, f.after, send_marker=True)
        elif isinstance(f, Close):
            self.env.close_client(conn.conn_id)
            self._cleanup(conn.conn_id)
        elif isinstance(f, Pong):
            pass  # clients answer our pings; nothing to do server-side
        else:
            self._violation(conn)

    def _subscribe(self, conn: _Conn, f: Subscribe) -> None:
        try:
            validate_topic(f.topic)
        except ValueError:
            self._violation(conn)
            return
        worker = self.workers[conn.worker_shard]
        worker.subscriptions.setdefault(f.topic, {})[conn.conn_id] = None
        if f.topic not in conn.subs:
            conn.subs[f.topic] = f.resume if not f.resume.is_sentinel() else ZERO_KEY
        self.send_frame(conn.conn_id, Suback(topic=f.topic))
        if not f.resume.is_sentinel():
            self._replay(conn, f.topic, f.resume, send_marker=None)

    def _replay(self, conn: _Conn, topic: str, after: OrderKey, send_marker) -> None:
        """Send cached messages with key > after, oldest first.

        For an explicit recovery request (send_marker=True) a RECOVER_END
        always precedes the burst; on subscription resume (send_marker=None)
        it is sent only when the cache horizon passed the requested key.
        """
        msgs, truncated = self.cache.read_after(topic, after)
        if send_marker or truncated:
            self.send_frame(conn.conn_id, RecoverEnd(topic=topic, truncated=truncated))
        last = conn.subs.get(topic, ZERO_KEY)
        for m in msgs:
            if m.key <= last:
                continue
            last = m.key
            self.send_frame(
                conn.conn_id,
                Notify(topic=m.topic, key=m.key, msg_id=m.publisher_msg_id, payload=m.payload),
            )
        if topic in conn.subs and last > conn.subs[topic]:
            conn.subs[topic] = last

    # ------------------------------------------------------------------
    # cache + fan-out (cluster-facing)

    def cache_append(self, m: Message) -> bool:
        return self.cache.append(m)

    def cache_read_after(self, topic: str, after: OrderKey) -> tuple[list[Message], bool]:
        return self.cache.read_after(topic, after)

    def deliver_local(self, topic: str, m: Message) -> None:
        """Queue a cached message for fan-out to local subscribers."""
        encoded = encode_frame(
            Notify(topic=topic, key=m.key, msg_id=m.publisher_msg_id, payload=m.payload)
        )
        for idx, worker in enumerate(self.workers):
            if topic in worker.subscriptions:
                worker.inbox.append((None, topic, m.key, m.publisher_msg_id, encoded))
                self._schedule_pump(idx)

    def _fan_out(self, worker: WorkerShard, topic: str, key: OrderKey,
                 msg_id: bytes, encoded: bytes) -> None:
        members = worker.subscriptions.get(topic)
        if not members:
            return
        payload_msg: Optional[Message] = None  # decoded lazily, conflation only
        for conn_id in list(members):
            conn = self.conns.get(conn_id)
            if conn is None or conn.closing:
                continue
            last = conn.subs.get(topic, ZERO_KEY)
            if key <= last:
                self.stats["suppressed_notifies"] += 1
                continue
            if self.conflation.enabled:
                if payload_msg is None:
                    payload_msg = Message(topic, key, self._payload_of(encoded), msg_id)
                self._conflate(conn, topic, payload_msg)
            else:
                conn.subs[topic] = key
                self._write(conn, encoded)

    @staticmethod
    def _payload_of(encoded_notify: bytes) -> bytes:
        # strip prefix(4) kind(1) topic(2+n) key(16) msg_id(16) payload_len(2)
        topic_len = int.from_bytes(encoded_notify[5:7], "big")
        off = 7 + topic_len + 16 + 16 + 2
        return encoded_notify[off:]

    def _conflate(self, conn: _Conn, topic: str, m: Message) -> None:
        pending = conn.conflate_pending.setdefault(topic, [])
        pending.append(m)
        if topic not in conn.conflate_timers:
            conn.conflate_timers[topic] = self.env.call_later(
                self.conflation.window, self._conflate_fire, conn.conn_id, topic
            )

    def _conflate_fire(self, conn_id: int, topic: str) -> None:
        conn = self.conns.get(conn_id)
        if conn is None or conn.closing:
            return
        conn.conflate_timers.pop(topic, None)
        pending = conn.conflate_pending.pop(topic, None)
        if not pending:
            return
        m = self.conflation.aggregator(pending)
        if m.key <= conn.subs.get(topic, ZERO_KEY):
            return
        conn.subs[topic] = m.key
        self._write(conn, encode_frame(
            Notify(topic=topic, key=m.key, msg_id=m.publisher_msg_id, payload=m.payload)
        ))

    # ------------------------------------------------------------------
    # outbound io layer

    def send_frame(self, conn_id: int, frame: Frame) -> None:
        conn = self.conns.get(conn_id)
        if conn is None or conn.closing:
            return
        self._write(conn, encode_frame(frame))

    def _write(self, conn: _Conn, data: bytes) -> None:
        backlog = self.env.outbound_backlog(conn.conn_id) + len(conn.batch_buf)
        if backlog + len(data) > self.config.max_outbound_bytes:
            self.stats["slow_consumer_drops"] += 1
            self.drop(conn.conn_id, CLOSE_SLOW_CONSUMER)
            return
        if not self.batch.enabled:
            self.env.send_client(conn.conn_id, data)
            return
        conn.batch_buf += data
        if len(conn.batch_buf) >= self.batch.max_bytes:
            self._flush_batch(conn.conn_id)
        elif conn.batch_timer is None:
            conn.batch_timer = self.env.call_later(
                self.batch.max_delay, self._flush_batch, conn.conn_id
            )

    def _flush_batch(self, conn_id: int) -> None:
        conn = self.conns.get(conn_id)
        if conn is None:
            return
        if conn.batch_timer is not None:
            conn.batch_timer.cancel()
            conn.batch_timer = None
        if conn.batch_buf:
            self.env.send_client(conn_id, bytes(conn.batch_buf))
            conn.batch_buf.clear()

    def _write_now(self, conn: _Conn, data: bytes) -> None:
        # bypass batching (used for CLOSE so it is not stuck behind a timer)
        if conn.batch_buf:
            self._flush_batch(conn.conn_id)
        self.env.send_client(conn.conn_id, data)
