"""Client SDK core: server selection, reconnection, recovery and publishing.

The core is sans-I/O and single-threaded: a driver environment supplies
connect/send/close primitives, timers, a clock and an RNG, and the core
reacts to connection events and decoded frames.  The same core runs under
the simulation harness and under the asyncio socket driver.

Delivery contract towards the application: per topic, callbacks see strictly
increasing ordering keys with republication duplicates filtered by a bounded
ring of recently seen message ids.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import OrderKey, ZERO_KEY
from .wire import (
    Close,
    Connack,
    Connect,
    DecodeBuffer,
    Frame,
    MalformedFrame,
    Notify,
    Ping,
    Pong,
    Puback,
    Publish,
    Pubnack,
    RecoverEnd,
    Suback,
    Subscribe,
    encode_frame,
)

log = logging.getLogger(__name__)


class AllServersBlacklisted(Exception):
    pass


@dataclass(frozen=True)
class ServerEntry:
    address: str
    weight: float = 1.0


def make_server_list(entries: list[tuple[str, float]] | list[str]) -> list[ServerEntry]:
    out = []
    for e in entries:
        if isinstance(e, str):
            out.append(ServerEntry(e, 1.0))
        else:
            out.append(ServerEntry(e[0], float(e[1])))
    if not out:
        raise ValueError("server list is empty")
    if any(s.weight <= 0 for s in out):
        raise ValueError("server weights must be positive")
    return out


def pick_server(servers: list[ServerEntry], blacklist: dict[str, float],
                rng, now: float) -> str:
    """Weighted random choice among servers not currently blacklisted.

    Raises AllServersBlacklisted when nothing is eligible; the caller should
    wait for the earliest blacklist expiry and retry.
    """
    for addr in [a for a, expiry in blacklist.items() if now >= expiry]:
        del blacklist[addr]
    eligible = [s for s in servers if s.address not in blacklist]
    if not eligible:
        raise AllServersBlacklisted()
    total = sum(s.weight for s in eligible)
    x = rng.random() * total
    for s in eligible:
        x -= s.weight
        if x < 0:
            return s.address
    return eligible[-1].address


@dataclass(frozen=True)
class ReconnectPolicy:
    """Wait strategy between reconnection attempts.

    mode "backoff": nominal delay doubles from `base` and is truncated at
    `cap`.  mode "random": nominal delay is uniform in [min_wait, max_wait].
    With jitter on, the actual delay is uniform in [0.5, 1.5] x nominal.
    """

    mode: str = "backoff"
    base: float = 0.1
    cap: float = 3.2
    min_wait: float = 0.1
    max_wait: float = 2.0
    jitter: bool = True

    def nominal(self, attempt: int, rng) -> float:
        if self.mode == "random":
            return rng.uniform(self.min_wait, self.max_wait)
        return min(self.base * (2 ** max(attempt - 1, 0)), self.cap)

    def delay(self, attempt: int, rng) -> float:
        nominal = self.nominal(attempt, rng)
        if self.jitter:
            return nominal * rng.uniform(0.5, 1.5)
        return nominal


class DedupeBuffer:
    """Exact-membership ring of the last `capacity` message ids."""

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self._ring: deque[bytes] = deque()
        self._seen: set[bytes] = set()

    def seen(self, msg_id: bytes) -> bool:
        return msg_id in self._seen

    def add(self, msg_id: bytes) -> None:
        if msg_id in self._seen:
            return
        self._ring.append(msg_id)
        self._seen.add(msg_id)
        if len(self._ring) > self.capacity:
            self._seen.discard(self._ring.popleft())


@dataclass
class ClientConfig:
    servers: list[ServerEntry] = field(default_factory=list)
    policy: ReconnectPolicy = field(default_factory=ReconnectPolicy)
    blacklist_ttl: float = 30.0
    dedupe_window: int = 1024
    ping_interval: float = 5.0
    max_missed_pongs: int = 2
    publish_attempts: int = 10
    publish_retry_delay: float = 0.25
    ack_timeout: float = 2.5


@dataclass
class _PendingPublish:
    topic: str
    payload: bytes
    attempts_left: int
    cb: Optional[Callable[[str], None]]
    timer: object = None


IDLE, CONNECTING, READY, WAITING, STOPPED = range(5)


class ClientCore:
    """Single connection to the cluster with automatic failover.

    Application callbacks (never invoked concurrently):
      on_message(topic, key, payload, msg_id)
      on_status(kind, detail) for "connected", "disconnected", "truncated", ...
    """

    def __init__(self, env, config: ClientConfig,
                 on_message=None, on_status=None):
        self.env = env
        self.config = config
        self.on_message = on_message or (lambda *a: None)
        self.on_status = on_status or (lambda *a: None)
        self.resume: dict[str, OrderKey] = {}
        self.dedupe = DedupeBuffer(config.dedupe_window)
        self.blacklist: dict[str, float] = {}
        self.pending: dict[bytes, _PendingPublish] = {}
        self.topics: dict[str, None] = {}
        self.state = IDLE
        self.server: Optional[str] = None
        self.attempt = 0
        self.diag = {"suppressed_duplicates": 0, "suppressed_stale": 0,
                     "reconnects": 0}
        self._cid: Optional[int] = None
        self._decode = DecodeBuffer()
        self._conn_gen = 0
        self._awaiting_pongs = 0
        env.on_connected = self._on_connected
        env.on_connect_failed = self._on_conn_failed
        env.on_bytes = self._on_bytes
        env.on_closed = self._on_closed

    # ------------------------------------------------------------------
    # public surface

    def start(self) -> None:
        if self.state in (IDLE, STOPPED):
            self.state = CONNECTING
            self._dial()

    def stop(self) -> None:
        self.state = STOPPED
        if self._cid is not None:
            self.env.send(self._cid, encode_frame(Close(reason=0)))
            self.env.close(self._cid)
            self._cid = None

    def subscribe(self, topic: str) -> None:
        self.topics[topic] = None
        if self.state == READY:
            self._send(Subscribe(topic=topic, resume=self.resume.get(topic, ZERO_KEY)))

    def publish(self, topic: str, payload: bytes, require_ack: bool = True,
                cb: Optional[Callable[[str], None]] = None) -> bytes:
        """Returns the message id.  With require_ack the publication is
        retransmitted under the same id until acknowledged or the attempt
        budget runs out; cb receives "acked" or "failed"."""
        msg_id = self.env.rng.getrandbits(128).to_bytes(16, "big")
        if not require_ack:
            if self.state == READY:
                self._send(Publish(topic=topic, msg_id=msg_id, payload=payload,
                                   ack_requested=False))
            if cb is not None:
                cb("sent")
            return msg_id
        self.pending[msg_id] = _PendingPublish(
            topic, payload, self.config.publish_attempts, cb
        )
        self._transmit_publish(msg_id)
        return msg_id

    def connected(self) -> bool:
        return self.state == READY

    # ------------------------------------------------------------------
    # connection management

    def _dial(self) -> None:
        if self.state == STOPPED:
            return
        try:
            address = pick_server(self.config.servers, self.blacklist,
                                  self.env.rng, self.env.now())
        except AllServersBlacklisted:
            wake = min(self.blacklist.values()) - self.env.now()
            self.env.call_later(max(wake, 0.01), self._dial)
            return
        self.state = CONNECTING
        self.server = address
        self._conn_gen += 1
        self._decode = DecodeBuffer()
        self._awaiting_pongs = 0
        self._cid = self.env.connect(address)

    def _on_connected(self, cid: int) -> None:
        if cid != self._cid or self.state == STOPPED:
            return
        self.env.send(cid, encode_frame(Connect()))

    def _on_conn_failed(self, cid: int) -> None:
        if cid != self._cid or self.state == STOPPED:
            return
        self._cid = None
        self._retry_later()

    def _on_closed(self, cid: int) -> None:
        if cid != self._cid or self.state == STOPPED:
            return
        self._cid = None
        if self.state == READY:
            self.on_status("disconnected", self.server)
        self._retry_later()

    def _retry_later(self) -> None:
        """Blacklist the failed server and wait out the reconnect policy."""
        if self.server is not None:
            self.blacklist[self.server] = self.env.now() + self.config.blacklist_ttl
        self.state = WAITING
        self.attempt += 1
        self.diag["reconnects"] += 1
        self.env.call_later(self.config.policy.delay(self.attempt, self.env.rng),
                            self._dial)

    def _drop_connection(self) -> None:
        if self._cid is not None:
            cid, self._cid = self._cid, None
            self.env.close(cid)
        self._retry_later()

    # ------------------------------------------------------------------
    # frames

    def _on_bytes(self, cid: int, data: bytes) -> None:
        if cid != self._cid or self.state == STOPPED:
            return
        try:
            frames = self._decode.feed(data)
        except MalformedFrame:
            self._drop_connection()
            return
        for f in frames:
            self._on_frame(f)

    def _on_frame(self, f: Frame) -> None:
        if isinstance(f, Notify):
            self._on_notify(f)
        elif isinstance(f, Connack):
            self._on_ready()
        elif isinstance(f, Suback):
            self.on_status("subscribed", f.topic)
        elif isinstance(f, Puback):
            self._on_puback(f.msg_id)
        elif isinstance(f, Pubnack):
            self._on_pubnack(f)
        elif isinstance(f, Pong):
            self._awaiting_pongs = 0
        elif isinstance(f, Ping):
            self._send(Pong())
        elif isinstance(f, RecoverEnd):
            if f.truncated:
                self.on_status("truncated", f.topic)
        elif isinstance(f, Close):
            if self._cid is not None:
                self.env.close(self._cid)
                self._cid = None
            self.on_status("disconnected", self.server)
            self._retry_later()

    def _on_ready(self) -> None:
        self.state = READY
        self.attempt = 0
        self.on_status("connected", self.server)
        self.env.trace("connected", server=self.server)
        for topic in self.topics:
            self._send(Subscribe(topic=topic, resume=self.resume.get(topic, ZERO_KEY)))
        for msg_id in list(self.pending):
            self._transmit_publish(msg_id)
        self._arm_ping(self._conn_gen)

    def _on_notify(self, f: Notify) -> None:
        if self.dedupe.seen(f.msg_id):
            self.diag["suppressed_duplicates"] += 1
            return
        last = self.resume.get(f.topic, ZERO_KEY)
        if f.key <= last:
            self.diag["suppressed_stale"] += 1
            return
        self.resume[f.topic] = f.key
        self.dedupe.add(f.msg_id)
        self.env.trace("deliver", topic=f.topic, epoch=f.key.epoch,
                       seq=f.key.seq, msg_id=f.msg_id.hex())
        self.on_message(f.topic, f.key, f.payload, f.msg_id)

    # ------------------------------------------------------------------
    # publishing

    def _transmit_publish(self, msg_id: bytes) -> None:
        pending = self.pending.get(msg_id)
        if pending is None:
            return
        if pending.timer is not None:
            pending.timer.cancel()
        if self.state == READY:
            self._send(Publish(topic=pending.topic, msg_id=msg_id,
                               payload=pending.payload, ack_requested=True))
        pending.timer = self.env.call_later(self.config.ack_timeout,
                                            self._publish_timed_out, msg_id)

    def _publish_timed_out(self, msg_id: bytes) -> None:
        # the ack wait already consumed ack_timeout; retry almost at once
        self._publish_attempt_failed(msg_id, 0.05 * self.env.rng.uniform(0.5, 1.5))

    def _on_pubnack(self, f: Pubnack) -> None:
        pending = self.pending.get(f.msg_id)
        if pending is None:
            return
        if pending.timer is not None:
            pending.timer.cancel()
            pending.timer = None
        delay = self.config.publish_retry_delay * self.env.rng.uniform(0.5, 1.5)
        self._publish_attempt_failed(f.msg_id, delay)

    def _publish_attempt_failed(self, msg_id: bytes, retry_delay: float) -> None:
        pending = self.pending.get(msg_id)
        if pending is None:
            return
        pending.attempts_left -= 1
        if pending.attempts_left <= 0:
            self.pending.pop(msg_id, None)
            self.env.trace("pub_failed", msg_id=msg_id.hex())
            if pending.cb is not None:
                pending.cb("failed")
            return
        pending.timer = self.env.call_later(retry_delay, self._transmit_publish, msg_id)

    def _on_puback(self, msg_id: bytes) -> None:
        pending = self.pending.pop(msg_id, None)
        if pending is None:
            return
        if pending.timer is not None:
            pending.timer.cancel()
        self.env.trace("pub_acked", msg_id=msg_id.hex())
        if pending.cb is not None:
            pending.cb("acked")

    # ------------------------------------------------------------------
    # liveness

    def _arm_ping(self, gen: int) -> None:
        self.env.call_later(self.config.ping_interval, self._ping_tick, gen)

    def _ping_tick(self, gen: int) -> None:
        if gen != self._conn_gen or self.state != READY:
            return
        if self._awaiting_pongs >= self.config.max_missed_pongs:
            self.on_status("ping_timeout", self.server)
            self._drop_connection()
            return
        self._awaiting_pongs += 1
        self._send(Ping())
        self._arm_ping(gen)

    def _send(self, frame: Frame) -> None:
        if self._cid is not None:
            self.env.send(self._cid, encode_frame(frame))
