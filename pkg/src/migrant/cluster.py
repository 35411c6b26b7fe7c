"""Cluster replication: per-group coordinator election, gossip-map caching,
sequence assignment, broadcast with two-copy acknowledgment, cache
reconciliation, and partition self-fencing.

The flow for a publication received from a local client:

* contact is the coordinator of the topic's group: assign (epoch, seq),
  append + fan out locally, broadcast to all peers, acknowledge the
  publisher as soon as one peer confirms (the message then sits in at
  least two caches);
* the gossip map names a coordinator: forward the publication there and
  acknowledge when the coordinator's broadcast arrives back here;
* no coordinator known: forward to a uniformly random other server, which
  runs for the coordinator role, so a contact point serving a busy
  publisher does not accumulate every coordination duty.

Correctness never depends on the gossip map; a stale entry costs a negative
acknowledgment and a publisher retry.  Gap detection on the replication
stream, coordinator-failure watches, link heals and restarts all funnel into
one reconciliation routine that pulls missing history from the peers' caches
before newer messages are applied.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .config import ServerConfig
from .core import Message, OrderKey, ZERO_KEY, topic_group
from .coordkv import CasResult, CreateResult, KvReplica
from .engine import ConnectionLimitReached, Engine
from .wire import (
    CLOSE_CONNECTION_LIMIT,
    CLOSE_FENCED,
    Close,
    CoordGossip,
    DecodeBuffer,
    Frame,
    KvReq,
    KvRsp,
    MalformedFrame,
    NACK_ELECTION_FAILED,
    NACK_NOT_COORDINATOR,
    NACK_TIMEOUT,
    NACK_UNAVAILABLE,
    Ping,
    Pong,
    Puback,
    Publish,
    Pubnack,
    ReconcileReq,
    ReconcileRsp,
    ReplAck,
    Replicate,
    encode_frame,
)

log = logging.getLogger(__name__)

_OWNER = struct.Struct(">IQQ")  # server, epoch, session
RECONCILE_CHUNK = 200
MAX_SEQ = (1 << 63) - 1


def _owner_value(server: int, epoch: int, session: int) -> bytes:
    return _OWNER.pack(server, epoch, session)


def _parse_owner(value: bytes) -> tuple[int, int, int]:
    return _OWNER.unpack(value)


@dataclass
class _Lease:
    """Local record of an owned group."""

    epoch: int
    session: int
    ready: bool = False  # becomes True once takeover reconciliation finished
    seqs: dict[str, int] = field(default_factory=dict)
    queue: list = field(default_factory=list)  # publications awaiting readiness


@dataclass
class _PendingPub:
    """A publication this server fronted for a local publisher."""

    conn_id: int
    topic: str
    payload: bytes
    msg_id: bytes
    ack_requested: bool
    timer: object
    acked: bool = False


@dataclass
class _ReplState:
    """Coordinator-side bookkeeping for one broadcast message."""

    message: Message
    group: int
    unacked: set[int]
    contact_conn: Optional[int]  # local publisher awaiting PUBACK, if any
    msg_id: bytes
    born: float
    timer: object = None


class _ReconcileRun:
    def __init__(self, group: int, waiting: set[int]):
        self.group = group
        self.waiting = waiting
        self.pool: dict[str, dict[OrderKey, tuple[bytes, bytes]]] = {}
        self.truncated: set[str] = set()
        self.held: list[tuple[int, Replicate]] = []
        self.timer = None


class Cluster:
    def __init__(self, node: "ServerNode", config: ServerConfig, env,
                 engine: Engine, kv: KvReplica):
        self.node = node
        self.config = config
        self.env = env
        self.engine = engine
        self.kv = kv
        self.me = config.server_id
        self.peer_ids = sorted(config.peers)
        self.single = not self.peer_ids
        self.gossip: dict[int, tuple[int, float]] = {}  # group -> (server, learned at)
        self.owned: dict[int, _Lease] = {}
        self.pending: dict[bytes, _PendingPub] = {}
        self.repl: dict[tuple[str, OrderKey], _ReplState] = {}
        self.reconciles: dict[int, _ReconcileRun] = {}
        self.settled_epoch: dict[int, int] = {}
        self.elections: dict[int, list[Callable]] = {}
        self.watched: set[int] = set()
        self.session_id: Optional[int] = None
        self.fenced = False
        self._hb_armed = False
        self._session_pending = False
        now = env.now()
        self.peer_heard: dict[int, float] = {p: now for p in self.peer_ids}
        if not self.single:
            self._ensure_session()
            self.env.call_later(self.config.peer_ping_interval, self._ping_tick)
            self.env.call_later(self.config.peer_ping_interval, self._fence_tick)

    # ------------------------------------------------------------------
    # session management

    def _ensure_session(self) -> None:
        if self.session_id is not None and self.kv.session_live(self.session_id):
            self._arm_heartbeat()
            return
        if self._session_pending:
            return
        self._session_pending = True
        sid = self.env.rng.getrandbits(63) or 1

        def created(result):
            self._session_pending = False
            if result is None:
                self.env.call_later(0.5, self._ensure_session)
                return
            self.session_id = sid
            self.env.trace("session", session=sid)
            self._arm_heartbeat()

        self.kv.create_session(sid, self.config.session_timeout, created)

    def _arm_heartbeat(self) -> None:
        if self._hb_armed:
            return
        self._hb_armed = True
        self.env.call_later(self.config.session_heartbeat, self._heartbeat_tick)

    def _heartbeat_tick(self) -> None:
        self._hb_armed = False
        if self.session_id is None:
            return
        if not self.kv.session_live(self.session_id):
            # expired under us (e.g. during a partition): all leases are void
            self.env.trace("session_lost", session=self.session_id)
            self.session_id = None
            self.owned.clear()
            self._ensure_session()
            return
        self.kv.heartbeat(self.session_id)
        self._arm_heartbeat()

    # ------------------------------------------------------------------
    # publish entry points

    def handle_publish(self, conn_id: int, f: Publish) -> None:
        if self.single:
            self._assign_single(conn_id, f)
            return
        if self.fenced:
            self._nack_local(conn_id, f.msg_id, NACK_UNAVAILABLE)
            return
        group = topic_group(f.topic, self.config.num_groups)
        lease = self.owned.get(group)
        if lease is not None:
            self._publish_as_owner(group, lease, f, contact_conn=conn_id)
            return
        entry = self.gossip.get(group)
        timer = self.env.call_later(self.config.publish_timeout,
                                    self._pending_expired, f.msg_id, group)
        old = self.pending.pop(f.msg_id, None)
        if old is not None and old.timer is not None:
            old.timer.cancel()
        self.pending[f.msg_id] = _PendingPub(
            conn_id, f.topic, f.payload, f.msg_id, f.ack_requested, timer
        )
        if entry is not None:
            self._send_peer(entry[0], f)
        else:
            target = self._random_peer()
            self._send_peer(target, f)

    def on_peer_publish(self, src: int, f: Publish) -> None:
        """A peer forwarded a publication for us to sequence."""
        group = topic_group(f.topic, self.config.num_groups)
        lease = self.owned.get(group)
        if lease is not None:
            self._publish_as_owner(group, lease, f, contact_conn=None)
            return
        if self.fenced or self.session_id is None:
            self._send_peer(src, Pubnack(f.msg_id, NACK_ELECTION_FAILED))
            return

        def elected(outcome):
            if outcome[0] == "won":
                lease = self.owned.get(group)
                if lease is not None:
                    self._publish_as_owner(group, lease, f, contact_conn=None)
                    return
                outcome = ("unavailable",)
            if outcome[0] == "lost":
                owner = outcome[1]
                self._send_peer(src, Pubnack(f.msg_id, NACK_NOT_COORDINATOR,
                                             owner_hint=owner + 1))
            else:
                self._send_peer(src, Pubnack(f.msg_id, NACK_ELECTION_FAILED))

        self.run_for_coordinator(group, elected)

    def on_peer_pubnack(self, src: int, f: Pubnack) -> None:
        pending = self.pending.pop(f.msg_id, None)
        if pending is None:
            return
        if pending.timer is not None:
            pending.timer.cancel()
        group = topic_group(pending.topic, self.config.num_groups)
        if f.owner_hint:
            self.gossip[group] = (f.owner_hint - 1, self.env.now())
            self._watch_group(group)
        else:
            self.gossip.pop(group, None)
        self._nack_local(pending.conn_id, f.msg_id, f.reason)

    def _pending_expired(self, msg_id: bytes, group: int) -> None:
        pending = self.pending.pop(msg_id, None)
        if pending is None:
            return
        self.gossip.pop(group, None)  # whatever we believed, it did not answer
        self._nack_local(pending.conn_id, msg_id, NACK_TIMEOUT)

    def _nack_local(self, conn_id: int, msg_id: bytes, reason: int) -> None:
        self.engine.send_frame(conn_id, Pubnack(msg_id, reason))

    def on_client_gone(self, conn_id: int) -> None:
        dead = [mid for mid, p in self.pending.items() if p.conn_id == conn_id]
        for mid in dead:
            pending = self.pending.pop(mid)
            if pending.timer is not None:
                pending.timer.cancel()

    def _random_peer(self) -> int:
        return self.peer_ids[self.env.rng.randrange(len(self.peer_ids))]

    # ------------------------------------------------------------------
    # sequencing and broadcast (coordinator side)

    def _assign_single(self, conn_id: int, f: Publish) -> None:
        group = topic_group(f.topic, self.config.num_groups)
        lease = self.owned.get(group)
        if lease is None:
            lease = self.owned[group] = _Lease(epoch=1, session=0, ready=True)
        seq = lease.seqs.get(f.topic, 0) + 1
        lease.seqs[f.topic] = seq
        m = Message(f.topic, OrderKey(lease.epoch, seq), f.payload, f.msg_id)
        self.engine.cache_append(m)
        self.env.trace("assign", group=group, epoch=lease.epoch, seq=seq,
                       topic=f.topic, msg_id=f.msg_id.hex())
        self.engine.deliver_local(f.topic, m)
        if f.ack_requested:
            self.env.trace("puback", msg_id=f.msg_id.hex(), topic=f.topic)
            self.engine.send_frame(conn_id, Puback(f.msg_id))

    def _publish_as_owner(self, group: int, lease: _Lease, f: Publish,
                          contact_conn: Optional[int]) -> None:
        if not lease.ready:
            lease.queue.append((f, contact_conn))
            return
        seq = lease.seqs.get(f.topic, 0) + 1
        lease.seqs[f.topic] = seq
        key = OrderKey(lease.epoch, seq)
        m = Message(f.topic, key, f.payload, f.msg_id)
        if not self.engine.cache_append(m):
            # should not happen: our epoch outranks everything cached
            log.error("own assignment rejected by cache: %s %s", f.topic, key)
            return
        self.env.trace("assign", group=group, epoch=lease.epoch, seq=seq,
                       topic=f.topic, msg_id=f.msg_id.hex())
        self.engine.deliver_local(f.topic, m)
        state = _ReplState(
            message=m, group=group, unacked=set(self.peer_ids),
            contact_conn=contact_conn if f.ack_requested else None,
            msg_id=f.msg_id, born=self.env.now(),
        )
        self.repl[(f.topic, key)] = state
        frame = Replicate(group=group, topic=f.topic, key=key,
                          msg_id=f.msg_id, payload=f.payload)
        blob = encode_frame(frame)
        for p in self.peer_ids:
            self.env.send_peer(p, blob)
        state.timer = self.env.call_later(self.config.replicate_retry,
                                          self._replicate_retry, f.topic, key)
        if contact_conn is not None and f.ack_requested:
            # publisher-side timeout while we wait for the first confirmation
            self.env.call_later(self.config.publish_timeout,
                                self._owner_ack_expired, f.topic, key)

    def _replicate_retry(self, topic: str, key: OrderKey) -> None:
        state = self.repl.get((topic, key))
        if state is None:
            return
        if not state.unacked or self.env.now() - state.born > 10.0:
            self.repl.pop((topic, key), None)
            return
        frame = Replicate(group=state.group, topic=topic, key=key,
                          msg_id=state.message.publisher_msg_id,
                          payload=state.message.payload)
        blob = encode_frame(frame)
        for p in sorted(state.unacked):
            self.env.send_peer(p, blob)
        state.timer = self.env.call_later(self.config.replicate_retry,
                                          self._replicate_retry, topic, key)

    def _owner_ack_expired(self, topic: str, key: OrderKey) -> None:
        state = self.repl.get((topic, key))
        if state is None or state.contact_conn is None:
            return
        conn, state.contact_conn = state.contact_conn, None
        self._nack_local(conn, state.msg_id, NACK_TIMEOUT)

    def on_repl_ack(self, src: int, f: ReplAck) -> None:
        state = self.repl.get((f.topic, f.key))
        if state is None:
            return
        state.unacked.discard(src)
        if state.contact_conn is not None:
            # first confirmation: the message now exists in >= 2 caches
            conn, state.contact_conn = state.contact_conn, None
            self.env.trace("puback", msg_id=state.msg_id.hex(), topic=f.topic)
            self.engine.send_frame(conn, Puback(state.msg_id))
        if not state.unacked:
            if state.timer is not None:
                state.timer.cancel()
            self.repl.pop((f.topic, f.key), None)

    # ------------------------------------------------------------------
    # replication stream (receiver side)

    def on_replicate(self, src: int, f: Replicate) -> None:
        self.gossip[f.group] = (src, self.env.now())
        self._watch_group(f.group)
        run = self.reconciles.get(f.group)
        if run is not None:
            run.held.append((src, f))
            return
        last = self.engine.cache.last_key(f.topic)
        if last is not None and f.key <= last:
            # duplicate retransmission: confirm, do not reapply
            self._send_peer(src, ReplAck(f.group, f.topic, f.key, f.msg_id))
            return
        if self._in_order(f.group, f.topic, f.key, last):
            self._apply_replicated(src, f)
        else:
            self.env.trace("replicate_gap", group=f.group, topic=f.topic,
                           epoch=f.key.epoch, seq=f.key.seq)
            run = self._start_reconcile(f.group, reason="gap")
            run.held.append((src, f))

    def _in_order(self, group: int, topic: str, key: OrderKey,
                  last: Optional[OrderKey]) -> bool:
        if last is not None and key.epoch == last.epoch:
            return key.seq == last.seq + 1
        if key.seq != 1:
            return False
        # first message of an epoch for this topic: trust it only if we have
        # already caught up with that coordinator's takeover
        return key.epoch <= self.settled_epoch.get(group, 0)

    def _apply_replicated(self, src: int, f: Replicate) -> None:
        m = Message(f.topic, f.key, f.payload, f.msg_id)
        if self.engine.cache_append(m):
            self.engine.deliver_local(f.topic, m)
            self._release_pending(f.msg_id)
        self._send_peer(src, ReplAck(f.group, f.topic, f.key, f.msg_id))

    def _release_pending(self, msg_id: bytes) -> None:
        pending = self.pending.pop(msg_id, None)
        if pending is None:
            return
        if pending.timer is not None:
            pending.timer.cancel()
        if pending.ack_requested:
            # broadcast reached us, so coordinator + this cache hold the message
            self.env.trace("puback", msg_id=msg_id.hex(), topic=pending.topic)
            self.engine.send_frame(pending.conn_id, Puback(msg_id))

    # ------------------------------------------------------------------
    # coordinator election

    def run_for_coordinator(self, group: int,
                            cb: Callable[[tuple], None]) -> None:
        """cb receives ("won", epoch) | ("lost", owner) | ("unavailable",)."""
        lease = self.owned.get(group)
        if lease is not None:
            cb(("won", lease.epoch))
            return
        if self.session_id is None or self.fenced:
            cb(("unavailable",))
            return
        queue = self.elections.get(group)
        if queue is not None:
            queue.append(cb)
            return
        self.elections[group] = [cb]
        self._election_cas(group, self.kv.counter(f"epoch/{group}"), attempts=6)

    def _election_cas(self, group: int, expected: int, attempts: int) -> None:
        def on_cas(result: Optional[CasResult]) -> None:
            if result is None:
                self._election_done(group, ("unavailable",))
                return
            if not result.ok:
                if attempts <= 1:
                    self._election_done(group, ("unavailable",))
                else:
                    self._election_cas(group, result.current, attempts - 1)
                return
            self._election_create(group, result.current)

        self.kv.cas_counter(f"epoch/{group}", expected, expected + 1, on_cas)

    def _election_create(self, group: int, epoch: int) -> None:
        session = self.session_id
        if session is None:
            self._election_done(group, ("unavailable",))
            return
        value = _owner_value(self.me, epoch, session)

        def on_create(result: Optional[CreateResult]) -> None:
            if result is None:
                self._election_done(group, ("unavailable",))
                return
            if result.created:
                self._adopt_group(group, epoch, session)
                self._election_done(group, ("won", epoch))
                return
            if not result.value:
                self._election_done(group, ("unavailable",))
                return
            owner, owner_epoch, owner_session = _parse_owner(result.value)
            if owner == self.me and owner_session == session:
                # our own earlier create won; adopt it
                self._adopt_group(group, owner_epoch, session)
                self._election_done(group, ("won", owner_epoch))
                return
            self.gossip[group] = (owner, self.env.now())
            self._watch_group(group)
            self._election_done(group, ("lost", owner))

        self.kv.create_ephemeral(f"coord/{group}", value, session, on_create)

    def _election_done(self, group: int, outcome: tuple) -> None:
        for cb in self.elections.pop(group, []):
            cb(outcome)

    def _adopt_group(self, group: int, epoch: int, session: int) -> None:
        lease = _Lease(epoch=epoch, session=session)
        # when re-adopting an entry we already held (e.g. after a brief
        # partition that healed before session expiry), resume the per-topic
        # counters where the cache left them instead of restarting at 1
        for topic, key in self.engine.cache.known_keys(group):
            if key.epoch == epoch:
                lease.seqs[topic] = key.seq
        self.owned[group] = lease
        self.env.trace("won", group=group, epoch=epoch)
        self.kv.watch(f"coord/{group}", self._own_entry_gone)
        gossip = encode_frame(CoordGossip(group=group, server=self.me, epoch=epoch))
        for p in self.peer_ids:
            self.env.send_peer(p, gossip)
        # pull anything the previous coordinator broadcast that we missed
        # before assigning keys of the new epoch
        self._start_reconcile(group, reason="takeover")

    def _own_entry_gone(self, key: str) -> None:
        group = int(key.split("/", 1)[1])
        lease = self.owned.pop(group, None)
        if lease is not None:
            self.env.trace("ownership_lost", group=group, epoch=lease.epoch)
            for f, conn in lease.queue:
                if conn is not None:
                    self._nack_local(conn, f.msg_id, NACK_ELECTION_FAILED)

    def on_gossip(self, src: int, f: CoordGossip) -> None:
        if f.server == self.me:
            return
        self.gossip[f.group] = (f.server, self.env.now())
        self._watch_group(f.group)
        if f.epoch > self.settled_epoch.get(f.group, 0):
            # a takeover happened; fetch whatever the previous coordinator
            # managed to broadcast before it went away
            self._start_reconcile(f.group, reason="gossip_epoch")

    def _watch_group(self, group: int) -> None:
        if group in self.watched or self.single:
            return
        self.watched.add(group)
        self.kv.watch(f"coord/{group}", self._coord_entry_event)

    def _coord_entry_event(self, key: str) -> None:
        group = int(key.split("/", 1)[1])
        self.watched.discard(group)
        if group in self.owned:
            # our own entry: handled by _own_entry_gone
            return
        self.gossip.pop(group, None)
        self.env.trace("coord_gone", group=group)
        self._start_reconcile(group, reason="coord_gone")
        self.run_for_coordinator(group, lambda outcome: None)

    # ------------------------------------------------------------------
    # reconciliation

    def _start_reconcile(self, group: int, reason: str) -> _ReconcileRun:
        run = self.reconciles.get(group)
        if run is not None:
            return run
        waiting = set(self.peer_ids)
        run = _ReconcileRun(group, waiting)
        self.reconciles[group] = run
        self.env.trace("reconcile", group=group, reason=reason)
        req = encode_frame(ReconcileReq(
            group=group,
            entries=tuple(self.engine.cache.known_keys(group)),
        ))
        for p in self.peer_ids:
            self.env.send_peer(p, req)
        run.timer = self.env.call_later(self.config.reconcile_timeout,
                                        self._finish_reconcile, group)
        return run

    def reconcile_all(self, reason: str) -> None:
        for group in range(self.config.num_groups):
            self._start_reconcile(group, reason=reason)

    def on_reconcile_req(self, src: int, f: ReconcileReq) -> None:
        after = {topic: key for topic, key in f.entries}
        batch: list[tuple[str, OrderKey, bytes, bytes]] = []
        truncated: list[str] = []
        chunks: list[ReconcileRsp] = []
        topics = self.engine.cache.topics_in_group(f.group)
        for topic in sorted(set(topics) | set(after)):
            msgs, trunc = self.engine.cache.read_after(topic, after.get(topic, ZERO_KEY))
            if trunc:
                truncated.append(topic)
            for m in msgs:
                batch.append((m.topic, m.key, m.publisher_msg_id, m.payload))
                if len(batch) >= RECONCILE_CHUNK:
                    chunks.append(ReconcileRsp(f.group, False, tuple(batch)))
                    batch = []
        chunks.append(ReconcileRsp(f.group, True, tuple(batch), tuple(truncated)))
        for chunk in chunks:
            self._send_peer(src, chunk)

    def on_reconcile_rsp(self, src: int, f: ReconcileRsp) -> None:
        run = self.reconciles.get(f.group)
        if run is None:
            return
        for topic, key, msg_id, payload in f.messages:
            run.pool.setdefault(topic, {})[key] = (msg_id, payload)
        if f.done:
            run.truncated.update(f.truncated)
            run.waiting.discard(src)
            if not run.waiting:
                self._finish_reconcile(f.group)

    def _finish_reconcile(self, group: int) -> None:
        run = self.reconciles.pop(group, None)
        if run is None:
            return
        if run.timer is not None:
            run.timer.cancel()
        max_epoch = self.settled_epoch.get(group, 0)
        for topic in sorted(run.pool):
            last = self.engine.cache.last_key(topic)
            first_applied = None
            for key in sorted(run.pool[topic]):
                if last is not None and key <= last:
                    continue
                msg_id, payload = run.pool[topic][key]
                m = Message(topic, key, payload, msg_id)
                if self.engine.cache_append(m):
                    if first_applied is None:
                        first_applied = key
                    last = key
                    self.engine.deliver_local(topic, m)
                    self._release_pending(msg_id)
                max_epoch = max(max_epoch, key.epoch)
            if topic in run.truncated and first_applied is not None:
                self.engine.cache.note_gap_before(topic, first_applied)
        for _, f in run.held:
            max_epoch = max(max_epoch, f.key.epoch)
        self.settled_epoch[group] = max_epoch
        self.env.trace("reconciled", group=group)
        held, run.held = run.held, []
        for src, frame in held:
            self.on_replicate(src, frame)
        lease = self.owned.get(group)
        if lease is not None and not lease.ready:
            lease.ready = True
            queued, lease.queue = lease.queue, []
            for f, conn in queued:
                self._publish_as_owner(group, lease, f, contact_conn=conn)

    # ------------------------------------------------------------------
    # peer liveness and fencing

    def note_peer_frame(self, src: int) -> None:
        self.peer_heard[src] = self.env.now()

    def on_peer_down(self, sid: int) -> None:
        self.peer_heard[sid] = -1e9
        for group, (owner, _) in list(self.gossip.items()):
            if owner == sid:
                self.gossip.pop(group, None)

    def _ping_tick(self) -> None:
        blob = encode_frame(Ping())
        for p in self.peer_ids:
            self.env.send_peer(p, blob)
        self.env.call_later(self.config.peer_ping_interval, self._ping_tick)

    def _fence_tick(self) -> None:
        now = self.env.now()
        unresponsive = sum(
            1 for p in self.peer_ids
            if now - self.peer_heard.get(p, -1e9) > self.config.peer_timeout
        )
        if not self.fenced:
            if unresponsive >= 2 and not self.kv.write_available():
                self._fence()
        else:
            if unresponsive < 2 and self.kv.write_available():
                self._unfence()
        self.env.call_later(self.config.peer_ping_interval, self._fence_tick)

    def _fence(self) -> None:
        self.fenced = True
        self.owned.clear()
        for mid, pending in list(self.pending.items()):
            if pending.timer is not None:
                pending.timer.cancel()
            self._nack_local(pending.conn_id, mid, NACK_UNAVAILABLE)
        self.pending.clear()
        closed = self.engine.close_all_clients(CLOSE_FENCED)
        self.env.set_accepting(False)
        self.env.trace("fence", closed=closed)

    def _unfence(self) -> None:
        self.fenced = False
        self.env.set_accepting(True)
        self.env.trace("unfence")
        self._ensure_session()
        self.reconcile_all(reason="heal")

    def on_heal_hint(self) -> None:
        pass  # detection is timeout-driven; the hint is only for simulations

    def _send_peer(self, peer: int, frame: Frame) -> None:
        self.env.send_peer(peer, encode_frame(frame))


class ServerNode:
    """A full broker node: engine + coordination KV replica + cluster logic.

    Drivers (the simulation or the socket runtime) feed it connection and
    peer byte events; everything else is internal.
    """

    def __init__(self, env, config: ServerConfig):
        config.validate()
        self.env = env
        self.config = config
        self.engine = Engine(config, env, publish_sink=self._on_publish,
                             on_client_gone=self._on_client_gone)
        self.kv = KvReplica(config.server_id, sorted(config.peers), env, config)
        self.cluster = Cluster(self, config, env, self.engine, self.kv)
        self._peer_bufs: dict[int, DecodeBuffer] = {}

    # -- client side ----------------------------------------------------

    def on_client_connect(self, conn_id: int, address: str) -> None:
        try:
            self.engine.accept(conn_id, address)
        except ConnectionLimitReached:
            self.env.send_client(conn_id, encode_frame(Close(CLOSE_CONNECTION_LIMIT)))
            self.env.close_client(conn_id)

    def on_client_bytes(self, conn_id: int, data: bytes) -> None:
        self.engine.on_bytes(conn_id, data)

    def on_client_close(self, conn_id: int) -> None:
        self.engine.on_conn_lost(conn_id)

    def _on_publish(self, conn_id: int, f: Publish) -> None:
        self.cluster.handle_publish(conn_id, f)

    def _on_client_gone(self, conn_id: int) -> None:
        self.cluster.on_client_gone(conn_id)

    # -- peer side --------------------------------------------------------

    def on_peer_bytes(self, src: int, data: bytes) -> None:
        buf = self._peer_bufs.setdefault(src, DecodeBuffer())
        try:
            frames = buf.feed(data)
        except MalformedFrame:
            log.error("malformed peer frame from %d", src)
            self._peer_bufs[src] = DecodeBuffer()
            return
        self.cluster.note_peer_frame(src)
        for f in frames:
            self._route_peer_frame(src, f)

    def _route_peer_frame(self, src: int, f: Frame) -> None:
        if isinstance(f, KvReq):
            self.kv.on_request(src, f.blob)
        elif isinstance(f, KvRsp):
            self.kv.on_response(src, f.blob)
        elif isinstance(f, Replicate):
            self.cluster.on_replicate(src, f)
        elif isinstance(f, ReplAck):
            self.cluster.on_repl_ack(src, f)
        elif isinstance(f, Publish):
            self.cluster.on_peer_publish(src, f)
        elif isinstance(f, Pubnack):
            self.cluster.on_peer_pubnack(src, f)
        elif isinstance(f, CoordGossip):
            self.cluster.on_gossip(src, f)
        elif isinstance(f, ReconcileReq):
            self.cluster.on_reconcile_req(src, f)
        elif isinstance(f, ReconcileRsp):
            self.cluster.on_reconcile_rsp(src, f)
        elif isinstance(f, Ping):
            self.env.send_peer(src, encode_frame(Pong()))
        elif isinstance(f, Pong):
            pass
        else:
            log.warning("unexpected peer frame %r from %d", type(f).__name__, src)

    # -- lifecycle hints from the driver ---------------------------------

    def on_peer_down(self, sid: int) -> None:
        self.cluster.on_peer_down(sid)

    def on_started(self) -> None:
        """After a restart: rebuild the cache from the peers' caches."""
        self.cluster.reconcile_all(reason="restart")

    def on_heal_hint(self) -> None:
        self.cluster.on_heal_hint()
