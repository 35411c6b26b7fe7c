"""Embedded coordination service: a linearizable key/value store replicated
across the cluster, with ephemeral entries bound to heartbeat sessions,
one-shot watches, and compare-and-set counters.

One logical instance runs inside every broker.  Writes go through a
majority-replicated command log (leader election and log replication in the
style of Raft, without compaction or membership changes); a write is
acknowledged to its proposer only once the command is applied on the
proposer's own replica, which also gives read-your-writes for the local,
sequentially consistent get().  Watches are registered on the local replica
and fire when it applies a delete or change of the watched key, so a
partitioned watcher fires after it catches up on the log.  A production
deployment may swap an external coordination service behind the same
surface.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .wire import KvReq, KvRsp, encode_frame

log = logging.getLogger(__name__)

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

# request sub-kinds
_VOTE = 1
_APPEND = 2
_PROPOSE = 3
_SESSION_HB = 4
# response sub-kinds
_VOTE_R = 1
_APPEND_R = 2
_PROPOSE_R = 3

_PROPOSE_OK = 0
_PROPOSE_NOT_LEADER = 1

FOLLOWER, CANDIDATE, LEADER = "follower", "candidate", "leader"

MAX_APPEND_ENTRIES = 64


# ---------------------------------------------------------------------------
# commands and results


@dataclass(frozen=True, slots=True)
class CmdCreateEphemeral:
    key: str
    value: bytes
    session: int


@dataclass(frozen=True, slots=True)
class CmdCas:
    key: str
    expected: int
    new: int


@dataclass(frozen=True, slots=True)
class CmdDelete:
    key: str


@dataclass(frozen=True, slots=True)
class CmdSessionCreate:
    session: int
    owner: int
    timeout_ms: int


@dataclass(frozen=True, slots=True)
class CmdSessionExpire:
    session: int


Command = CmdCreateEphemeral | CmdCas | CmdDelete | CmdSessionCreate | CmdSessionExpire

_CMD_CODE = {
    CmdCreateEphemeral: 1,
    CmdCas: 2,
    CmdDelete: 3,
    CmdSessionCreate: 4,
    CmdSessionExpire: 5,
}


@dataclass(frozen=True, slots=True)
class CreateResult:
    created: bool
    value: bytes  # existing value when not created
    version: int


@dataclass(frozen=True, slots=True)
class CasResult:
    ok: bool
    current: int


@dataclass(frozen=True, slots=True)
class KvEntry:
    value: bytes
    version: int
    ephemeral_owner: Optional[int]  # session id, None = persistent


def _enc_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    out += _U16.pack(len(raw))
    out += raw


def _enc_blob(out: bytearray, b: bytes) -> None:
    out += _U16.pack(len(b))
    out += b


class _Cur:
    __slots__ = ("b", "o")

    def __init__(self, b: bytes, o: int = 0):
        self.b, self.o = b, o

    def u8(self):
        v = self.b[self.o]
        self.o += 1
        return v

    def u16(self):
        v = _U16.unpack_from(self.b, self.o)[0]
        self.o += 2
        return v

    def u32(self):
        v = _U32.unpack_from(self.b, self.o)[0]
        self.o += 4
        return v

    def u64(self):
        v = _U64.unpack_from(self.b, self.o)[0]
        self.o += 8
        return v

    def string(self):
        n = self.u16()
        v = self.b[self.o:self.o + n].decode("utf-8")
        self.o += n
        return v

    def blob(self):
        n = self.u16()
        v = self.b[self.o:self.o + n]
        self.o += n
        return v


def encode_command(cmd: Command) -> bytes:
    out = bytearray(_U8.pack(_CMD_CODE[type(cmd)]))
    if isinstance(cmd, CmdCreateEphemeral):
        _enc_str(out, cmd.key)
        _enc_blob(out, cmd.value)
        out += _U64.pack(cmd.session)
    elif isinstance(cmd, CmdCas):
        _enc_str(out, cmd.key)
        out += _U64.pack(cmd.expected)
        out += _U64.pack(cmd.new)
    elif isinstance(cmd, CmdDelete):
        _enc_str(out, cmd.key)
    elif isinstance(cmd, CmdSessionCreate):
        out += _U64.pack(cmd.session)
        out += _U32.pack(cmd.owner)
        out += _U32.pack(cmd.timeout_ms)
    else:
        out += _U64.pack(cmd.session)
    return bytes(out)


def decode_command(cur: _Cur) -> Command:
    code = cur.u8()
    if code == 1:
        return CmdCreateEphemeral(cur.string(), bytes(cur.blob()), cur.u64())
    if code == 2:
        return CmdCas(cur.string(), cur.u64(), cur.u64())
    if code == 3:
        return CmdDelete(cur.string())
    if code == 4:
        return CmdSessionCreate(cur.u64(), cur.u32(), cur.u32())
    if code == 5:
        return CmdSessionExpire(cur.u64())
    raise ValueError(f"unknown command code {code}")


# ---------------------------------------------------------------------------
# replicated state machine


class KvState:
    """The deterministic state machine every replica applies the log to."""

    def __init__(self) -> None:
        self.entries: dict[str, KvEntry] = {}
        self.versions: dict[str, int] = {}  # per-key write counter, survives deletes
        self.sessions: dict[int, tuple[int, int]] = {}  # session -> (owner, timeout_ms)
        self.dead_sessions: set[int] = set()

    def counter_value(self, key: str) -> int:
        entry = self.entries.get(key)
        if entry is None:
            return 0
        return _U64.unpack(entry.value)[0]

    def apply(self, cmd: Command):
        """Returns (result, deleted_keys, changed_keys)."""
        deleted: list[str] = []
        changed: list[str] = []
        if isinstance(cmd, CmdCreateEphemeral):
            existing = self.entries.get(cmd.key)
            if existing is not None:
                return CreateResult(False, existing.value, existing.version), deleted, changed
            if cmd.session in self.dead_sessions or cmd.session not in self.sessions:
                # creator's session already expired: refuse, report as existing-less failure
                return CreateResult(False, b"", 0), deleted, changed
            version = self.versions.get(cmd.key, 0) + 1
            self.versions[cmd.key] = version
            self.entries[cmd.key] = KvEntry(cmd.value, version, cmd.session)
            return CreateResult(True, cmd.value, version), deleted, changed
        if isinstance(cmd, CmdCas):
            current = self.counter_value(cmd.key)
            if current != cmd.expected:
                return CasResult(False, current), deleted, changed
            version = self.versions.get(cmd.key, 0) + 1
            self.versions[cmd.key] = version
            if cmd.key in self.entries:
                changed.append(cmd.key)
            self.entries[cmd.key] = KvEntry(_U64.pack(cmd.new), version, None)
            return CasResult(True, cmd.new), deleted, changed
        if isinstance(cmd, CmdDelete):
            if cmd.key in self.entries:
                del self.entries[cmd.key]
                deleted.append(cmd.key)
                return True, deleted, changed
            return False, deleted, changed
        if isinstance(cmd, CmdSessionCreate):
            if cmd.session not in self.dead_sessions:
                self.sessions[cmd.session] = (cmd.owner, cmd.timeout_ms)
            return True, deleted, changed
        if isinstance(cmd, CmdSessionExpire):
            self.sessions.pop(cmd.session, None)
            self.dead_sessions.add(cmd.session)
            for key in sorted(k for k, e in self.entries.items()
                              if e.ephemeral_owner == cmd.session):
                del self.entries[key]
                deleted.append(key)
            return True, deleted, changed
        raise TypeError(f"unknown command {cmd!r}")


# log entry: (term, origin, req_id, command)
Entry = tuple[int, int, int, Command]


def _encode_entries(entries: list[Entry]) -> bytes:
    out = bytearray(_U16.pack(len(entries)))
    for term, origin, req_id, cmd in entries:
        out += _U64.pack(term)
        out += _U32.pack(origin)
        out += _U64.pack(req_id)
        _enc_blob(out, encode_command(cmd))
    return bytes(out)


def _decode_entries(cur: _Cur) -> list[Entry]:
    n = cur.u16()
    out = []
    for _ in range(n):
        term = cur.u64()
        origin = cur.u32()
        req_id = cur.u64()
        blob = cur.blob()
        out.append((term, origin, req_id, decode_command(_Cur(bytes(blob)))))
    return out


class KvReplica:
    """One cluster member's replica plus its local client surface.

    Local operations (create_ephemeral, cas, delete, session management)
    take a callback receiving the applied result, or None when the write
    quorum is unreachable within the propose timeout.
    """

    def __init__(self, server_id: int, peer_ids: list[int], env, config) -> None:
        self.me = server_id
        self.peers = list(peer_ids)
        self.env = env
        self.config = config
        self.state = KvState()
        stor = env.storage()
        self.log: list[Entry] = stor.setdefault("kv_log", [])
        self._stor = stor
        self.term: int = stor.get("kv_term", 0)
        self.voted_for: Optional[int] = stor.get("kv_voted", None)
        self.role = FOLLOWER
        self.leader_id: Optional[int] = None
        self.commit_idx = 0
        self.applied_idx = 0
        self.votes: set[int] = set()
        self.next_idx: dict[int, int] = {}
        self.match_idx: dict[int, int] = {}
        self.last_append_from_leader = -1.0
        self.last_ack: dict[int, float] = {}
        self._next_req_id = 1
        self._pending: dict[int, tuple[Callable, object]] = {}  # req_id -> (cb, timer)
        self._watches: dict[str, list[Callable]] = {}
        self._session_deadlines: dict[int, float] = {}
        self._expiring: set[int] = set()
        self._election_timer = None
        self._lead_gen = 0
        self._majority = (len(self.peers) + 1) // 2 + 1
        # replay any persisted log up to nothing (commit index is re-learned)
        self._arm_election_timer()
        if len(self.peers) == 0:
            # degenerate single-node mode: always leader
            self._become_leader_single()

    # ------------------------------------------------------------------
    # public surface for the broker

    def get(self, key: str) -> Optional[tuple[bytes, int]]:
        entry = self.state.entries.get(key)
        if entry is None:
            return None
        return entry.value, entry.version

    def counter(self, key: str) -> int:
        return self.state.counter_value(key)

    def create_ephemeral(self, key: str, value: bytes, session: int,
                         cb: Callable[[Optional[CreateResult]], None]) -> None:
        self._propose(CmdCreateEphemeral(key, value, session), cb)

    def cas_counter(self, key: str, expected: int, new: int,
                    cb: Callable[[Optional[CasResult]], None]) -> None:
        if new <= expected:
            raise ValueError("cas_counter requires new > expected")
        self._propose(CmdCas(key, expected, new), cb)

    def delete(self, key: str, cb=None) -> None:
        self._propose(CmdDelete(key), cb or (lambda r: None))

    def create_session(self, session_id: int, timeout: float, cb) -> None:
        self._propose(
            CmdSessionCreate(session_id, self.me, int(timeout * 1000)), cb
        )

    def expire_session(self, session_id: int, cb=None) -> None:
        self._propose(CmdSessionExpire(session_id), cb or (lambda r: None))

    def heartbeat(self, session_id: int) -> None:
        """Refresh a session's liveness deadline at the current leader."""
        if self.role == LEADER:
            self._refresh_session(session_id)
        elif self.leader_id is not None:
            out = bytearray(_U8.pack(_SESSION_HB))
            out += _U64.pack(session_id)
            self._send(self.leader_id, KvReq(bytes(out)))

    def watch(self, key: str, cb: Callable[[str], None]) -> None:
        """One-shot: cb(key) runs after a local apply deletes or changes key."""
        self._watches.setdefault(key, []).append(cb)

    def session_live(self, session_id: int) -> bool:
        return session_id in self.state.sessions

    def write_available(self) -> bool:
        """False iff this replica cannot currently reach a write quorum."""
        now = self.env.now()
        window = self.config.peer_timeout
        if self.role == LEADER:
            if not self.peers:
                return True
            fresh = 1 + sum(1 for p in self.peers
                            if now - self.last_ack.get(p, -1e9) <= window)
            return fresh >= self._majority
        return (self.last_append_from_leader >= 0
                and now - self.last_append_from_leader <= window)

    # ------------------------------------------------------------------
    # proposing

    def _propose(self, cmd: Command, cb: Callable) -> None:
        req_id = self._next_req_id
        self._next_req_id += 1
        timer = self.env.call_later(self.config.kv_propose_timeout,
                                    self._propose_expired, req_id)
        self._pending[req_id] = (cb, timer)
        self._submit(req_id, cmd)

    def _submit(self, req_id: int, cmd: Command) -> None:
        if req_id not in self._pending:
            return
        if self.role == LEADER:
            self.log.append((self.term, self.me, req_id, cmd))
            self._persist()
            if not self.peers:
                self.commit_idx = len(self.log)
                self._apply_committed()
            else:
                self._push_all()
        elif self.leader_id is not None:
            out = bytearray(_U8.pack(_PROPOSE))
            out += _U32.pack(self.me)
            out += _U64.pack(req_id)
            _enc_blob(out, encode_command(cmd))
            self._send(self.leader_id, KvReq(bytes(out)))
            # retry toward a (possibly new) leader until applied or expired
            self.env.call_later(0.3, self._submit, req_id, cmd)
        else:
            self.env.call_later(0.1, self._submit, req_id, cmd)

    def _propose_expired(self, req_id: int) -> None:
        pending = self._pending.pop(req_id, None)
        if pending is not None:
            pending[0](None)

    # ------------------------------------------------------------------
    # roles and timers

    def _arm_election_timer(self) -> None:
        if self._election_timer is not None:
            self._election_timer.cancel()
        delay = self.env.rng.uniform(self.config.kv_election_min,
                                     self.config.kv_election_max)
        self._election_timer = self.env.call_later(delay, self._election_timeout)

    def _election_timeout(self) -> None:
        if self.role == LEADER or not self.peers:
            return
        self.role = CANDIDATE
        self.term += 1
        self.voted_for = self.me
        self.leader_id = None
        self.votes = {self.me}
        self._persist()
        last_idx = len(self.log)
        last_term = self.log[-1][0] if self.log else 0
        out = bytearray(_U8.pack(_VOTE))
        out += _U64.pack(self.term)
        out += _U32.pack(self.me)
        out += _U64.pack(last_idx)
        out += _U64.pack(last_term)
        blob = bytes(out)
        for p in self.peers:
            self._send(p, KvReq(blob))
        self._arm_election_timer()

    def _become_leader_single(self) -> None:
        self.role = LEADER
        self.leader_id = self.me

    def _become_leader(self) -> None:
        self.role = LEADER
        self.leader_id = self.me
        self._lead_gen += 1
        self.next_idx = {p: len(self.log) + 1 for p in self.peers}
        self.match_idx = {p: 0 for p in self.peers}
        self.last_ack = {}
        now = self.env.now()
        self._session_deadlines = {
            sid: now + timeout_ms / 1000.0
            for sid, (_, timeout_ms) in self.state.sessions.items()
        }
        self._expiring.clear()
        self._heartbeat_tick(self._lead_gen)
        self._session_tick(self._lead_gen)

    def _heartbeat_tick(self, gen: int) -> None:
        if self.role != LEADER or gen != self._lead_gen:
            return
        self._push_all()
        self.env.call_later(self.config.kv_heartbeat, self._heartbeat_tick, gen)

    def _push_all(self) -> None:
        for p in self.peers:
            self._push(p)

    def _push(self, peer: int) -> None:
        nxt = self.next_idx.get(peer, len(self.log) + 1)
        prev_idx = nxt - 1
        prev_term = self.log[prev_idx - 1][0] if prev_idx >= 1 and prev_idx <= len(self.log) else 0
        entries = self.log[nxt - 1:nxt - 1 + MAX_APPEND_ENTRIES]
        out = bytearray(_U8.pack(_APPEND))
        out += _U64.pack(self.term)
        out += _U32.pack(self.me)
        out += _U64.pack(prev_idx)
        out += _U64.pack(prev_term)
        out += _U64.pack(self.commit_idx)
        out += _encode_entries(entries)
        self._send(peer, KvReq(bytes(out)))

    # ------------------------------------------------------------------
    # wire handling (called by the hosting node)

    def on_request(self, src: int, blob: bytes) -> None:
        cur = _Cur(blob)
        sub = cur.u8()
        if sub == _VOTE:
            self._on_vote(src, cur.u64(), cur.u32(), cur.u64(), cur.u64())
        elif sub == _APPEND:
            term = cur.u64()
            leader = cur.u32()
            prev_idx = cur.u64()
            prev_term = cur.u64()
            commit = cur.u64()
            entries = _decode_entries(cur)
            self._on_append(src, term, leader, prev_idx, prev_term, commit, entries)
        elif sub == _PROPOSE:
            origin = cur.u32()
            req_id = cur.u64()
            cmd = decode_command(_Cur(bytes(cur.blob())))
            self._on_propose(src, origin, req_id, cmd)
        elif sub == _SESSION_HB:
            if self.role == LEADER:
                self._refresh_session(cur.u64())

    def on_response(self, src: int, blob: bytes) -> None:
        cur = _Cur(blob)
        sub = cur.u8()
        if sub == _VOTE_R:
            self._on_vote_reply(src, cur.u64(), cur.u8() == 1)
        elif sub == _APPEND_R:
            self._on_append_reply(src, cur.u64(), cur.u8() == 1, cur.u64())
        elif sub == _PROPOSE_R:
            req_id = cur.u64()
            status = cur.u8()
            hint = cur.u32()
            if status == _PROPOSE_NOT_LEADER and hint != 0xFFFFFFFF:
                self.leader_id = hint

    def _maybe_step_down(self, term: int) -> None:
        if term > self.term:
            was_leader = self.role == LEADER
            self.term = term
            self.voted_for = None
            self.role = FOLLOWER
            self._persist()
            if was_leader:
                self._arm_election_timer()

    def _on_vote(self, src: int, term: int, candidate: int,
                 last_idx: int, last_term: int) -> None:
        self._maybe_step_down(term)
        granted = False
        if term == self.term and self.voted_for in (None, candidate):
            my_last_term = self.log[-1][0] if self.log else 0
            up_to_date = (last_term, last_idx) >= (my_last_term, len(self.log))
            if up_to_date:
                granted = True
                self.voted_for = candidate
                self._persist()
                self._arm_election_timer()
        out = bytearray(_U8.pack(_VOTE_R))
        out += _U64.pack(self.term)
        out += _U8.pack(1 if granted else 0)
        self._send(src, KvRsp(bytes(out)))

    def _on_vote_reply(self, src: int, term: int, granted: bool) -> None:
        self._maybe_step_down(term)
        if self.role != CANDIDATE or term != self.term or not granted:
            return
        self.votes.add(src)
        if len(self.votes) >= self._majority:
            self._become_leader()

    def _on_append(self, src: int, term: int, leader: int, prev_idx: int,
                   prev_term: int, commit: int, entries: list[Entry]) -> None:
        self._maybe_step_down(term)
        ok = False
        if term == self.term:
            self.role = FOLLOWER
            self.leader_id = leader
            self.last_append_from_leader = self.env.now()
            self._arm_election_timer()
            if prev_idx == 0 or (prev_idx <= len(self.log)
                                 and self.log[prev_idx - 1][0] == prev_term):
                ok = True
                idx = prev_idx
                for entry in entries:
                    idx += 1
                    if idx <= len(self.log):
                        if self.log[idx - 1][0] != entry[0]:
                            del self.log[idx - 1:]
                            self.log.append(entry)
                    else:
                        self.log.append(entry)
                self._persist()
                new_commit = min(commit, len(self.log))
                if new_commit > self.commit_idx:
                    self.commit_idx = new_commit
                    self._apply_committed()
        out = bytearray(_U8.pack(_APPEND_R))
        out += _U64.pack(self.term)
        out += _U8.pack(1 if ok else 0)
        out += _U64.pack(min(prev_idx + len(entries), len(self.log)) if ok else 0)
        self._send(src, KvRsp(bytes(out)))

    def _on_append_reply(self, src: int, term: int, ok: bool, match: int) -> None:
        self._maybe_step_down(term)
        if self.role != LEADER or term != self.term:
            return
        self.last_ack[src] = self.env.now()
        if ok:
            self.match_idx[src] = max(self.match_idx.get(src, 0), match)
            self.next_idx[src] = self.match_idx[src] + 1
            self._advance_commit()
            if self.next_idx[src] <= len(self.log):
                self._push(src)
        else:
            self.next_idx[src] = max(1, self.next_idx.get(src, 1) - 1)
            self._push(src)

    def _on_propose(self, src: int, origin: int, req_id: int, cmd: Command) -> None:
        if self.role == LEADER:
            # ignore duplicates already in the log (proposer retries)
            for term, o, r, _ in reversed(self.log):
                if o == origin and r == req_id:
                    return
            self.log.append((self.term, origin, req_id, cmd))
            self._persist()
            self._push_all()
        else:
            hint = self.leader_id if self.leader_id is not None else 0xFFFFFFFF
            out = bytearray(_U8.pack(_PROPOSE_R))
            out += _U64.pack(req_id)
            out += _U8.pack(_PROPOSE_NOT_LEADER)
            out += _U32.pack(hint)
            self._send(src, KvRsp(bytes(out)))

    def _advance_commit(self) -> None:
        for n in range(len(self.log), self.commit_idx, -1):
            if self.log[n - 1][0] != self.term:
                break
            acks = 1 + sum(1 for p in self.peers if self.match_idx.get(p, 0) >= n)
            if acks >= self._majority:
                self.commit_idx = n
                self._apply_committed()
                break

    def _apply_committed(self) -> None:
        while self.applied_idx < self.commit_idx:
            self.applied_idx += 1
            term, origin, req_id, cmd = self.log[self.applied_idx - 1]
            result, deleted, changed = self.state.apply(cmd)
            if isinstance(cmd, CmdSessionCreate) and self.role == LEADER:
                self._refresh_session(cmd.session)
            if isinstance(cmd, CmdSessionExpire):
                self._session_deadlines.pop(cmd.session, None)
                self._expiring.discard(cmd.session)
            for key in deleted + changed:
                for cb in self._watches.pop(key, []):
                    self.env.defer(cb, key)
            if origin == self.me:
                pending = self._pending.pop(req_id, None)
                if pending is not None:
                    cb, timer = pending
                    timer.cancel()
                    self.env.defer(cb, result)

    # ------------------------------------------------------------------
    # leader-side session liveness

    def _refresh_session(self, session_id: int) -> None:
        info = self.state.sessions.get(session_id)
        if info is None:
            return
        self._session_deadlines[session_id] = self.env.now() + info[1] / 1000.0

    def _session_tick(self, gen: int) -> None:
        if self.role != LEADER or gen != self._lead_gen:
            return
        now = self.env.now()
        for sid in list(self.state.sessions):
            if sid in self._expiring:
                continue
            deadline = self._session_deadlines.get(sid)
            if deadline is None:
                self._refresh_session(sid)
            elif now >= deadline:
                self._expiring.add(sid)
                self.log.append((self.term, self.me, 0, CmdSessionExpire(sid)))
                self._persist()
                self._push_all()
        self.env.call_later(max(self.config.session_timeout / 5, 0.2),
                            self._session_tick, gen)

    # ------------------------------------------------------------------

    def _persist(self) -> None:
        self._stor["kv_term"] = self.term
        self._stor["kv_voted"] = self.voted_for
        self._stor["kv_log"] = self.log

    def _send(self, peer: int, frame) -> None:
        self.env.send_peer(peer, encode_frame(frame))
