"""Coordination KV tests: elections, ephemerals, watches, sessions,
counters, write availability, and linearizability over seeded schedules."""

import math

import pytest

from migrant.config import ServerConfig
from migrant.coordkv import KvReplica
from migrant.lincheck import Op, check_linearizable
from migrant.simnet import Crash, Heal, Partition, SimConfig, SimNet
from migrant.wire import DecodeBuffer, KvReq, KvRsp


class KvHost:
    """Minimal node hosting only a KV replica (no engine, no cluster)."""

    def __init__(self, env, sid: int, n: int):
        cfg = ServerConfig(server_id=sid,
                           peers={i: f"s{i}" for i in range(n) if i != sid})
        if n == 1:
            cfg.peers = {}
        self.kv = KvReplica(sid, sorted(cfg.peers), env, cfg)
        self._bufs = {}

    def on_peer_bytes(self, src, data):
        buf = self._bufs.setdefault(src, DecodeBuffer())
        for f in buf.feed(data):
            if isinstance(f, KvReq):
                self.kv.on_request(src, f.blob)
            elif isinstance(f, KvRsp):
                self.kv.on_response(src, f.blob)

    def on_client_connect(self, *a):
        pass

    def on_client_bytes(self, *a):
        pass

    def on_client_close(self, *a):
        pass


def kv_net(seed: int, n: int = 3, horizon: float = 30.0) -> SimNet:
    net = SimNet(SimConfig(seed=seed, servers=n, horizon=horizon))
    for sid in range(n):
        net.add_server(sid, lambda env, s=sid: KvHost(env, s, n))
    return net


def kv_of(net, sid) -> KvReplica:
    return net.servers[sid].node.kv


def with_session(net, sid, cb, timeout=2.0):
    """Create a session on server sid, then run cb(session_id)."""
    session = 1000 + sid

    def created(result):
        assert result is not None
        cb(session)

    net.schedule(0.0, lambda: kv_of(net, sid).create_session(session, timeout, created))
    return session


class TestCreateEphemeral:
    def test_create_absent_then_duplicate(self):
        net = kv_net(seed=1)
        results = []

        def go(session):
            kv = kv_of(net, 0)
            kv.create_ephemeral("coord/1", b"v1", session, lambda r: results.append(r))
            kv.create_ephemeral("coord/1", b"v2", session, lambda r: results.append(r))

        with_session(net, 0, go)
        net.run(5.0)
        assert len(results) == 2
        assert results[0].created
        assert not results[1].created
        assert results[1].value == b"v1"

    @pytest.mark.parametrize("seed", range(10))
    def test_racing_creators_single_winner(self, seed):
        net = kv_net(seed=seed)
        outcomes = {}
        ready = []

        def arm(sid):
            def go(session):
                ready.append(sid)
                if len(ready) == 3:
                    for s in range(3):
                        kv_of(net, s).create_ephemeral(
                            "coord/7", b"x", 1000 + s,
                            lambda r, s=s: outcomes.__setitem__(s, r))
            with_session(net, sid, go)

        for sid in range(3):
            arm(sid)
        net.run(10.0)
        created = [s for s, r in outcomes.items() if r is not None and r.created]
        exists = [s for s, r in outcomes.items() if r is not None and not r.created]
        assert len(created) == 1
        assert len(created) + len(exists) == 3


class TestGet:
    def test_absent(self):
        net = kv_net(seed=2)
        net.run(2.0)
        assert kv_of(net, 0).get("nope") is None

    def test_read_your_writes(self):
        net = kv_net(seed=3)
        seen = []

        def go(session):
            kv = kv_of(net, 1)

            def done(r):
                assert r.created
                seen.append(kv.get("coord/9"))

            kv.create_ephemeral("coord/9", b"mine", session, done)

        with_session(net, 1, go)
        net.run(5.0)
        assert seen and seen[0] is not None
        assert seen[0][0] == b"mine"

    @pytest.mark.parametrize("seed", range(5))
    def test_monotonic_reads(self, seed):
        net = kv_net(seed=seed)
        observed = {s: [] for s in range(3)}

        def sample():
            for s in range(3):
                v = kv_of(net, s).counter("epoch/1")
                observed[s].append(v)
            if net.t < 8.0:
                net.schedule(0.05, sample)

        def bump(expected):
            kv_of(net, 0).cas_counter(
                "epoch/1", expected, expected + 1,
                lambda r: r is not None and r.ok and net.schedule(0.2, bump, expected + 1))

        net.schedule(0.5, bump, 0)
        net.schedule(0.0, sample)
        net.run(10.0)
        for s, vals in observed.items():
            assert vals == sorted(vals), f"non-monotonic reads at {s}"


class TestWatch:
    def test_watch_then_delete_fires(self):
        net = kv_net(seed=4)
        fired = []

        def go(session):
            kv = kv_of(net, 0)

            def created(r):
                kv.watch("coord/3", lambda key: fired.append(key))
                kv.delete("coord/3")

            kv.create_ephemeral("coord/3", b"v", session, created)

        with_session(net, 0, go)
        net.run(5.0)
        assert fired == ["coord/3"]

    def test_watch_absent_create_expire_fires_once(self):
        net = kv_net(seed=5)
        fired = []
        kv1 = None

        def go(session):
            kv0 = kv_of(net, 0)
            kv0.watch("coord/5", lambda key: fired.append((net.t, key)))
            kv_of(net, 1).create_ephemeral("coord/5", b"v", session, lambda r: None)
            net.schedule(1.0, lambda: kv_of(net, 1).expire_session(session))

        with_session(net, 1, go)
        net.run(10.0)
        assert len(fired) == 1
        assert fired[0][1] == "coord/5"

    def test_partitioned_watcher_fires_after_heal(self):
        net = kv_net(seed=6)
        fired = []

        def go(session):
            kv2 = kv_of(net, 2)
            kv2.watch("coord/8", lambda key: fired.append(net.t))

            def created(r):
                assert r is not None and r.created

            kv_of(net, 0).create_ephemeral("coord/8", b"v", session, created)

        with_session(net, 0, go, timeout=1.0)
        net.apply_script([
            Partition(2.0, (frozenset({2}), frozenset({0, 1}))),
            # session heartbeats stop entirely; the leader expires it
            Heal(8.0),
        ])
        net.schedule(3.0, lambda: kv_of(net, 0).expire_session(1000))
        net.run(20.0)
        assert len(fired) == 1
        assert fired[0] >= 8.0  # only after the partition healed


class TestCasCounter:
    def test_initialize(self):
        net = kv_net(seed=7)
        results = []
        net.schedule(0.5, lambda: kv_of(net, 0).cas_counter(
            "epoch/1", 0, 1, lambda r: results.append(r)))
        net.run(5.0)
        assert results and results[0].ok and results[0].current == 1
        assert kv_of(net, 0).counter("epoch/1") == 1

    @pytest.mark.parametrize("seed", range(10))
    def test_concurrent_cas_single_winner(self, seed):
        net = kv_net(seed=seed + 100)
        results = {}
        net.schedule(0.5, lambda: [
            kv_of(net, s).cas_counter("epoch/2", 0, 1,
                                      lambda r, s=s: results.__setitem__(s, r))
            for s in (0, 1)
        ])
        net.run(8.0)
        done = {s: r for s, r in results.items() if r is not None}
        oks = [r for r in done.values() if r.ok]
        conflicts = [r for r in done.values() if not r.ok]
        assert len(oks) == 1
        assert all(r.current == 1 for r in conflicts)

    def test_rejects_non_increasing(self):
        net = kv_net(seed=8)
        with pytest.raises(ValueError):
            kv_of(net, 0).cas_counter("epoch/1", 3, 3, lambda r: None)

    def test_successful_sequence_strictly_increasing(self):
        net = kv_net(seed=9)
        seen = []

        def bump(expected):
            def done(r):
                if r is not None and r.ok:
                    seen.append(r.current)
                    if r.current < 5:
                        bump(r.current)

            kv_of(net, 0).cas_counter("epoch/3", expected, expected + 1, done)

        net.schedule(0.5, lambda: bump(0))
        net.run(10.0)
        assert seen == sorted(set(seen))
        assert len(seen) >= 3


class TestSessions:
    def test_expire_empty_session_no_events(self):
        net = kv_net(seed=10)
        fired = []

        def go(session):
            kv_of(net, 0).watch("coord/1", lambda k: fired.append(k))
            kv_of(net, 0).expire_session(session)

        with_session(net, 0, go)
        net.run(5.0)
        assert fired == []

    def test_expiry_deletes_all_entries_and_fires_watches(self):
        net = kv_net(seed=11)
        fired = []

        def go(session):
            kv0 = kv_of(net, 0)
            keys = ["coord/1", "coord/2", "coord/3"]
            state = {"n": 0}

            def created(r):
                state["n"] += 1
                if state["n"] == 3:
                    for k in keys:
                        kv_of(net, 1).watch(k, lambda key: fired.append(key))
                    net.schedule(0.5, lambda: kv0.expire_session(session))

            for k in keys:
                kv0.create_ephemeral(k, b"v", session, created)

        with_session(net, 0, go)
        net.run(10.0)
        assert sorted(fired) == ["coord/1", "coord/2", "coord/3"]

    def test_partitioned_owner_session_expires_after_timeout(self):
        net = kv_net(seed=12)
        fired = []

        def go(session):
            def created(r):
                assert r is not None and r.created
                kv_of(net, 1).watch("coord/4", lambda k: fired.append(net.t))

            kv_of(net, 0).create_ephemeral("coord/4", b"v", session, created)

        session_timeout = 1.5
        with_session(net, 0, go, timeout=session_timeout)
        # keep the session alive with heartbeats until the partition hits
        def heartbeat():
            if net.t < 12.0:
                kv_of(net, 0).heartbeat(1000)
                net.schedule(0.3, heartbeat)

        net.schedule(0.0, heartbeat)
        cut_at = 4.0
        net.apply_script([Partition(cut_at, (frozenset({0}), frozenset({1, 2})))])
        net.run(20.0)
        assert len(fired) == 1
        # expired within roughly T_session plus scheduling slack
        assert cut_at + session_timeout * 0.9 <= fired[0] <= cut_at + session_timeout * 3


class TestWriteAvailability:
    def test_healthy_cluster_true_everywhere(self):
        net = kv_net(seed=13)
        net.run(5.0)
        assert all(kv_of(net, s).write_available() for s in range(3))

    def test_isolated_false_majority_true(self):
        net = kv_net(seed=14)
        net.apply_script([Partition(3.0, (frozenset({1}), frozenset({0, 2})))])
        net.run(12.0)
        assert not kv_of(net, 1).write_available()
        assert kv_of(net, 0).write_available()
        assert kv_of(net, 2).write_available()


class TestLinearizability:
    @pytest.mark.parametrize("seed", range(15))
    def test_seeded_schedules(self, seed):
        net = kv_net(seed=seed + 500, horizon=20.0)
        history = []
        sessions_ready = []

        def arm(sid):
            def go(session):
                sessions_ready.append(sid)
                if len(sessions_ready) < 3:
                    return
                # all sessions live: fire a burst of concurrent ops
                rng = net.master_rng
                op_id = [0]
                for s in range(3):
                    for _ in range(2):
                        op_id[0] += 1
                        oid = op_id[0]
                        if rng.random() < 0.5:
                            call = ("create", f"coord/{rng.randrange(2)}", bytes([s]))
                            fire_create(s, oid, call)
                        else:
                            exp = rng.randrange(2)
                            call = ("cas", f"epoch/{rng.randrange(2)}", exp, exp + 1)
                            fire_cas(s, oid, call)

            with_session(net, sid, go)

        def fire_create(s, oid, call):
            t0 = net.t
            def done(r):
                if r is None:
                    history.append(Op(oid, call, None, t0, math.inf))
                elif r.created:
                    history.append(Op(oid, call, ("created",), t0, net.t))
                else:
                    history.append(Op(oid, call, ("exists", r.value), t0, net.t))
            kv_of(net, s).create_ephemeral(call[1], call[2], 1000 + s, done)

        def fire_cas(s, oid, call):
            t0 = net.t
            def done(r):
                if r is None:
                    history.append(Op(oid, call, None, t0, math.inf))
                elif r.ok:
                    history.append(Op(oid, call, ("ok",), t0, net.t))
                else:
                    history.append(Op(oid, call, ("conflict", r.current), t0, net.t))
            kv_of(net, s).cas_counter(call[1], call[2], call[3], done)

        for sid in range(3):
            arm(sid)
        net.run()
        assert len(history) >= 4
        assert check_linearizable(history)
