"""Codec tests: byte layout, round-trips, chunking invariance, malformed input."""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from migrant.core import OrderKey
from migrant.wire import (
    ALL_FRAME_CLASSES,
    MAX_FRAME,
    Close,
    Connack,
    Connect,
    CoordGossip,
    DecodeBuffer,
    KvReq,
    KvRsp,
    MalformedFrame,
    Notify,
    OversizeFrame,
    Ping,
    Pong,
    Puback,
    Publish,
    Pubnack,
    ReconcileReq,
    ReconcileRsp,
    Recover,
    RecoverEnd,
    ReplAck,
    Replicate,
    Suback,
    Subscribe,
    decode_frames,
    encode_frame,
)

MID = bytes(range(16))


def sample_frames():
    """One representative frame per kind, in kind order."""
    return [
        Connect(role=1, server_id=2),
        Connack(server_id=7),
        Subscribe(topic="scores/soccer", resume=OrderKey(1, 3)),
        Suback(topic="scores/soccer"),
        Publish(topic="t", msg_id=MID, payload=b"\x01\x02", ack_requested=True),
        Puback(msg_id=MID),
        Pubnack(msg_id=MID, reason=2, owner_hint=3),
        Notify(topic="t", key=OrderKey(2, 7), msg_id=MID, payload=b"hi"),
        Recover(topic="t", after=OrderKey(1, 5)),
        RecoverEnd(topic="t", truncated=True),
        Ping(),
        Pong(),
        Replicate(group=12, topic="t", key=OrderKey(3, 1), msg_id=MID, payload=b"p"),
        ReplAck(group=12, topic="t", key=OrderKey(3, 1), msg_id=MID),
        CoordGossip(group=12, server=1, epoch=4),
        ReconcileReq(group=12, entries=(("t", OrderKey(1, 2)), ("u", OrderKey(0, 0)))),
        ReconcileRsp(
            group=12,
            done=True,
            messages=(("t", OrderKey(1, 3), MID, b"x"),),
            truncated=("u",),
        ),
        Close(reason=1),
        KvReq(blob=b"\x05raw"),
        KvRsp(blob=b""),
    ]


def test_sample_covers_every_kind():
    assert {type(f) for f in sample_frames()} == set(ALL_FRAME_CLASSES)


class TestByteLayout:
    def test_ping_is_five_bytes(self):
        enc = encode_frame(Ping())
        assert enc == b"\x00\x00\x00\x01\x0b"
        assert len(enc) == 5

    def test_notify_byte_oracle(self):
        # Built by hand from the format table: length ‖ kind ‖ topic ‖
        # epoch(8 BE) ‖ seq(8 BE) ‖ msg_id(16) ‖ payload(u16 + raw).
        topic = b"\x00\x01t"
        key = struct.pack(">Q", 2) + struct.pack(">Q", 7)
        payload = b"\x00\x02hi"
        body = b"\x08" + topic + key + MID + payload
        expected = struct.pack(">I", len(body)) + body
        got = encode_frame(Notify(topic="t", key=OrderKey(2, 7), msg_id=MID, payload=b"hi"))
        assert got == expected
        # epoch bytes strictly precede seq bytes
        assert got.index(struct.pack(">Q", 2)) < got.index(struct.pack(">Q", 7))

    def test_length_prefix_equals_body_plus_one(self):
        for f in sample_frames():
            enc = encode_frame(f)
            (length,) = struct.unpack(">I", enc[:4])
            assert length == len(enc) - 4
            assert length >= 1

    def test_publish_140_byte_roundtrip(self):
        f = Publish(topic="scores/soccer", msg_id=MID, payload=bytes(140))
        buf = DecodeBuffer()
        assert decode_frames(buf, encode_frame(f)) == [f]
        assert not buf.pending


class TestDecode:
    def test_empty_input(self):
        assert decode_frames(DecodeBuffer(), b"") == []

    def test_two_concatenated_pings(self):
        # concatenation oracle: byte strings concatenated by hand
        data = encode_frame(Ping()) + encode_frame(Ping())
        assert decode_frames(DecodeBuffer(), data) == [Ping(), Ping()]

    def test_byte_at_a_time_yields_frame_on_last_byte(self):
        enc = encode_frame(Subscribe(topic="t", resume=OrderKey(0, 0)))
        buf = DecodeBuffer()
        for b in enc[:-1]:
            assert buf.feed(bytes([b])) == []
        assert buf.feed(enc[-1:]) == [Subscribe(topic="t", resume=OrderKey(0, 0))]

    @pytest.mark.parametrize("frame", sample_frames(), ids=lambda f: type(f).__name__)
    def test_exhaustive_split_points(self, frame):
        # a frame split at every possible boundary decodes identically
        enc = encode_frame(frame)
        whole = decode_frames(DecodeBuffer(), enc)
        assert whole == [frame]
        for cut in range(1, len(enc)):
            buf = DecodeBuffer()
            out = buf.feed(enc[:cut]) + buf.feed(enc[cut:])
            assert out == [frame], f"split at {cut} diverged"
            assert not buf.pending

    def test_remainder_retained(self):
        enc = encode_frame(Ping())
        buf = DecodeBuffer()
        out = buf.feed(enc + enc[:3])
        assert out == [Ping()]
        assert bytes(buf.pending) == enc[:3]
        assert buf.feed(enc[3:]) == [Ping()]


class TestMalformed:
    def test_unknown_kind(self):
        with pytest.raises(MalformedFrame):
            decode_frames(DecodeBuffer(), b"\x00\x00\x00\x01\xff")

    def test_oversize_length_rejected_before_body(self):
        # only the 4-byte prefix is fed; rejection must not wait for the body
        prefix = struct.pack(">I", MAX_FRAME)
        with pytest.raises(MalformedFrame):
            decode_frames(DecodeBuffer(), prefix)

    def test_zero_length_rejected(self):
        with pytest.raises(MalformedFrame):
            decode_frames(DecodeBuffer(), b"\x00\x00\x00\x00")

    def test_truncated_body(self):
        # CONNACK with declared length 5 but a 1-byte body
        data = struct.pack(">I", 2) + b"\x02\x01"
        with pytest.raises(MalformedFrame):
            decode_frames(DecodeBuffer(), data)

    def test_trailing_garbage_in_body(self):
        data = struct.pack(">I", 3) + b"\x0b\x00\x00"  # PING with 2 extra bytes
        with pytest.raises(MalformedFrame):
            decode_frames(DecodeBuffer(), data)

    def test_encode_oversize(self):
        msgs = tuple(("t", OrderKey(1, i + 1), MID, bytes(65000)) for i in range(17))
        with pytest.raises(OversizeFrame):
            encode_frame(ReconcileRsp(group=0, done=True, messages=msgs))


topics = st.text(
    alphabet=st.characters(min_codepoint=0x20, max_codepoint=0x7E), min_size=1, max_size=32
)
keys = st.builds(OrderKey, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
msg_ids = st.binary(min_size=16, max_size=16)
payloads = st.binary(max_size=256)


def frame_strategy():
    return st.one_of(
        st.builds(Connect, role=st.integers(0, 1), server_id=st.integers(0, 2**32 - 1)),
        st.builds(Connack, server_id=st.integers(0, 2**32 - 1)),
        st.builds(Subscribe, topic=topics, resume=keys),
        st.builds(Suback, topic=topics),
        st.builds(Publish, topic=topics, msg_id=msg_ids, payload=payloads,
                  ack_requested=st.booleans()),
        st.builds(Puback, msg_id=msg_ids),
        st.builds(Pubnack, msg_id=msg_ids, reason=st.integers(0, 255),
                  owner_hint=st.integers(0, 2**32 - 1)),
        st.builds(Notify, topic=topics, key=keys, msg_id=msg_ids, payload=payloads),
        st.builds(Recover, topic=topics, after=keys),
        st.builds(RecoverEnd, topic=topics, truncated=st.booleans()),
        st.just(Ping()),
        st.just(Pong()),
        st.builds(Replicate, group=st.integers(0, 2**32 - 1), topic=topics,
                  key=keys, msg_id=msg_ids, payload=payloads),
        st.builds(ReplAck, group=st.integers(0, 2**32 - 1), topic=topics,
                  key=keys, msg_id=msg_ids),
        st.builds(CoordGossip, group=st.integers(0, 2**32 - 1),
                  server=st.integers(0, 2**32 - 1), epoch=st.integers(0, 2**64 - 1)),
        st.builds(ReconcileReq, group=st.integers(0, 2**32 - 1),
                  entries=st.lists(st.tuples(topics, keys), max_size=4).map(tuple)),
        st.builds(ReconcileRsp, group=st.integers(0, 2**32 - 1), done=st.booleans(),
                  messages=st.lists(st.tuples(topics, keys, msg_ids, payloads),
                                    max_size=4).map(tuple),
                  truncated=st.lists(topics, max_size=3).map(tuple)),
        st.builds(Close, reason=st.integers(0, 255)),
        st.builds(KvReq, blob=st.binary(max_size=64)),
        st.builds(KvRsp, blob=st.binary(max_size=64)),
    )


class TestProperties:
    @given(frame_strategy())
    def test_roundtrip(self, frame):
        assert decode_frames(DecodeBuffer(), encode_frame(frame)) == [frame]

    @given(st.lists(frame_strategy(), min_size=1, max_size=5), st.data())
    @settings(max_examples=60)
    def test_chunking_invariance(self, frames, data):
        stream = b"".join(encode_frame(f) for f in frames)
        n_cuts = data.draw(st.integers(0, min(6, len(stream) - 1)))
        cuts = sorted(data.draw(st.sets(st.integers(1, len(stream) - 1),
                                        min_size=n_cuts, max_size=n_cuts)))
        buf = DecodeBuffer()
        out = []
        prev = 0
        for c in cuts + [len(stream)]:
            out += buf.feed(stream[prev:c])
            prev = c
        assert out == frames
        assert not buf.pending
