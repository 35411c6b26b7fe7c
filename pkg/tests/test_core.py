"""Tests for identifiers, ordering keys and sharding hashes."""

import itertools
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from migrant.core import (
    InvalidTopic,
    Message,
    OrderKey,
    ZERO_KEY,
    client_shard,
    compare,
    fnv1a_64,
    topic_group,
    validate_topic,
)


def fnv1a_64_reference(data: bytes) -> int:
    """Independent FNV-1a oracle, written against the published algorithm
    description rather than the implementation under test."""
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) % (2**64)
    return h


# Published FNV-1a 64-bit test vectors.
FNV_VECTORS = [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
    (b"foobar", 0x85944171F73967E8),
]


class TestFnv:
    @pytest.mark.parametrize("data,expected", FNV_VECTORS)
    def test_published_vectors(self, data, expected):
        assert fnv1a_64_reference(data) == expected
        assert fnv1a_64(data) == expected

    @given(st.binary(max_size=64))
    def test_matches_reference(self, data):
        assert fnv1a_64(data) == fnv1a_64_reference(data)


class TestTopicGroup:
    def test_single_group(self):
        assert topic_group("a", 1) == 0

    def test_reference_value(self):
        # Frozen from the reference oracle above.
        expected = fnv1a_64_reference(b"scores/soccer") % 100
        assert expected == 12
        assert topic_group("scores/soccer", 100) == 12

    def test_deterministic(self):
        for t in ("x", "scores/soccer", "news/europe"):
            assert topic_group(t, 100) == topic_group(t, 100)

    def test_distribution(self):
        # 10,000 random topics into 100 groups: counts within [50, 150].
        rng = random.Random(0xC0FFEE)
        counts = [0] * 100
        for _ in range(10_000):
            name = "t/" + "".join(rng.choices("abcdefghijklmnop0123456789", k=12))
            counts[topic_group(name, 100)] += 1
        assert min(counts) >= 50 and max(counts) <= 150

    def test_rejects_zero_groups(self):
        with pytest.raises(ValueError):
            topic_group("a", 0)


class TestClientShard:
    def test_single_shard(self):
        for addr in ("10.0.0.1", "192.168.1.77", "::1"):
            assert client_shard(addr, 1) == 0

    def test_deterministic(self):
        assert client_shard("10.1.2.3", 16) == client_shard("10.1.2.3", 16)

    def test_distribution_16_shards(self):
        # 10,000 distinct synthetic addresses over 16 shards: >= 400 each.
        rng = random.Random(0xBEEF)
        counts = [0] * 16
        seen = set()
        while len(seen) < 10_000:
            addr = f"10.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(256)}:{rng.randrange(1024, 65536)}"
            if addr in seen:
                continue
            seen.add(addr)
            counts[client_shard(addr, 16)] += 1
        assert min(counts) >= 400


class TestOrderKey:
    def test_equal(self):
        assert compare(OrderKey(1, 5), OrderKey(1, 5)) == 0

    def test_epoch_dominates(self):
        assert compare(OrderKey(1, 9), OrderKey(2, 1)) == -1
        assert compare(OrderKey(2, 1), OrderKey(1, 9)) == 1

    def test_sorting_all_permutations(self):
        expected = [OrderKey(1, 1), OrderKey(1, 2), OrderKey(2, 1), OrderKey(2, 2)]
        for perm in itertools.permutations(expected):
            assert sorted(perm) == expected

    @given(
        st.tuples(st.integers(0, 3), st.integers(0, 3)),
        st.tuples(st.integers(0, 3), st.integers(0, 3)),
        st.tuples(st.integers(0, 3), st.integers(0, 3)),
    )
    def test_total_order_properties(self, ta, tb, tc):
        a, b, c = OrderKey(*ta), OrderKey(*tb), OrderKey(*tc)
        # antisymmetry
        assert compare(a, b) == -compare(b, a)
        # totality
        assert compare(a, b) in (-1, 0, 1)
        # transitivity
        if compare(a, b) <= 0 and compare(b, c) <= 0:
            assert compare(a, c) <= 0
        # agreement with rich comparison
        assert (a < b) == (compare(a, b) == -1)

    def test_exhaustive_small_domain(self):
        keys = [OrderKey(e, s) for e in range(4) for s in range(4)]
        for a in keys:
            for b in keys:
                assert compare(a, b) == -compare(b, a)
                for c in keys:
                    if compare(a, b) <= 0 and compare(b, c) <= 0:
                        assert compare(a, c) <= 0

    def test_sentinel(self):
        assert ZERO_KEY.is_sentinel()
        assert not OrderKey(1, 1).is_sentinel()


class TestTopicValidation:
    def test_valid(self):
        assert validate_topic("scores/soccer") == "scores/soccer"

    @pytest.mark.parametrize("bad", ["", "a\x00b", "a\nb", "x" * 256])
    def test_invalid(self, bad):
        with pytest.raises(InvalidTopic):
            validate_topic(bad)

    def test_multibyte_length_counts_bytes(self):
        # 128 two-byte characters = 256 bytes > 255
        with pytest.raises(InvalidTopic):
            validate_topic("é" * 128)
        validate_topic("é" * 127)


class TestMessage:
    def test_payload_cap(self):
        Message("t", OrderKey(1, 1), b"x" * 65535, b"\x00" * 16)
        with pytest.raises(ValueError):
            Message("t", OrderKey(1, 1), b"x" * 65536, b"\x00" * 16)

    def test_msg_id_width(self):
        with pytest.raises(ValueError):
            Message("t", OrderKey(1, 1), b"", b"\x00" * 15)
