"""Shared identifiers, ordering keys, and the hash functions behind all sharding.

Everything here is an immutable value; instances can be shared freely between
execution contexts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3

MAX_TOPIC_BYTES = 255
MAX_PAYLOAD_BYTES = 65535


class InvalidTopic(ValueError):
    """Topic name violates the naming rules."""


def fnv1a_64(data: bytes) -> int:
    """FNV-1a 64-bit hash."""
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def validate_topic(name: str) -> str:
    """Check topic naming rules; returns the name unchanged.

    Rules: non-empty, at most 255 bytes of UTF-8, no control characters.
    """
    if not name:
        raise InvalidTopic("topic name is empty")
    raw = name.encode("utf-8")
    if len(raw) > MAX_TOPIC_BYTES:
        raise InvalidTopic(f"topic name exceeds {MAX_TOPIC_BYTES} bytes")
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in name):
        raise InvalidTopic("topic name contains control characters")
    return name


def topic_group(topic: str, num_groups: int) -> int:
    """Map a topic to its group index by hashing the topic name."""
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    return fnv1a_64(topic.encode("utf-8")) % num_groups


def client_shard(client_address: str, n_shards: int) -> int:
    """Map a client address to a fixed shard index."""
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    return fnv1a_64(client_address.encode("utf-8")) % n_shards


@dataclass(frozen=True, order=True, slots=True)
class OrderKey:
    """(epoch, seq) pair; lexicographic total order per topic.

    Both components start at 1 for real messages.  (0, 0) is the sentinel
    meaning "nothing received yet" in subscription/recovery requests.
    """

    epoch: int
    seq: int

    def is_sentinel(self) -> bool:
        return self.epoch == 0 and self.seq == 0


ZERO_KEY = OrderKey(0, 0)


def compare(a: OrderKey, b: OrderKey) -> int:
    """Lexicographic comparison: -1 if a < b, 0 if equal, 1 if a > b."""
    if a.epoch != b.epoch:
        return -1 if a.epoch < b.epoch else 1
    if a.seq != b.seq:
        return -1 if a.seq < b.seq else 1
    return 0


@dataclass(frozen=True, slots=True)
class Message:
    """A published payload stamped with topic, ordering key and publisher id.

    The key is assigned exactly once, by the coordinator of the topic's
    group.  publisher_msg_id is a 128-bit opaque identifier chosen by the
    publisher, unique per publisher session; subscribers use it to filter
    duplicates caused by republication.
    """

    topic: str
    key: OrderKey
    payload: bytes = field(repr=False)
    publisher_msg_id: bytes

    def __post_init__(self) -> None:
        if len(self.payload) > MAX_PAYLOAD_BYTES:
            raise ValueError("payload exceeds 65535 bytes")
        if len(self.publisher_msg_id) != 16:
            raise ValueError("publisher_msg_id must be 16 bytes")
