"""Linearizability checking of operation histories against a sequential model.

Search in the style of Wing & Gong: repeatedly pick an operation that is
"minimal" (its invocation precedes every other pending operation's return),
apply it to the sequential model, and backtrack on result mismatches.
Visited (linearized-set, model-state) pairs are memoized.  Operations that
never returned may legally take effect at any point after invocation or not
at all, so they are explored both ways and any model result is accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Optional


@dataclass(frozen=True)
class Op:
    op_id: int
    call: tuple
    result: Optional[tuple]  # None = never returned
    invoke_t: float
    return_t: float  # +inf when never returned

    @property
    def complete(self) -> bool:
        return self.result is not None


class KvModel:
    """Sequential model of the coordination KV's externally checked ops."""

    def initial(self) -> Hashable:
        return frozenset()

    def step(self, state: frozenset, call: tuple) -> tuple[tuple, frozenset]:
        kind = call[0]
        entries = dict(state)
        if kind == "create":
            _, key, value = call
            if key in entries:
                return ("exists", entries[key]), state
            entries[key] = value
            return ("created",), frozenset(entries.items())
        if kind == "cas":
            _, key, expected, new = call
            current = entries.get(key, 0)
            if current != expected:
                return ("conflict", current), state
            entries[key] = new
            return ("ok",), frozenset(entries.items())
        raise ValueError(f"unknown call {call!r}")


def check_linearizable(history: list[Op], model=None) -> bool:
    """True iff the history has a legal sequential witness."""
    model = model or KvModel()
    ops = {op.op_id: op for op in history}
    seen: set[tuple] = set()

    def minimal_candidates(remaining: frozenset) -> list[int]:
        bound = math.inf
        for oid in remaining:
            bound = min(bound, ops[oid].return_t)
        return [oid for oid in remaining if ops[oid].invoke_t <= bound]

    def search(remaining: frozenset, state) -> bool:
        if all(not ops[oid].complete for oid in remaining):
            return True  # incomplete ops may simply never have taken effect
        key = (remaining, state)
        if key in seen:
            return False
        seen.add(key)
        for oid in sorted(minimal_candidates(remaining)):
            op = ops[oid]
            result, new_state = model.step(state, op.call)
            rest = remaining - {oid}
            if op.complete:
                if result == op.result and search(rest, new_state):
                    return True
            else:
                # took effect (any result) or never took effect
                if search(rest, new_state) or search(rest, state):
                    return True
        return False

    return search(frozenset(ops), model.initial())
