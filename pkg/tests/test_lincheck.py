"""Checker sanity: known-linearizable and known-broken histories."""

import math

from migrant.lincheck import KvModel, Op, check_linearizable

INF = math.inf


def op(i, call, result, t0, t1):
    return Op(i, call, result, t0, t1)


class TestCheckLinearizable:
    def test_empty(self):
        assert check_linearizable([])

    def test_sequential_create_then_conflict(self):
        h = [
            op(1, ("create", "k", "a"), ("created",), 0, 1),
            op(2, ("create", "k", "b"), ("exists", "a"), 2, 3),
        ]
        assert check_linearizable(h)

    def test_two_created_for_same_key_rejected(self):
        h = [
            op(1, ("create", "k", "a"), ("created",), 0, 1),
            op(2, ("create", "k", "b"), ("created",), 2, 3),
        ]
        assert not check_linearizable(h)

    def test_concurrent_creates_one_winner(self):
        h = [
            op(1, ("create", "k", "a"), ("created",), 0, 10),
            op(2, ("create", "k", "b"), ("exists", "a"), 0, 10),
        ]
        assert check_linearizable(h)

    def test_real_time_order_respected(self):
        # op2 returned before op3 was invoked, so op3 must see its effect
        h = [
            op(2, ("cas", "c", 0, 1), ("ok",), 0, 1),
            op(3, ("cas", "c", 0, 1), ("ok",), 2, 3),
        ]
        assert not check_linearizable(h)

    def test_concurrent_cas_one_conflict(self):
        h = [
            op(1, ("cas", "c", 0, 1), ("ok",), 0, 5),
            op(2, ("cas", "c", 0, 1), ("conflict", 1), 0, 5),
        ]
        assert check_linearizable(h)

    def test_reordering_needed_within_windows(self):
        # invocation order 1 then 2, but only the order 2-before-1 is legal
        h = [
            op(1, ("cas", "c", 1, 2), ("ok",), 0.0, 10.0),
            op(2, ("cas", "c", 0, 1), ("ok",), 0.5, 10.0),
        ]
        assert check_linearizable(h)

    def test_incomplete_op_may_have_taken_effect(self):
        h = [
            op(1, ("create", "k", "a"), None, 0, INF),
            op(2, ("create", "k", "b"), ("exists", "a"), 5, 6),
        ]
        assert check_linearizable(h)

    def test_incomplete_op_may_be_dropped(self):
        h = [
            op(1, ("create", "k", "a"), None, 0, INF),
            op(2, ("create", "k", "b"), ("created",), 5, 6),
        ]
        assert check_linearizable(h)

    def test_impossible_even_with_incomplete(self):
        h = [
            op(1, ("create", "k", "a"), None, 0, INF),
            op(2, ("create", "k", "b"), ("created",), 5, 6),
            op(3, ("create", "k", "c"), ("created",), 7, 8),
        ]
        assert not check_linearizable(h)

    def test_model_steps(self):
        m = KvModel()
        s0 = m.initial()
        r, s1 = m.step(s0, ("create", "k", "v"))
        assert r == ("created",)
        r, s2 = m.step(s1, ("cas", "n", 0, 3))
        assert r == ("ok",)
        r, _ = m.step(s2, ("cas", "n", 0, 4))
        assert r == ("conflict", 3)
