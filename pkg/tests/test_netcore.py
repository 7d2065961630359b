"""Sequence arithmetic and segment primitives.

Expected values for the wraparound cases were computed with unbounded
Python ints (the oracle below) before being frozen into the asserts.
"""

import pytest
from hypothesis import given, strategies as st

from honeysplice.netcore import (
    SEQ_MOD,
    HostAddr,
    TcpFlags,
    TcpSegment,
    five_tuple,
    seg_span,
    seq_add,
    seq_lt,
)

A = HostAddr("10.0.0.1", "02:00:00:00:00:01")
B = HostAddr("10.0.0.2", "02:00:00:00:00:02")


def big_add(s, d):
    # oracle: unbounded-int arithmetic reduced mod 2**32
    return (s + d) % (2**32)


def windowed_lt(a, b):
    # oracle: b is reachable from a by adding 1..2**31-1 (enumerated lazily)
    return a != b and ((b - a) % (2**32)) < 2**31


# -- seq_add -------------------------------------------------------------------


def test_seq_add_small():
    assert seq_add(1000, 500) == 1500


def test_seq_add_identity():
    assert seq_add(12345, 0) == 12345


def test_seq_add_wraps():
    # (2**32 - 10) + 20 == 4294967306, reduced: 10
    assert big_add(2**32 - 10, 20) == 10
    assert seq_add(2**32 - 10, 20) == 10


@given(st.integers(0, SEQ_MOD - 1), st.integers(0, SEQ_MOD - 1),
       st.integers(0, SEQ_MOD - 1))
def test_seq_add_associative(s, a, b):
    assert seq_add(seq_add(s, a), b) == seq_add(s, (a + b) % SEQ_MOD)


@given(st.integers(0, SEQ_MOD - 1), st.integers(0, SEQ_MOD - 1))
def test_seq_add_matches_bignum(s, d):
    assert seq_add(s, d) == big_add(s, d)


# -- seq_lt ----------------------------------------------------------------------


def test_seq_lt_simple():
    assert seq_lt(5, 10)
    assert not seq_lt(10, 5)


def test_seq_lt_irreflexive():
    assert not seq_lt(7, 7)


def test_seq_lt_across_wrap():
    # offset from 2**32-5 to 3 is 8 (< 2**31), so it precedes
    assert windowed_lt(2**32 - 5, 3)
    assert seq_lt(2**32 - 5, 3)
    assert not seq_lt(3, 2**32 - 5)


@given(st.integers(0, SEQ_MOD - 1),
       st.integers(1, 2**31 - 1), st.integers(1, 2**31 - 1))
def test_seq_lt_strict_order_on_window(start, i, j):
    # any window of < 2**31 consecutive values is strictly ordered
    a, b = seq_add(start, min(i, j)), seq_add(start, max(i, j))
    if i == j:
        assert not seq_lt(a, b) and not seq_lt(b, a)
    else:
        assert seq_lt(a, b)
        assert not seq_lt(b, a)


@given(st.integers(0, SEQ_MOD - 1), st.integers(0, SEQ_MOD - 1))
def test_seq_lt_matches_oracle(a, b):
    assert seq_lt(a, b) == windowed_lt(a, b)


# -- segments ------------------------------------------------------------------------


def test_seg_span_pure_ack():
    seg = TcpSegment(A, B, 1, 2, seq=0, ack=0, flags=TcpFlags.ACK)
    assert seg_span(seg) == 0


def test_seg_span_syn():
    seg = TcpSegment(A, B, 1, 2, seq=0, ack=0, flags=TcpFlags.SYN)
    assert seg_span(seg) == 1


def test_seg_span_data():
    seg = TcpSegment(A, B, 1, 2, seq=0, ack=0,
                     flags=TcpFlags.PSH | TcpFlags.ACK, payload=b"1234567")
    assert seg_span(seg) == 7


def test_seg_span_fin():
    seg = TcpSegment(A, B, 1, 2, seq=0, ack=0,
                     flags=TcpFlags.FIN | TcpFlags.ACK, payload=b"ab")
    assert seg_span(seg) == 3


def test_segment_rejects_syn_fin():
    with pytest.raises(ValueError):
        TcpSegment(A, B, 1, 2, seq=0, ack=0, flags=TcpFlags.SYN | TcpFlags.FIN)


def test_segment_normalizes_seq():
    seg = TcpSegment(A, B, 1, 2, seq=SEQ_MOD + 5, ack=-1, flags=TcpFlags.ACK)
    assert seg.seq == 5
    assert seg.ack == SEQ_MOD - 1


def test_host_addr_identity():
    # identical iff both ip and mac match
    assert HostAddr("10.0.0.2", "02:aa") == HostAddr("10.0.0.2", "02:aa")
    assert HostAddr("10.0.0.2", "02:aa") != HostAddr("10.0.0.2", "02:bb")
    assert HostAddr("10.0.0.2", "02:aa") != HostAddr("10.0.0.3", "02:aa")


def test_five_tuple():
    seg = TcpSegment(A, B, 40001, 9000, seq=1, ack=2, flags=TcpFlags.ACK)
    assert five_tuple(seg) == ("10.0.0.1", 40001, "10.0.0.2", 9000)
