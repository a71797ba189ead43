import itertools
import math
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mroffload import buffers
from mroffload.buffers import FrameMatchBuffer, PoseDelayBuffer, TimeDelayBuffer, buffer_size_frames
from mroffload.wire import PosePayload


def yaw(theta):
    return (math.cos(theta / 2), 0.0, 0.0, math.sin(theta / 2))


def test_buffer_size_examples():
    assert buffer_size_frames(32.29, 16.67) == 2
    assert buffer_size_frames(16.67, 16.67) == 1
    assert buffer_size_frames(16.68, 16.67) == 2
    for bad in ((0, 16.67), (32.29, 0), (-1, 1), (math.inf, 1)):
        with pytest.raises(buffers.NonPositiveInput):
            buffer_size_frames(*bad)


@given(st.integers(1, 10**6), st.integers(1, 10**5))
def test_buffer_size_integer_ratios(a, b):
    assert buffer_size_frames(float(a), float(b)) == -(-a // b)


def test_pose_push_semantics():
    buf = PoseDelayBuffer(0, capacity=3)
    buf.push(7, PosePayload())
    assert len(buf) == 1
    with pytest.raises(buffers.NonMonotoneTimestamp):
        buf.push(5, PosePayload())
    with pytest.raises(buffers.NonMonotoneTimestamp):
        buf.push(7, PosePayload())
    for t in (8, 9, 10):
        buf.push(t, PosePayload((t, 0, 0)))
    assert len(buf) == 3
    with pytest.raises(buffers.InsufficientHistory):
        buf.query(7)
    assert buf.query(8).position == (8, 0, 0)


def test_pose_constant_stream():
    pose = PosePayload((1.0, 2.0, 3.0), yaw(0.7))
    buf = PoseDelayBuffer(30_000)
    for i in range(100):
        buf.push(i * 1000, pose)
    for now in (30_000, 45_500, 128_999):
        q = buf.query(now)
        assert q.position == pytest.approx(pose.position, abs=1e-12)
        assert q.orientation == pytest.approx(pose.orientation, abs=1e-12)


def test_pose_insufficient_history():
    buf = PoseDelayBuffer(30_000)
    with pytest.raises(buffers.InsufficientHistory):
        buf.query(0)
    buf.push(0, PosePayload())
    buf.push(1000, PosePayload())
    with pytest.raises(buffers.InsufficientHistory):
        buf.query(20_000)


def test_for_rate_capacity():
    buf = PoseDelayBuffer.for_rate(30_000, 1000)
    assert buf.capacity >= 31


def test_slerp_properties():
    q0, q1 = yaw(0.2), yaw(1.4)
    assert buffers.slerp(q0, q1, 0) == pytest.approx(q0)
    assert buffers.slerp(q0, q1, 1) == pytest.approx(q1)
    assert buffers.slerp(q0, q1, 0.5) == pytest.approx(yaw(0.8))
    # shortest arc: -q1 is the same rotation
    assert buffers.slerp(q0, tuple(-v for v in q1), 0.5) == pytest.approx(yaw(0.8))


def test_pose_queries_are_thread_safe():
    buf = PoseDelayBuffer(5_000, capacity=64)
    stop = threading.Event()
    errors = []

    def writer():
        t = 0
        while not stop.is_set():
            t += 100
            buf.push(t, PosePayload((t, 0, 0)))

    def reader():
        for _ in range(2000):
            try:
                buf.query(buf._times[-1] + 4_000)
            except buffers.InsufficientHistory:
                pass
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

    w = threading.Thread(target=writer)
    w.start()
    readers = [threading.Thread(target=reader) for _ in range(2)]
    for r in readers:
        r.start()
    for r in readers:
        r.join()
    stop.set()
    w.join()
    assert not errors


def test_match_basic_pairs():
    buf = FrameMatchBuffer(1e6)
    buf.push_color(7, "c7")
    buf.push_mask(7, "m7")
    assert buf.pop(0) == (7, "c7", "m7")
    buf.push_mask(9, "m9")
    buf.push_color(9, "c9")
    assert buf.pop(0) == (9, "c9", "m9")
    assert buf.pop(0) is None


def test_match_duplicates():
    buf = FrameMatchBuffer(1e6)
    buf.push_color(7, "a")
    with pytest.raises(buffers.DuplicateSequence):
        buf.push_color(7, "b")
    buf.push_mask(7, "m")
    with pytest.raises(buffers.DuplicateSequence):
        buf.push_mask(7, "m")


def test_match_expiry_drops_color():
    buf = FrameMatchBuffer(expiry_us=100_000)
    buf.push_color(5, "c5", now_us=0)
    assert buf.pop(50_000) is None and buf.pending() == 1
    assert buf.pop(100_001) is None
    assert buf.stats.dropped == 1 and buf.stats.expired_colors == 1
    assert buf.pending() == 0
    buf.push_mask(5, "late", now_us=100_002)
    assert buf.pop(100_003) is None


def test_for_rtt_expiry():
    assert FrameMatchBuffer.for_rtt(32.29).expiry_us == pytest.approx(3 * 32290)


@pytest.mark.parametrize("order", list(itertools.permutations(["c1", "c2", "m1", "m2"])))
def test_match_all_interleavings(order):
    buf = FrameMatchBuffer(1e6)
    for item in order:
        seq = int(item[1])
        (buf.push_color if item[0] == "c" else buf.push_mask)(seq, item)
    assert buf.pop(0) == (1, "c1", "m1")
    assert buf.pop(0) == (2, "c2", "m2")
    assert buf.pop(0) is None


events = st.lists(
    st.tuples(st.sampled_from(["color", "mask", "pop"]), st.integers(0, 30), st.integers(0, 50_000)),
    max_size=200,
)


@settings(max_examples=200, deadline=None)
@given(events, st.integers(1, 8))
def test_match_bounded_and_exact(ops, max_pending):
    buf = FrameMatchBuffer(expiry_us=20_000, max_pending=max_pending)
    now = 0
    seen_c, seen_m = set(), set()
    for kind, seq, dt in ops:
        now += dt
        if kind == "color" and seq not in seen_c:
            seen_c.add(seq)
            buf.push_color(seq, ("c", seq), now)
        elif kind == "mask" and seq not in seen_m:
            seen_m.add(seq)
            buf.push_mask(seq, ("m", seq), now)
        elif kind == "pop":
            out = buf.pop(now)
            if out is not None:
                s, c, m = out
                assert c == ("c", s) and m == ("m", s)
        assert buf.pending() <= max_pending


def test_time_delay_buffer():
    buf = TimeDelayBuffer(2)
    assert [buf.push(i) for i in range(5)] == [None, None, 0, 1, 2]
    assert len(buf) == 2
    assert TimeDelayBuffer(0).push("x") == "x"
    with pytest.raises(buffers.NonPositiveInput):
        TimeDelayBuffer(-1)


def pose_error_sinusoid(h_us, t_c_us=30_000, amp=0.1, omega=2 * math.pi * 1.5):
    buf = PoseDelayBuffer(t_c_us, capacity=100_000)
    n = int(2_000_000 / h_us)
    for i in range(n + 1):
        t = i * h_us
        buf.push(t, PosePayload((amp * math.sin(omega * t / 1e6), 0, 0), yaw(math.sin(omega * t / 1e6))))
    worst = 0.0
    rng = random.Random(0)
    for _ in range(2000):
        now = rng.uniform(t_c_us, n * h_us)
        got = buf.query(now).position[0]
        worst = max(worst, abs(got - amp * math.sin(omega * (now - t_c_us) / 1e6)))
    return worst


def test_pose_sinusoid_converges_second_order():
    e1 = pose_error_sinusoid(4000)
    e2 = pose_error_sinusoid(2000)
    assert e1 / e2 >= 3.5


def test_buffer_size_decimal_inputs():
    rng = random.Random(11)
    for _ in range(1000):
        a, b = rng.randint(1, 50_000), rng.randint(1, 10_000)
        # two-decimal millisecond values, as they are written in configs
        assert buffer_size_frames(a / 100, b / 100) == -(-a // b)
    assert buffer_size_frames(209.93, 29.99) == 7
    assert buffer_size_frames(50.01, 16.67) == 3
