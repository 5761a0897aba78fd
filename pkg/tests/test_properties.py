"""Property tests for the closed-form pieces of the model."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from clearway.baselines import FixedTimeController
from clearway.ma2c import softmax
from clearway.net import LaneRef, build_grid
from clearway.pressure import lane_pressure
from clearway.routing import MAX_LINK_TIME_S, intra_link_travel_time
from clearway.sim import emv_speed

finite = st.floats(allow_nan=False, allow_infinity=False)


@given(
    n=st.floats(0.0, 500.0),
    k=st.floats(1.0, 300.0),
    lanes=st.integers(1, 8),
    c_frac=st.floats(0.0, 1.0),
    s_avg=st.floats(0.1, 11.9),
)
def test_emv_speed_threshold(n, k, lanes, c_frac, s_avg):
    c_ec = c_frac * k
    speed, formed = emv_speed(n, k, lanes, c_ec, s_avg, 12.0)
    assert formed == (n <= k + c_ec - k / lanes)
    assert speed == (12.0 if formed else s_avg)


@given(data=st.data())
@settings(max_examples=60, deadline=None)
def test_lane_pressure_bounds(data):
    # in-density is at most 1; downstream term sums <= 3 outgoing links
    net = build_grid(2, 3, lane_capacity=10)
    occ = {
        LaneRef(lk.index, ln): data.draw(st.floats(0.0, 10.0), label=f"occ[{lk.index},{ln}]")
        for lk in net.links
        for ln in range(lk.lane_count)
    }
    counts = lambda lane: occ.get(lane, 0.0)
    for lk in net.links:
        for ln in range(lk.lane_count):
            w = lane_pressure(net, counts, LaneRef(lk.index, ln))
            assert 0.0 <= w <= 3.0


@given(
    clock=st.integers(0, 100_000).map(float),
    offset=st.integers(0, 1000).map(float),
    split=st.sampled_from([1.0, 2.0, 2.5, 5.0, 10.0]),
    n_phases=st.integers(1, 12),
)
def test_phase_at_in_range_and_periodic(clock, offset, split, n_phases):
    phase = FixedTimeController.phase_at(clock, offset, split, n_phases)
    assert 0 <= phase < n_phases
    wrapped = FixedTimeController.phase_at(clock + n_phases * split, offset, split, n_phases)
    assert wrapped == phase


@given(
    length=st.floats(1.0, 1e6),
    speed=st.floats(0.0, 50.0),
)
def test_intra_link_travel_time_clamped(length, speed):
    t = intra_link_travel_time(length, speed)
    assert 0.0 < t <= MAX_LINK_TIME_S
    if speed > 0 and length / speed < MAX_LINK_TIME_S:
        assert t == length / speed


@given(st.lists(st.floats(-30.0, 30.0), min_size=1, max_size=16), st.floats(-5.0, 5.0))
def test_softmax_simplex_and_shift_invariance(logits, shift):
    x = np.array(logits)
    p = softmax(x)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.allclose(softmax(x + shift), p, atol=1e-12)
