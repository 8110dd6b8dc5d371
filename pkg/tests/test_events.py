import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evaction.events import (HEADER_SIZE, RECORD_SIZE, EncodingError, EventFormatError, EventStream, MotionScript,
                             StreamValidationError, concat, decode_stream, encode_stream, generate_synthetic,
                             slice_window, synthesize, validate_stream)
from helpers import random_stream


def _valid_payload(rng, n, width, height):
    s = random_stream(rng, n, width, height, t_max=10_000_000).normalized()
    return encode_stream(s)


# --- binary layout ---------------------------------------------------------

def test_empty_header_only():
    s = EventStream(240, 180, [], [], [], [])
    data = encode_stream(s)
    assert len(data) == HEADER_SIZE == 16
    assert data == b"EVS1" + struct.pack("<HHQ", 240, 180, 0)
    back = decode_stream(data)
    assert len(back) == 0 and back.sensor_width == 240


def test_single_event_record_layout():
    s = EventStream(240, 180, [0], [0], [0], [1])
    data = encode_stream(s)
    assert len(data) == HEADER_SIZE + RECORD_SIZE
    assert data[HEADER_SIZE:] == struct.pack("<HHQb", 0, 0, 0, 1)


def test_record_fields_little_endian():
    s = EventStream(640, 480, [513], [258], [0], [-1])
    rec = encode_stream(s)[HEADER_SIZE:]
    assert rec == bytes([1, 2, 2, 1]) + bytes(8) + b"\xff"


def test_round_trip_bytes_1000_payloads():
    rng = np.random.default_rng(0)
    for i in range(1000):
        payload = _valid_payload(rng, int(rng.integers(0, 40)), int(rng.integers(1, 400)), int(rng.integers(1, 300)))
        assert encode_stream(decode_stream(payload)) == payload, i


def test_round_trip_fields_both_formats():
    rng = np.random.default_rng(1)
    for i in range(1000):
        s = random_stream(rng, int(rng.integers(1, 30)), 50, 40).normalized()
        assert decode_stream(encode_stream(s, "binary_v1")) == s
        assert decode_stream(encode_stream(s, "csv"), "csv", 50, 40) == s


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 65534), st.integers(0, 65534), st.integers(0, 2**40),
                          st.sampled_from([-1, 1])), max_size=20))
def test_round_trip_property(rows):
    rows.sort(key=lambda r: r[2])
    cols = list(zip(*rows)) if rows else [(), (), (), ()]
    s = EventStream(65535, 65535, *cols).normalized()
    assert validate_stream(s)
    assert decode_stream(encode_stream(s)) == s
    assert decode_stream(encode_stream(s, "csv"), "csv", 65535, 65535) == s


def test_csv_line_mapping():
    s = decode_stream(b"x,y,t,p\n3,5,1000,1\n", "csv", 10, 10)
    assert s[0] == (3, 5, 0, 1)
    raw = decode_stream(b"x,y,t,p\n3,5,1000,1\n", "csv", 10, 10, normalize=False)
    assert raw[0].t == 1000


def test_csv_polarity_written_as_minus_one():
    s = EventStream(4, 4, [1], [2], [7], [-1])
    assert encode_stream(s, "csv") == b"x,y,t,p\n1,2,7,-1\n"


# --- errors ----------------------------------------------------------------

def test_truncated_record_reports_offset():
    data = encode_stream(EventStream(10, 10, [1, 2], [1, 2], [0, 5], [1, 1]))
    with pytest.raises(EventFormatError) as e:
        decode_stream(data[:-3])
    assert e.value.offset == HEADER_SIZE + RECORD_SIZE


def test_bad_magic():
    with pytest.raises(EventFormatError) as e:
        decode_stream(b"XXXX" + bytes(12))
    assert e.value.offset == 0


def test_nonmonotonic_names_first_index():
    s = EventStream(10, 10, [0, 0, 0, 0], [0, 0, 0, 0], [0, 5, 3, 1], [1, 1, 1, 1])
    with pytest.raises(StreamValidationError) as e:
        decode_stream(encode_stream(s))
    assert e.value.index == 2


def test_bad_polarity_rejected():
    with pytest.raises(StreamValidationError):
        decode_stream(b"x,y,t,p\n1,1,0,0\n", "csv", 4, 4)
    s = EventStream(10, 10, [0], [0], [0], [0])
    with pytest.raises(StreamValidationError):
        decode_stream(encode_stream(s))


def test_csv_malformed_line_offset():
    data = b"x,y,t,p\n1,1,0,1\n1,1,x,1\n"
    with pytest.raises(EventFormatError) as e:
        decode_stream(data, "csv", 4, 4)
    assert e.value.offset == len(b"x,y,t,p\n1,1,0,1\n")


def test_csv_requires_header():
    with pytest.raises(EventFormatError):
        decode_stream(b"1,1,0,1\n", "csv", 4, 4)


def test_encode_rejects_wide_coordinates():
    s = EventStream(70000, 10, [66000], [0], [0], [1])
    with pytest.raises(EncodingError):
        encode_stream(s)


# --- validation ------------------------------------------------------------

def test_valid_stream_empty_report(rng):
    s = random_stream(rng, 50)
    report = validate_stream(s)
    assert report and len(report) == 0


def test_x_at_width_is_out_of_bounds():
    s = EventStream(10, 10, [3, 10, 2], [0, 0, 0], [0, 1, 2], [1, 1, 1])
    report = validate_stream(s)
    assert report.indices() == [1]
    assert report.issues[0][1].startswith("out_of_bounds")


def test_shuffled_timestamps_match_bruteforce_scan():
    rng = np.random.default_rng(7)
    for _ in range(50):
        t = rng.permutation(100) * 10
        s = EventStream(8, 8, np.zeros(100), np.zeros(100), t, np.ones(100))
        expected = [i for i in range(1, 100) if t[i] < t[i - 1]]
        assert validate_stream(s).indices("timestamp_decrease") == expected


def test_validation_lists_every_violation():
    s = EventStream(4, 4, [0, 9, 1], [0, 0, -1], [5, 3, 4], [1, 0, 1])
    got = sorted(validate_stream(s).issues)
    reasons = {(i, r.split(":")[0]) for i, r in got}
    assert reasons == {(1, "out_of_bounds"), (1, "bad_polarity"), (1, "timestamp_decrease"), (2, "out_of_bounds")}


def test_stream_is_immutable(rng):
    s = random_stream(rng, 10)
    with pytest.raises(ValueError):
        s.x[0] = 3
    arr = np.arange(3)
    EventStream(5, 5, arr, arr, arr, [1, 1, 1])
    arr[0] = 4  # caller's array stays writable


# --- slicing ---------------------------------------------------------------

def test_slice_empty_and_identity(rng):
    s = random_stream(rng, 100)
    assert len(slice_window(s, 500, 500)) == 0
    assert slice_window(s, 0, np.inf) == s


def test_slice_matches_linear_filter():
    rng = np.random.default_rng(3)
    for _ in range(200):
        s = random_stream(rng, int(rng.integers(0, 200)), t_max=5000)
        t0, t1 = sorted(rng.integers(0, 6000, 2))
        got = slice_window(s, int(t0), int(t1))
        keep = [i for i in range(len(s)) if t0 <= s.t[i] < t1]
        assert got == s.select(np.array(keep, dtype=np.int64))


def test_slice_partition_reconstructs(rng):
    s = random_stream(rng, 500, t_max=10_000)
    cuts = [0] + sorted(rng.integers(0, 10_000, 6).tolist()) + [10_000]
    parts = [slice_window(s, a, b) for a, b in zip(cuts[:-1], cuts[1:])]
    assert concat(parts) == s


def test_slice_rejects_reversed_window(rng):
    with pytest.raises(ValueError):
        slice_window(random_stream(rng, 5), 10, 5)


# --- synthesis -------------------------------------------------------------

def test_script_validation():
    with pytest.raises(ValueError):
        MotionScript("cyclic_horizontal", rate=0, noise_rate=0)
    with pytest.raises(ValueError):
        MotionScript("cyclic_horizontal", duration=0)
    with pytest.raises(ValueError):
        MotionScript("spin", 1.0)
    with pytest.raises(ValueError):
        MotionScript("discrete_arc", noise_rate=-1)


def test_synthetic_needs_32_pixels():
    with pytest.raises(ValueError):
        generate_synthetic(MotionScript("discrete_arc", 0.2, 1000), 31, 64)


def test_synthetic_count_near_rate():
    s = generate_synthetic(MotionScript("cyclic_horizontal", duration=1.0, rate=1000, seed=4))
    assert 800 <= len(s) <= 1200
    again = generate_synthetic(MotionScript("cyclic_horizontal", duration=1.0, rate=1000, seed=4))
    assert len(again) == len(s)


def test_synthetic_deterministic_bytes():
    script = MotionScript("discrete_linear", 0.5, 5000, 50, seed=11)
    assert encode_stream(generate_synthetic(script)) == encode_stream(generate_synthetic(script))
    other = MotionScript("discrete_linear", 0.5, 5000, 50, seed=12)
    assert encode_stream(generate_synthetic(other)) != encode_stream(generate_synthetic(script))


def test_synthetic_stream_valid():
    for pattern in ("cyclic_horizontal", "cyclic_vertical", "discrete_arc", "discrete_linear"):
        s = generate_synthetic(MotionScript(pattern, 0.5, 5000, 20, seed=1), 48, 40)
        assert validate_stream(s)
        assert s.t[0] == 0


def _centroid_track(s, axis_vals, bin_us=10_000):
    bins = s.t // bin_us
    out = []
    for b in np.unique(bins):
        out.append(axis_vals[bins == b].mean())
    return np.array(out)


def test_cyclic_horizontal_crosses_center():
    s = generate_synthetic(MotionScript("cyclic_horizontal", 2.0, 20000, 0, seed=5, period=0.5), 64, 64)
    cx = _centroid_track(s, s.x.astype(float))
    side = np.sign(cx - 31.5)
    side = side[side != 0]
    crossings = int((side[1:] != side[:-1]).sum())
    assert crossings >= 4


def test_discrete_stops_moving():
    truth = synthesize(MotionScript("discrete_linear", 2.0, 20000, 0, seed=2), 64, 64)
    c = truth.centroids
    late = truth.step_times > 0.7 * 2.0e6
    assert np.ptp(c[late], axis=0).max() < 1e-9
    assert np.ptp(c[~late], axis=0).max() > 5


def test_cyclic_repeats_with_period():
    truth = synthesize(MotionScript("cyclic_vertical", 2.0, 20000, 0, seed=9, period=0.5), 64, 64)
    step = truth.step_times[1] - truth.step_times[0]
    lag = int(round(0.5e6 / step))
    c = truth.centroids
    assert np.allclose(c[lag:], c[:-lag], atol=1e-6)


def test_event_io_alias():
    from evaction import event_io, neuralnet
    assert event_io.decode_stream is decode_stream and event_io.EventStream is EventStream
    assert neuralnet.Tensor.__module__ == "evaction.nn.tensor" and len(neuralnet.LAYER_KINDS) == 6
