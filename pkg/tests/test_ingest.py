import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdnav.fields import FieldSequence, GridSpec, Trajectory, rasterize_sequence
from crowdnav.ingest import (
    DatasetWindow,
    IngestConfig,
    ParseError,
    format_canonical_csv,
    parse_atc_csv,
    parse_canonical_csv,
    window_dataset,
    window_sequence,
)
from crowdnav.sim import make_corpus, simulate

SPEC = GridSpec()


def test_atc_row_is_converted_to_si_units():
    (tr,) = parse_atc_csv(b"1000,5,2000,3000,0,1000,0.0,0.0\n")
    (s,) = tr.samples
    assert s.time == 1.0 and s.pid == 5
    assert s.pos == (2.0, 3.0)
    assert s.vel == pytest.approx((1.0, 0.0))


def test_atc_motion_angle_sets_velocity_direction():
    (tr,) = parse_atc_csv("0,1,0,0,0,2000,1.5707963267948966,0\n")
    assert tr.vel[0] == pytest.approx([0.0, 2.0], abs=1e-12)


def test_atc_empty_input():
    assert parse_atc_csv(b"") == []


def test_atc_non_numeric_field_names_line():
    with pytest.raises(ParseError, match="line 2") as err:
        parse_atc_csv(b"1000,5,2000,3000,0,1000,0,0\n1000,x,2000,3000,0,1000,0,0\n")
    assert err.value.line == 2


def test_atc_wrong_column_count():
    with pytest.raises(ParseError, match="8 fields"):
        parse_atc_csv(b"1,2,3\n")


def test_atc_filters_speed_crop_and_time():
    rows = "\n".join(
        [
            "0,1,1000,1000,0,1000,0,0",
            "0,2,1000,1000,0,9000,0,0",  # 9 m/s
            "0,3,50000,1000,0,1000,0,0",  # outside crop
            "5000,4,1000,1000,0,1000,0,0",  # outside time range
        ]
    )
    trajs = parse_atc_csv(rows, max_speed=5.0, crop=(0, 0, 10, 10), time_range=(0, 2))
    assert [t.pid for t in trajs] == [1]


def test_canonical_round_trip_of_simulated_corpus():
    trajs = simulate(make_corpus("crossing", 2, duration=30.0)[0])
    back = parse_canonical_csv(format_canonical_csv(trajs))
    assert [t.pid for t in back] == [t.pid for t in trajs]
    for a, b in zip(trajs, back):
        np.testing.assert_allclose(b.t, a.t, atol=1e-6)
        np.testing.assert_allclose(b.pos, a.pos, atol=1e-6)
        np.testing.assert_allclose(b.vel, a.vel, atol=1e-6)


def test_canonical_missing_header():
    with pytest.raises(ParseError, match="header"):
        parse_canonical_csv(b"0,1,2,3,4,5\n")


def test_canonical_rows_are_sorted_by_time():
    text = "time,pid,x,y,vx,vy\n2,7,3,0,0,0\n0,7,1,0,0,0\n1,7,2,0,0,0\n"
    (tr,) = parse_canonical_csv(text)
    order = np.argsort([2.0, 0.0, 1.0])
    np.testing.assert_array_equal(tr.t, np.array([2.0, 0.0, 1.0])[order])
    np.testing.assert_array_equal(tr.pos[:, 0], np.array([3.0, 1.0, 2.0])[order])


def test_canonical_header_only_is_empty():
    assert parse_canonical_csv("time,pid,x,y,vx,vy\n") == []


@settings(max_examples=80, deadline=None)
@given(st.binary(max_size=200))
def test_parsers_either_succeed_or_raise_located_error(data):
    for parse in (parse_atc_csv, parse_canonical_csv):
        try:
            out = parse(data)
        except ParseError as exc:
            assert exc.line is None or exc.line >= 1
        else:
            assert isinstance(out, list)


def _walker(n_frames: int) -> list[Trajectory]:
    t = np.arange(float(n_frames))
    return [Trajectory(0, t, np.column_stack([1.5 + t, np.full(n_frames, 5.5)]), np.tile([1.0, 0.0], (n_frames, 1)))]


def test_window_count_with_stride():
    windows = window_dataset(_walker(30), IngestConfig(SPEC, k=10, tau=10, stride=5))
    assert len(windows) == 3
    assert [w.input.start_index for w in windows] == [0, 5, 10]


def test_single_window_at_boundary():
    assert len(window_dataset(_walker(20), IngestConfig(SPEC, k=10, tau=10, stride=1))) == 1
    assert window_dataset(_walker(19), IngestConfig(SPEC, k=10, tau=10, stride=1)) == []


def test_empty_scene_has_no_windows():
    seq = FieldSequence(SPEC, np.zeros((40, 12, 36, 4)))
    assert window_sequence(seq, 10, 10) == []
    assert window_dataset([], IngestConfig(SPEC)) == []


def test_windows_equal_slices_of_full_sequence():
    trajs = simulate(make_corpus("corridor_bidirectional", 5, duration=40.0)[0])
    cfg = IngestConfig(SPEC, k=4, tau=3, stride=2)
    windows = window_dataset(trajs, cfg, t0=0.0)
    full = rasterize_sequence(trajs, SPEC, 0.0, 40)
    assert windows
    for w in windows:
        a = w.input.start_index
        assert w.input.data.tobytes() == full.slice(a, a + 4).data.tobytes()
        assert w.target.data.tobytes() == full.slice(a + 4, a + 7).data.tobytes()


def test_max_speed_filter_drops_fast_samples():
    t = np.arange(25.0)
    fast = Trajectory(1, t, np.tile([20.5, 2.5], (25, 1)), np.tile([9.0, 0.0], (25, 1)))
    windows = window_dataset(_walker(25) + [fast], IngestConfig(SPEC, k=10, tau=10, max_speed=5.0))
    assert all(w.target.data[:, 2, 20, 0].max() == 0 for w in windows)


def test_window_must_be_contiguous():
    seq = FieldSequence(SPEC, np.zeros((10, 12, 36, 4)))
    with pytest.raises(ValueError):
        DatasetWindow(seq.slice(0, 3), seq.slice(4, 6))


def test_ingest_config_validation():
    with pytest.raises(ValueError):
        IngestConfig(SPEC, k=0)
    with pytest.raises(ValueError):
        IngestConfig(SPEC, stride=0)
