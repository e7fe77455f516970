from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mbirct.geometry import (
    AngleSchedule, Geometry, beam_block_mask, bitrev, interlaced_angles, limited_angles,
    progressive_angles, uniform_angles,
)


@pytest.mark.parametrize("n, rng, expected", [
    (4, (0, 180), [0, 45, 90, 135]),
    (1, (0, 180), [0]),
    (3, (-60, 60), [-60, -20, 20]),
])
def test_uniform_grid(n, rng, expected):
    np.testing.assert_allclose(uniform_angles(n, rng).angles_deg, expected, atol=1e-12)


@pytest.mark.parametrize("n, lo, hi, expected", [
    (3, -60, 60, [-60, -20, 20]),
    (1, 0, 90, [0]),
    (2, -45, 45, [-45, 0]),
])
def test_limited_grid(n, lo, hi, expected):
    sched = limited_angles(n, lo, hi)
    assert sched.limited
    np.testing.assert_allclose(sched.angles_deg, expected, atol=1e-12)


def test_limited_rejects_full_range():
    with pytest.raises(ValueError):
        limited_angles(10, 0, 180)


def test_interlaced_two_by_two():
    s = interlaced_angles(2, 2)
    np.testing.assert_allclose(s.angles_deg[s.views_of_frame(0)], [0, 90])
    np.testing.assert_allclose(s.angles_deg[s.views_of_frame(1)], [45, 135])


def test_interlaced_bitrev_order():
    s = interlaced_angles(1, 4)
    got = [s.angles_deg[s.views_of_frame(k)].tolist() for k in range(4)]
    assert got == [[0.0], [90.0], [45.0], [135.0]]
    assert [bitrev(k, 2) for k in range(4)] == [0, 2, 1, 3]


def test_interlaced_single_frame_is_uniform():
    np.testing.assert_allclose(interlaced_angles(7, 1).angles_deg, uniform_angles(7).angles_deg)


def test_interlaced_requires_power_of_two():
    with pytest.raises(ValueError):
        interlaced_angles(4, 3)


@given(n=st.integers(1, 12), log_k=st.integers(0, 4))
def test_interlaced_union_is_dense_grid(n, log_k):
    k = 2**log_k
    s = interlaced_angles(n, k)
    # exact index arithmetic: every angle is a multiple of 180/(n k)
    idx = sorted(Fraction(a).limit_denominator(10**6) / Fraction(180, n * k) for a in s.angles_deg)
    assert idx == list(range(n * k))
    assert np.unique(s.angles_deg).size == s.n_views
    for f in range(k):
        a = s.angles_deg[s.views_of_frame(f)]
        assert np.all(np.diff(a) > 0)
        np.testing.assert_allclose(np.diff(a), 180.0 / n, atol=1e-12)


def test_progressive_frames_are_contiguous():
    s = progressive_angles(3, 4)
    np.testing.assert_allclose(s.angles_deg, uniform_angles(12).angles_deg)
    assert s.frame_of_view.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]


def test_beam_block_single_view():
    sched = uniform_angles(4)
    mask = beam_block_mask(sched, [(40, 50)], (4, 1, 8))
    assert not mask.keep[1].any()
    assert mask.keep[[0, 2, 3]].all()


def test_beam_block_empty():
    assert beam_block_mask(uniform_angles(4), [], (4, 1, 8)).keep.all()


def test_beam_block_mod_180():
    sched = AngleSchedule(np.array([0.0, 90.0, 190.0]))
    mask = beam_block_mask(sched, [(5, 15)], (3, 1, 2))
    assert mask.keep[:, 0, 0].tolist() == [True, True, False]


def test_schedule_csv_round_trip(tmp_path):
    s = interlaced_angles(3, 4)
    s.to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "angle_deg,frame"
    back = AngleSchedule.from_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.angles_deg, s.angles_deg)
    np.testing.assert_array_equal(back.frame_of_view, s.frame_of_view)
    assert back.n_frames == 4


@pytest.mark.parametrize("kwargs", [
    dict(kind="laminography", detector_channels=4, detector_rows=2, tilt_deg=0.0),
    dict(kind="laminography", detector_channels=4, detector_rows=2, tilt_deg=90.0),
    dict(kind="parallel2d", detector_channels=4, detector_rows=2),
    dict(kind="fan", detector_channels=4),
    dict(kind="parallel3d", detector_channels=4, detector_rows=2, tilt_deg=10.0),
])
def test_geometry_validation(kwargs):
    with pytest.raises(ValueError):
        Geometry(**kwargs)
