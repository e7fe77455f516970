import numpy as np
import pytest

from conftest import parallel_spec
from mbirct.core import Sinogram
from mbirct.geometry import AngleSchedule, MeasurementMask, interlaced_angles
from mbirct.projector import forward_project_array
from mbirct.simulator import (
    CorruptionSpec, Ellipse, PhantomSpec, compute_weights, make_phantom, synthesize,
)


def test_shepp_logan_range():
    x = make_phantom(PhantomSpec("shepp_logan", (1, 64, 64)))
    assert x.data.min() >= 0.0 and x.data.max() <= 1.0
    assert x.data.max() == 1.0
    assert x.voxel_size == pytest.approx(2 / 64)


def test_covering_ellipse_gives_ones():
    x = make_phantom(PhantomSpec("ellipses", (1, 16, 16), (Ellipse((0, 0), (5, 5)),)))
    np.testing.assert_array_equal(x.data, 1.0)


def test_zero_growth_frames_identical():
    spec = PhantomSpec("growing_ellipses", (1, 32, 32), (Ellipse((0.1, 0), (0.3, 0.2), 20, 1.0, 0.0),), 4)
    x = make_phantom(spec)
    assert x.nt == 4
    for t in range(1, 4):
        np.testing.assert_array_equal(x.data[t], x.data[0])


def test_growth_frame_matches_static_build():
    e = Ellipse((0.1, -0.1), (0.2, 0.3), 30, 1.0, 0.25)
    moving = make_phantom(PhantomSpec("growing_ellipses", (1, 32, 32), (e,), 3))
    static = make_phantom(PhantomSpec("ellipses", (1, 32, 32), (Ellipse((0.1, -0.1), (0.3, 0.45), 30, 1.0),)))
    np.testing.assert_array_equal(moving.data[2], static.data[0])
    spec = parallel_spec(32, 5, 48, voxel_size=moving.voxel_size)
    np.testing.assert_array_equal(forward_project_array(moving.data[2:3], spec),
                                  forward_project_array(static.data, spec))


def _small_setup(n=64, views=30):
    x = make_phantom(PhantomSpec("shepp_logan", (1, n, n)))
    spec = parallel_spec(n, views, int(n * 1.5), voxel_size=x.voxel_size)
    return x, spec


def test_high_dose_limit():
    x, spec = _small_setup()
    _, log_norm, truth = synthesize(x, spec, CorruptionSpec(dose_I0=1e8, seed=4))
    p = forward_project_array(x, spec)
    assert np.sqrt(np.mean((log_norm.data - p) ** 2)) <= 1e-3
    assert truth.zingers == []


def test_same_seed_is_bit_identical():
    x, spec = _small_setup(32, 8)
    c = CorruptionSpec(view_gain_sigma=0.05, view_offset=3.0, channel_gain_sigma=0.02, zinger_rate=0.02,
                       zinger_amplitude=500.0, seed=11)
    a, b = synthesize(x, spec, c), synthesize(x, spec, c)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)
    assert a[2].zingers == b[2].zingers


def test_different_seed_changes_zingers():
    x, spec = _small_setup(32, 8)
    z = [synthesize(x, spec, CorruptionSpec(zinger_rate=0.05, zinger_amplitude=100.0, seed=s))[2].zingers
         for s in (1, 2)]
    assert z[0] != z[1]


def test_zinger_count_binomial():
    x, spec = _small_setup(64, 45)
    spec = parallel_spec(64, 45, 128, voxel_size=x.voxel_size)
    _, _, truth = synthesize(x, spec, CorruptionSpec(zinger_rate=0.01, zinger_amplitude=1e3, seed=7))
    m = 45 * 128
    assert abs(len(truth.zingers) - 0.01 * m) <= 3 * np.sqrt(m * 0.01 * 0.99)


def test_open_beam_counts_mean():
    spec = parallel_spec(8, 200, 12)
    counts, _, _ = synthesize(np.zeros((1, 1, 8, 8)), spec, CorruptionSpec(dose_I0=500.0, seed=2))
    n = counts.data.size
    assert abs(counts.data.mean() - 500.0) <= 3 * np.sqrt(500.0 / n)


def test_linear_mode_offsets():
    x, spec = _small_setup(32, 6)
    c = CorruptionSpec(mode="linear", channel_gain_sigma=0.05, seed=3)
    counts, y, truth = synthesize(x, spec, c)
    assert counts is None
    p = forward_project_array(x, spec)
    np.testing.assert_allclose(y.data - p, np.broadcast_to(-np.log(truth.channel_gains), p.shape), atol=1e-12)


def test_truth_csv(tmp_path):
    x, spec = _small_setup(16, 4)
    _, _, truth = synthesize(x, spec, CorruptionSpec(zinger_rate=0.1, zinger_amplitude=10.0, seed=1))
    truth.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "kind,index0,index1,index2,value"
    assert sum(line.startswith("zinger,") for line in lines) == len(truth.zingers)
    assert sum(line.startswith("channel_offset,") for line in lines) == spec.sino_shape[2]


def test_weights_equal_counts():
    w = compute_weights(Sinogram(np.full((3, 1, 4), 7.0), kind="counts"))
    np.testing.assert_array_equal(w.data, 1.0)


def test_weights_normalization_example():
    w = compute_weights(Sinogram(np.array([[1.0, 4.0]]), kind="counts"))
    np.testing.assert_allclose(w.data.ravel(), [0.4, 1.6])


def test_masked_view_weights_zero():
    keep = np.ones((3, 1, 4), dtype=bool)
    keep[1] = False
    w = compute_weights(Sinogram(np.full((3, 1, 4), 9.0), kind="counts"), MeasurementMask(keep))
    assert not w.data[1].any()
    np.testing.assert_array_equal(w.data[[0, 2]], 1.0)


def test_negative_phantom_rejected(small_spec):
    with pytest.raises(ValueError):
        synthesize(-np.ones((1, 1, 8, 8)), small_spec, CorruptionSpec())


def test_four_d_synthesis_uses_frame_volumes():
    spec = parallel_spec(16, 4, 24, angles=interlaced_angles(2, 2))
    x = np.zeros((2, 1, 16, 16))
    x[1] = 1.0
    _, y, _ = synthesize(x, spec, CorruptionSpec(mode="linear"))
    frame = spec.schedule.frame_of_view
    assert not y.data[frame == 0].any()
    assert y.data[frame == 1].max() > 0
