import warnings

import numpy as np
import pytest

from conftest import parallel_spec
from mbirct.core import Sinogram, Volume, WeightMap
from mbirct.geometry import interlaced_angles
from mbirct.models import (
    CalibrationState, FidelityModel, PriorModel, eval_cost, laplacian_matrix,
)
from mbirct.optimizer import (
    ReconOptions, downsample, kkt_residual, mbir4d_reconstruct, mbir_reconstruct, multires_init, upsample,
)
from mbirct.projector import forward_project_array, system_matrix
from mbirct.simulator import CorruptionSpec, Ellipse, PhantomSpec, compute_weights, make_phantom, synthesize

TIGHT = dict(stop_rel_cost=1e-15, stop_rel_x=1e-13)


def _tiny(rng, n=8, views=12, nch=16):
    x = make_phantom(PhantomSpec("shepp_logan", (1, n, n)))
    spec = parallel_spec(n, views, nch, voxel_size=x.voxel_size)
    p = forward_project_array(x, spec)
    return x, spec, Sinogram(p + rng.normal(0, 0.01, p.shape))


def _dense_solution(spec, y, W, prior):
    A = system_matrix(spec).toarray()
    L = laplacian_matrix((1,) + spec.image_dims, prior) / prior.sigma_x**2
    w = W.data.ravel()
    return np.linalg.solve(A.T @ (w[:, None] * A) + L, A.T @ (w * y.data.ravel()))


def test_quadratic_matches_normal_equations(rng):
    _, spec, y = _tiny(rng)
    W = WeightMap(rng.uniform(0.5, 1.5, y.shape))
    prior = PriorModel("quadratic", sigma_x=1.0, beta_s=0.3)
    res = mbir_reconstruct(y, W, spec, FidelityModel("wls"), prior,
                           ReconOptions(max_outer_iters=3000, nonneg=False, **TIGHT))
    ref = _dense_solution(spec, y, W, prior)
    assert np.max(np.abs(res.x_hat.data.ravel() - ref)) <= 1e-6
    assert res.kkt_final <= 1e-6


def test_zero_data_fixed_point():
    spec = parallel_spec(8, 6, 12)
    y = Sinogram(np.zeros(spec.sino_shape))
    res = mbir_reconstruct(y, WeightMap.ones_like(y), spec, FidelityModel(), PriorModel(), ReconOptions())
    assert not res.x_hat.data.any()
    assert res.iterations_run == 1 and res.converged


@pytest.mark.parametrize("fid", [FidelityModel("wls"), FidelityModel("robust_genhuber", T=1.0, delta=0.3),
                                 FidelityModel("robust_student_t", nu=2.0),
                                 FidelityModel("wls_gain_offset", gain_offset_mode="per_view")])
@pytest.mark.parametrize("prior", [PriorModel("quadratic", sigma_x=0.2, beta_s=0.05),
                                   PriorModel("qggmrf", sigma_x=0.2, beta_s=0.05)])
def test_monotone_descent_and_residual(rng, fid, prior):
    x, spec, _ = _tiny(rng, 16, 10, 26)
    c = CorruptionSpec(dose_I0=2e3, view_gain_sigma=0.05, zinger_rate=0.01, zinger_amplitude=2e3, seed=3)
    counts, y, _ = synthesize(x, spec, c)
    W = compute_weights(counts)
    res = mbir_reconstruct(y, W, spec, fid, prior, ReconOptions(max_outer_iters=25, init="fbp", **TIGHT))
    totals = res.trace.totals
    assert np.all(np.diff(totals) <= 1e-9 * np.abs(totals[:-1]))
    assert res.residual_drift <= 1e-4 * np.abs(y.data).max()


def test_per_voxel_refresh_is_monotone(rng):
    x, spec, _ = _tiny(rng, 16, 10, 26)
    counts, y, _ = synthesize(x, spec, CorruptionSpec(dose_I0=2e3, zinger_rate=0.02, zinger_amplitude=2e3, seed=5))
    res = mbir_reconstruct(y, compute_weights(counts), spec, FidelityModel("robust_genhuber"),
                           PriorModel(sigma_x=0.2, beta_s=0.05),
                           ReconOptions(max_outer_iters=15, robust_refresh="per_voxel", **TIGHT))
    totals = res.trace.totals
    assert np.all(np.diff(totals) <= 1e-9 * np.abs(totals[:-1]))


def test_seeded_runs_are_bit_identical(rng):
    _, spec, y = _tiny(rng)
    args = (y, WeightMap.ones_like(y), spec, FidelityModel(), PriorModel(sigma_x=0.3, beta_s=0.1))
    a = mbir_reconstruct(*args, ReconOptions(max_outer_iters=10, seed=4, threads=1))
    b = mbir_reconstruct(*args, ReconOptions(max_outer_iters=10, seed=4, threads=1))
    np.testing.assert_array_equal(a.x_hat.data, b.x_hat.data)
    assert a.trace.values == b.trace.values


def test_thread_count_does_not_change_trace(rng):
    _, spec, y = _tiny(rng)
    args = (y, WeightMap.ones_like(y), spec, FidelityModel(), PriorModel(sigma_x=0.3, beta_s=0.1))
    t1 = mbir_reconstruct(*args, ReconOptions(max_outer_iters=10, threads=1)).trace.totals
    t4 = mbir_reconstruct(*args, ReconOptions(max_outer_iters=10, threads=4)).trace.totals
    np.testing.assert_allclose(t4, t1, rtol=1e-6)


def test_scale_consistency_without_prior(rng):
    _, spec, y = _tiny(rng)
    W = WeightMap.ones_like(y)
    opts = ReconOptions(max_outer_iters=50, **TIGHT)
    prior = PriorModel(beta_s=0.0)
    a = mbir_reconstruct(y, W, spec, FidelityModel(), prior, opts).x_hat.data
    b = mbir_reconstruct(Sinogram(3.0 * y.data), W, spec, FidelityModel(), prior, opts).x_hat.data
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-9, atol=1e-12)


def test_four_d_with_zero_beta_t_decouples(rng):
    spec = parallel_spec(8, 8, 14, angles=interlaced_angles(4, 2))
    x = rng.random((2, 1, 8, 8))
    y = Sinogram(forward_project_array(x, spec) + rng.normal(0, 0.01, spec.sino_shape))
    W = WeightMap(rng.uniform(0.5, 1.5, y.shape))
    prior = PriorModel(sigma_x=0.3, beta_s=0.2, beta_t=0.0)
    opts = ReconOptions(max_outer_iters=12, seed=9, threads=1, **TIGHT)
    joint = mbir4d_reconstruct(y, W, spec, FidelityModel(), prior, opts)
    assert joint.x_hat.nt == 2
    for f in range(2):
        views = spec.schedule.views_of_frame(f)
        sub = spec.with_schedule(spec.schedule.subset(views))
        solo = mbir_reconstruct(Sinogram(y.data[views]), WeightMap(W.data[views]), sub, FidelityModel(), prior, opts)
        np.testing.assert_array_equal(joint.x_hat.data[f], solo.x_hat.data[0])


def test_four_d_static_consensus(rng):
    n = 16
    x = make_phantom(PhantomSpec("growing_ellipses", (1, n, n), (Ellipse((0, 0), (0.5, 0.3), 20, 1.0, 0.0),), 4))
    spec = parallel_spec(n, 16, 26, voxel_size=x.voxel_size, angles=interlaced_angles(4, 4))
    y = Sinogram(forward_project_array(x, spec))
    res = mbir4d_reconstruct(y, WeightMap.ones_like(y), spec, FidelityModel(),
                             PriorModel(sigma_x=0.2, beta_s=0.01, beta_t=1e4),
                             ReconOptions(max_outer_iters=60))
    frames = res.x_hat.data
    for f in range(1, 4):
        assert np.sqrt(np.mean((frames[f] - frames[0]) ** 2)) <= 1e-3


def test_four_d_single_frame_schedule():
    from mbirct.geometry import AngleSchedule

    sched = AngleSchedule(np.array([0.0, 90.0]), np.array([0, 0]), 1)
    spec = parallel_spec(8, angles=sched)
    y = Sinogram(np.zeros(spec.sino_shape))
    res = mbir4d_reconstruct(y, WeightMap.ones_like(y), spec, FidelityModel(), PriorModel(), ReconOptions())
    assert res.x_hat.nt == 1


def test_gain_offset_gauge_maintained(rng):
    x, spec, _ = _tiny(rng, 16, 10, 26)
    c = CorruptionSpec(dose_I0=1e5, view_gain_sigma=0.05, seed=2)
    counts, y, _ = synthesize(x, spec, c)
    res = mbir_reconstruct(y, compute_weights(counts), spec, FidelityModel("wls_gain_offset"),
                           PriorModel(sigma_x=0.2, beta_s=0.01), ReconOptions(max_outer_iters=20))
    assert abs(np.mean(np.log(res.calib_hat.view_gains))) <= 1e-12


# ---------------------------------------------------------------- multiresolution

def test_down_up_constant_identity():
    c = np.full((1, 1, 16, 16), 2.5)
    np.testing.assert_allclose(upsample(downsample(c), (16, 16)), c, rtol=0, atol=1e-15)


def test_multires_single_level_is_plain_init(rng):
    _, spec, y = _tiny(rng)
    W = WeightMap.ones_like(y)
    for init in ("zero", "fbp"):
        opts = ReconOptions(init=init, multires_levels=1)
        out = multires_init(y, W, spec, FidelityModel(), PriorModel(), opts).data
        if init == "zero":
            assert not out.any()
        else:
            assert out.max() > 0


def test_multires_odd_grid_warns(rng):
    x = make_phantom(PhantomSpec("shepp_logan", (1, 9, 9)))
    spec = parallel_spec(9, 6, 16, voxel_size=x.voxel_size)
    y = Sinogram(forward_project_array(x, spec))
    with pytest.warns(UserWarning):
        multires_init(y, WeightMap.ones_like(y), spec, FidelityModel(), PriorModel(),
                      ReconOptions(multires_levels=2))


def test_multires_beats_zero_init_at_equal_iterations():
    n = 128
    x = make_phantom(PhantomSpec("shepp_logan", (1, n, n)))
    spec = parallel_spec(n, 45, 184, voxel_size=x.voxel_size)
    counts, y, _ = synthesize(x, spec, CorruptionSpec(dose_I0=1e4, seed=1))
    W = compute_weights(counts)
    fid, prior = FidelityModel(), PriorModel(sigma_x=0.1, beta_s=1e-4)
    zero = mbir_reconstruct(y, W, spec, fid, prior, ReconOptions(max_outer_iters=6, compute_kkt=False, **TIGHT))
    multi = mbir_reconstruct(y, W, spec, fid, prior,
                             ReconOptions(max_outer_iters=3, multires_levels=2, multires_iters=3,
                                          compute_kkt=False, **TIGHT))
    assert multi.trace.totals[-1] <= zero.trace.totals[-1]


# ---------------------------------------------------------------- KKT

def test_kkt_zero_at_active_boundary():
    spec = parallel_spec(8, 6, 12)
    y = Sinogram(-np.ones(spec.sino_shape))  # gradient at x = 0 is A^T 1 > 0
    r = kkt_residual(np.zeros((1, 1, 8, 8)), None, y, WeightMap.ones_like(y), FidelityModel(),
                     PriorModel(beta_s=0.0), spec)
    assert r == 0.0


def test_kkt_drops_during_solve(rng):
    _, spec, y = _tiny(rng)
    res = mbir_reconstruct(y, WeightMap.ones_like(y), spec, FidelityModel(), PriorModel(sigma_x=0.3, beta_s=0.1),
                           ReconOptions(max_outer_iters=400, stop_rel_cost=1e-12, stop_rel_x=1e-9))
    assert res.kkt_final <= 1e-3 * res.kkt_initial


def test_options_validation():
    with pytest.raises(ValueError):
        ReconOptions(init="random")
    with pytest.raises(ValueError):
        ReconOptions(max_outer_iters=0)
