"""Zinger outliers: weighted least squares versus the generalized Huber fidelity."""
import numpy as np

from mbirct.geometry import Geometry, uniform_angles
from mbirct.metrics import rmse
from mbirct.models import FidelityModel, PriorModel
from mbirct.optimizer import ReconOptions, mbir_reconstruct
from mbirct.projector import ProjectorSpec
from mbirct.simulator import CorruptionSpec, PhantomSpec, compute_weights, make_phantom, synthesize

truth = make_phantom(PhantomSpec("shepp_logan", (1, 128, 128)))
vs = truth.voxel_size
spec = ProjectorSpec(Geometry("parallel2d", 184, 1, vs), uniform_angles(45), (1, 128, 128), vs)
clean, _, _ = synthesize(truth, spec, CorruptionSpec(dose_I0=1e4, seed=1))
prior = PriorModel("qggmrf", sigma_x=0.1, beta_s=1e-4)

print(f"{'rate':>6} {'wls':>8} {'genhuber':>9} {'student-t':>9}")
for rate in (0.0, 0.005, 0.01, 0.02):
    counts, y, _ = synthesize(truth, spec, CorruptionSpec(dose_I0=1e4, seed=1, zinger_rate=rate,
                                                          zinger_amplitude=20 * clean.data.mean()))
    W = compute_weights(counts)
    sigma = 1 / np.sqrt(counts.data.mean())
    fids = [FidelityModel("wls"), FidelityModel("robust_genhuber", T=3.0, delta=0.5, sigma=sigma),
            FidelityModel("robust_student_t", nu=5.0, sigma=sigma)]
    errs = [rmse(mbir_reconstruct(y, W, spec, f, prior, ReconOptions(max_outer_iters=100)).x_hat, truth) for f in fids]
    print(f"{rate:6.3f} {errs[0]:8.4f} {errs[1]:9.4f} {errs[2]:9.4f}")
