"""Time-resolved reconstruction of growing ellipses: view schedule and temporal prior."""
from mbirct.geometry import Geometry, interlaced_angles, progressive_angles
from mbirct.metrics import rmse
from mbirct.models import FidelityModel, PriorModel
from mbirct.optimizer import ReconOptions, mbir4d_reconstruct
from mbirct.projector import ProjectorSpec
from mbirct.simulator import CorruptionSpec, Ellipse, PhantomSpec, compute_weights, make_phantom, synthesize

N, FRAMES, VIEWS = 64, 4, 24
ellipses = (
    Ellipse((0, 0), (0.8, 0.7), 0, 0.3),
    Ellipse((0.3, 0.2), (0.15, 0.1), 30, 0.5, growth=0.3),
    Ellipse((-0.3, -0.3), (0.1, 0.2), 0, 0.4, growth=0.2),
)
truth = make_phantom(PhantomSpec("growing_ellipses", (1, N, N), ellipses, n_frames=FRAMES))
vs = truth.voxel_size

print(f"{'schedule':<12} {'beta_t':>8} {'rmse':>8}")
for name, build in (("interlaced", interlaced_angles), ("progressive", progressive_angles)):
    spec = ProjectorSpec(Geometry("parallel2d", 96, 1, vs), build(VIEWS, FRAMES), (1, N, N), vs)
    counts, y, _ = synthesize(truth, spec, CorruptionSpec(dose_I0=1e4, seed=3))
    W = compute_weights(counts)
    for beta_t in (0.0, 1e-5, 1e-4, 1e-3):
        prior = PriorModel("qggmrf", sigma_x=0.1, beta_s=1e-4, beta_t=beta_t)
        res = mbir4d_reconstruct(y, W, spec, FidelityModel("wls"), prior, ReconOptions())
        print(f"{name:<12} {beta_t:8.0e} {rmse(res.x_hat, truth):8.4f}")
