"""MBIR versus FBP on sparse-view Shepp-Logan data (45 and 180 views)."""
import argparse

from mbirct.geometry import Geometry, uniform_angles
from mbirct.metrics import rmse
from mbirct.models import FidelityModel, PriorModel
from mbirct.optimizer import ReconOptions, mbir_reconstruct
from mbirct.projector import ProjectorSpec, fbp
from mbirct.simulator import CorruptionSpec, PhantomSpec, compute_weights, make_phantom, synthesize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--dose", type=float, default=1e4)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    truth = make_phantom(PhantomSpec("shepp_logan", (1, args.size, args.size)))
    vs = truth.voxel_size
    n_ch = int(1.44 * args.size)
    prior = PriorModel("qggmrf", sigma_x=0.1, beta_s=1e-4)
    print(f"{'views':>5} {'FBP':>8} {'MBIR':>8} {'sweeps':>6}")
    for views in (45, 90, 180):
        spec = ProjectorSpec(Geometry("parallel2d", n_ch, 1, vs), uniform_angles(views), truth.data.shape[1:], vs)
        counts, y, _ = synthesize(truth, spec, CorruptionSpec(dose_I0=args.dose, seed=args.seed))
        res = mbir_reconstruct(y, compute_weights(counts), spec, FidelityModel("wls"), prior,
                               ReconOptions(init="fbp"))
        print(f"{views:>5} {rmse(fbp(y, spec), truth):8.4f} {rmse(res.x_hat, truth):8.4f} {res.iterations_run:>6}")


if __name__ == "__main__":
    main()
