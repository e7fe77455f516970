"""Command-line pipeline: phantom -> simulate -> reconstruct -> metrics, plus sweeps.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .core import (
    ContainerError, Sinogram, Volume, WeightMap, read_container, render_pgm, write_container,
)
from .geometry import (
    AngleSchedule, Geometry, beam_block_mask, interlaced_angles, limited_angles,
    progressive_angles, repeated_angles, uniform_angles,
)
from .metrics import metric_report
from .models import FidelityModel, PriorModel
from .projector import ProjectorSpec, fbp
from .simulator import CorruptionSpec, Ellipse, PhantomSpec, compute_weights, make_phantom, synthesize

log = logging.getLogger("mbirct")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------- config -> objects

def phantom_spec_from(cfg: RunConfig) -> PhantomSpec:
    kind = cfg.require("phantom.kind")
    nx = cfg.get("phantom.nx")
    ny = cfg.get("phantom.ny", nx)
    ells = tuple(Ellipse((e[0], e[1]), (e[2], e[3]), e[4], e[5], e[6] if len(e) > 6 else 0.0)
                 for e in cfg.ellipses)
    if kind != "shepp_logan" and not ells:
        raise ConfigError(f"phantom.kind = {kind} needs at least one phantom.ellipse")
    return PhantomSpec(kind, (cfg.get("phantom.nz"), ny, nx), ells, cfg.get("phantom.n_frames"))


def default_voxel_size(image_dims) -> float:
    return 2.0 / max(image_dims[1], image_dims[2])


def schedule_from(cfg: RunConfig) -> AngleSchedule:
    kind = cfg.get("geometry.schedule")
    n_frames = cfg.get("phantom.n_frames")
    if kind == "uniform":
        return uniform_angles(cfg.get("geometry.n_views"), (cfg.get("geometry.range_lo"), cfg.get("geometry.range_hi")))
    if kind == "limited":
        return limited_angles(cfg.get("geometry.n_views"), cfg.get("geometry.range_lo"), cfg.get("geometry.range_hi"))
    builders = {"interlaced": interlaced_angles, "progressive": progressive_angles, "repeated": repeated_angles}
    if kind in builders:
        return builders[kind](cfg.require("geometry.views_per_frame"), n_frames)
    raise ConfigError(f"unknown geometry.schedule {kind!r}")


def projector_spec_from(cfg: RunConfig, image_dims, voxel_size: float | None = None) -> ProjectorSpec:
    nz, ny, nx = image_dims
    vs = voxel_size or cfg.get("geometry.voxel_size") or default_voxel_size(image_dims)
    pitch = cfg.get("geometry.channel_pitch") or vs
    n_ch = cfg.get("geometry.n_channels") or int(math.ceil(math.hypot(ny, nx) * vs / pitch)) + 2
    kind = cfg.get("geometry.kind")
    rows = cfg.get("geometry.n_rows") or nz
    tilt = cfg.get("geometry.tilt_deg") if kind == "laminography" else 0.0
    geom = Geometry(kind, n_ch, rows, pitch, tilt)
    return ProjectorSpec(geom, schedule_from(cfg), image_dims, vs, cfg.get("geometry.step_factor"))


def corruption_from(cfg: RunConfig) -> CorruptionSpec:
    keys = ("dose_I0", "view_gain_sigma", "view_offset", "channel_gain_sigma", "zinger_rate",
            "zinger_amplitude", "seed", "mode", "noise_sigma")
    return CorruptionSpec(**{k: cfg.get(f"corruption.{k}") for k in keys})


def fidelity_from(cfg: RunConfig) -> FidelityModel:
    kind = cfg.get("fidelity.kind")
    mode = cfg.get("calibration.mode")
    if kind == "wls_gain_offset" and mode == "none":
        mode = "per_view"
    return FidelityModel(kind, cfg.get("fidelity.T"), cfg.get("fidelity.delta"), cfg.get("fidelity.nu"),
                         cfg.get("fidelity.sigma"), mode)


def prior_from(cfg: RunConfig) -> PriorModel:
    return PriorModel(cfg.get("prior.kind"), cfg.get("prior.p"), cfg.get("prior.q"), cfg.get("prior.T"),
                      cfg.get("prior.sigma_x"), cfg.get("prior.beta_s"), cfg.get("prior.beta_t"))


def recon_options_from(cfg: RunConfig, threads=None):
    from .optimizer import ReconOptions

    keys = ("max_outer_iters", "stop_rel_cost", "stop_rel_x", "nonneg", "multires_levels", "multires_iters",
            "init", "calib_every", "seed", "robust_refresh")
    return ReconOptions(**{k: cfg.get(f"recon.{k}") for k in keys}, threads=threads)


# ---------------------------------------------------------------- helpers

def _window(cfg: RunConfig):
    lo, hi = cfg.get("output.window_lo"), cfg.get("output.window_hi")
    return (lo, hi) if lo is not None and hi is not None else None


def _write_previews(vol: Volume, stem: str, cfg: RunConfig) -> None:
    if not cfg.get("output.pgm"):
        return
    for t in range(vol.nt):
        render_pgm(vol.data[t, vol.data.shape[1] // 2], f"{stem}_t{t}.pgm", _window(cfg))


def _parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _apply_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg.values["corruption.seed"] = int(args.seed)
        cfg.values["recon.seed"] = int(args.seed)


def _set_threads(threads) -> None:
    if threads:
        import numba

        numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


def _num(v) -> str:
    return "nan" if v is None else repr(float(v))


def _image_meta(dims, vs) -> dict:
    return {"image_dims": ",".join(str(d) for d in dims), "image_voxel_size": repr(float(vs))}


# ---------------------------------------------------------------- commands

def cmd_phantom(cfg: RunConfig, out: str) -> Volume:
    spec = phantom_spec_from(cfg)
    vol = make_phantom(spec, cfg.get("geometry.voxel_size"))
    _parent(out)
    write_container(out, vol)
    stem = str(Path(out).with_suffix(""))
    _write_previews(vol, stem, cfg)
    cfg.write_resolved(stem + "_resolved.cfg")
    log.info("phantom %s dims=%s", out, vol.data.shape)
    return vol


def cmd_simulate(cfg: RunConfig, phantom_path: str, prefix: str) -> None:
    vol, _ = read_container(phantom_path)
    if not isinstance(vol, Volume):
        raise ContainerError(f"{phantom_path} is not a volume container")
    x = vol.data.astype(np.float64)
    image_dims = x.shape[1:]
    spec = projector_spec_from(cfg, image_dims, vol.voxel_size)
    nt_sched = spec.schedule.n_frames
    if x.shape[0] not in (1, nt_sched):
        raise ConfigError(f"phantom has {x.shape[0]} frames but the schedule has {nt_sched}")
    counts, sino, truth = synthesize(np.broadcast_to(x, (nt_sched,) + image_dims), spec, corruption_from(cfg))
    mask = None
    if cfg.get("geometry.blocked"):
        mask = beam_block_mask(spec.schedule, cfg.get("geometry.blocked"), spec.sino_shape)
    if counts is not None:
        weights = compute_weights(counts, mask)
    else:
        w = np.ones(spec.sino_shape)
        if mask is not None:
            w[~mask.keep] = 0.0
        weights = WeightMap(w)
    _parent(prefix + "_x")
    meta = _image_meta(image_dims, spec.voxel_size)
    if counts is not None:
        write_container(prefix + "_counts.sct", counts, meta)
    write_container(prefix + "_sino.sct", sino, meta)
    write_container(prefix + "_weights.sct", weights, meta)
    truth.to_csv(prefix + "_truth.csv")
    spec.schedule.to_csv(prefix + "_schedule.csv")
    cfg.write_resolved(prefix + "_resolved.cfg")
    log.info("simulated %s views, %d zingers", spec.sino_shape[0], len(truth.zingers))


def _load_data(cfg: RunConfig, prefix: str):
    sino, meta = read_container(prefix + "_sino.sct")
    weights, _ = read_container(prefix + "_weights.sct")
    schedule = AngleSchedule.from_csv(prefix + "_schedule.csv")
    if "image_dims" in meta:
        dims = tuple(int(v) for v in meta["image_dims"].split(","))
        vs = float(meta["image_voxel_size"])
    else:
        p = phantom_spec_from(cfg)
        dims, vs = p.dims, None
    spec = projector_spec_from(cfg, dims, vs).with_schedule(schedule)
    y = Sinogram(sino.data.astype(np.float64), kind="log_normalized")
    W = WeightMap(weights.data.astype(np.float64))
    if y.shape != spec.sino_shape:
        raise ConfigError(f"data shape {y.shape} does not match configured geometry {spec.sino_shape}")
    return y, W, spec


def _fbp_frames(y: Sinogram, spec: ProjectorSpec, filt: str) -> Volume:
    nt = spec.schedule.n_frames
    frames = []
    for t in range(nt):
        views = spec.schedule.views_of_frame(t)
        sub = spec.with_schedule(spec.schedule.subset(views))
        frames.append(fbp(Sinogram(y.data[views]), sub, filter=filt).data[0])
    return Volume(np.stack(frames), voxel_size=spec.voxel_size)


def cmd_reconstruct(cfg: RunConfig, prefix: str, algo: str, out_prefix: str, threads=None):
    from .optimizer import mbir4d_reconstruct, mbir_reconstruct

    y, W, spec = _load_data(cfg, prefix)
    _parent(out_prefix + "_x")
    result = None
    if algo == "fbp":
        if spec.geometry.kind == "laminography":
            raise ConfigError("fbp does not support laminography geometry")
        vol = _fbp_frames(y, spec, cfg.get("recon.fbp_filter"))
    elif algo in ("mbir", "mbir4d"):
        fid, prior, opts = fidelity_from(cfg), prior_from(cfg), recon_options_from(cfg, threads)
        if algo == "mbir":
            sched = spec.schedule
            flat = AngleSchedule(sched.angles_deg, None, 1, sched.limited)
            result = mbir_reconstruct(y, W, spec.with_schedule(flat), fid, prior, opts)
        else:
            result = mbir4d_reconstruct(y, W, spec, fid, prior, opts)
        vol = result.x_hat
        result.trace.to_csv(out_prefix + "_trace.csv")
        result.calib_hat.to_csv(out_prefix + "_calib.csv")
        with open(out_prefix + "_kkt.txt", "w") as fh:
            fh.write(f"kkt_initial={_num(result.kkt_initial)}\nkkt_final={_num(result.kkt_final)}\n"
                     f"iterations={result.iterations_run}\nstop_reason={result.stop_reason}\n")
    else:
        raise ConfigError(f"unknown algorithm {algo!r}")
    if not np.all(np.isfinite(vol.data)):
        raise FloatingPointError("reconstruction contains non-finite values")
    write_container(out_prefix + "_recon.sct", vol)
    _write_previews(vol, out_prefix + "_recon", cfg)
    cfg.write_resolved(out_prefix + "_resolved.cfg")
    return vol, result


def cmd_metrics(recon_path: str, truth_path: str, out: str):
    recon, _ = read_container(recon_path)
    truth, _ = read_container(truth_path)
    report = metric_report(recon.data.astype(np.float64), truth.data.astype(np.float64))
    _parent(out)
    stem = str(Path(out).with_suffix(""))
    report.to_csv(stem + ".csv")
    text = report.to_text()
    Path(stem + ".txt").write_text(text + "\n")
    return report


def _dedupe(values: list) -> list:
    seen, out = set(), []
    for v in values:
        key = float(v) if _is_number(v) else v
        if key in seen:
            warnings.warn(f"duplicate sweep value {v} ignored", stacklevel=2)
            log.warning("duplicate sweep value %s ignored", v)
            continue
        seen.add(key)
        out.append(v)
    return out


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def cmd_sweep(cfg: RunConfig, param: str, values: list, out_dir: str, algo: str = "mbir", threads=None):
    section, _, name = param.partition(".")
    cfg.set(param, values[0])  # validates the path before any work
    values = _dedupe([v.strip() for v in values if v.strip()])
    if all(_is_number(v) for v in values):
        values.sort(key=float)
    else:
        values.sort()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = RunConfig(dict(cfg.values), list(cfg.ellipses))
    cmd_phantom(base, str(out / "data" / "phantom.sct"))
    cmd_simulate(base, str(out / "data" / "phantom.sct"), str(out / "data" / "data"))
    rows = []
    for v in values:
        run_cfg = RunConfig(dict(base.values), list(base.ellipses))
        run_cfg.set(param, v)
        sub = out / f"{name}_{v}"
        sub.mkdir(exist_ok=True)
        vol, res = cmd_reconstruct(run_cfg, str(out / "data" / "data"), algo, str(sub / "run"), threads)
        rep = cmd_metrics(str(sub / "run_recon.sct"), str(out / "data" / "phantom.sct"), str(sub / "metrics.csv"))
        iters = res.iterations_run if res is not None else 0
        rows.append((v, rep.rmse, float(np.mean([r[4] for r in rep.rows])), iters))
    lines = [f"{param},rmse,ring_score,iterations"] + [f"{v},{r!r},{g!r},{i}" for v, r, g, i in rows]
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override corruption.seed and recon.seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: logical cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mbirct", description="Model-based CT reconstruction toolchain")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="rasterize a phantom volume")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize corrupted measurements")
    p.add_argument("--config", required=True)
    p.add_argument("--phantom", required=True)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("reconstruct", parents=[common], help="FBP or MBIR reconstruction")
    p.add_argument("--config", required=True)
    p.add_argument("--data-prefix", required=True)
    p.add_argument("--algo", choices=("fbp", "mbir", "mbir4d"), default="mbir")
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("metrics", parents=[common], help="compare a reconstruction with the truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", parents=[common], help="reconstruct over a list of parameter values")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--algo", choices=("fbp", "mbir", "mbir4d"), default="mbir")
    return parser


def _run(args) -> None:
    _set_threads(args.threads)
    if args.command == "metrics":
        cmd_metrics(args.recon, args.truth, args.out)
        return
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    if args.command == "phantom":
        cmd_phantom(cfg, args.out)
    elif args.command == "simulate":
        cmd_simulate(cfg, args.phantom, args.out_prefix)
    elif args.command == "reconstruct":
        cmd_reconstruct(cfg, args.data_prefix, args.algo, args.out_prefix, args.threads)
    elif args.command == "sweep":
        cmd_sweep(cfg, args.param, args.values.split(","), args.out_dir, args.algo, args.threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        _run(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, ContainerError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
