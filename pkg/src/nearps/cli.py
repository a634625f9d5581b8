"""Command line entry point: ``nearps <subcommand> ...``.

Exit status is 0 on success, 1 on a domain error (reported on one line as
``error[<subcommand>]: <message>``) and 2 on a usage error. Every subcommand
that writes files also writes ``manifest.json`` beside them.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import DomainError

THREADS_ENV = "NEARPS_THREADS"


def _manifest(path, command, args, extra=None):
    import scipy

    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    data = {
        "command": command,
        "flags": flags,
        "seed": flags.get("seed"),
        "versions": {"nearps": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }
    if extra:
        data.update(extra)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _lights(spec):
    from .io import load_calibration
    from .scenes import LIGHT_RIGS

    if spec in LIGHT_RIGS:
        return LIGHT_RIGS[spec]()
    return load_calibration(spec).lights


def cmd_render(args):
    from .calibration import CalibrationFile
    from .io import save_dataset, write_png16
    from .renderer import GlobalIllumApprox, Material, QuantizationSpec, render_scene
    from .scenes import DEFAULT_CAMERA, SCENES, calibration_captures, calibration_rig

    out = _out_dir(args.out)
    quant = QuantizationSpec(args.levels)
    if args.scene == "planes":
        lights = calibration_rig(args.seed) if args.lights is None else _lights(args.lights)
        cam = DEFAULT_CAMERA
        distances = tuple(args.plane_distances)
        poses = calibration_captures(cam, lights, distances=distances, stride=1,
                                     levels=args.levels, seed=args.seed)
        for k, pose in enumerate(poses):
            d = _out_dir(os.path.join(out, f"pose_{k}"))
            for m in range(len(lights)):
                write_png16(os.path.join(d, f"light_{m:03d}.png"), pose.observed[m].reshape(cam.shape + (3,)))
        with open(os.path.join(out, "planes.json"), "w") as f:
            json.dump([{"point": [0.0, 0.0, float(z)], "normal": [0.0, 0.0, -1.0]} for z in distances],
                      f, indent=2)
            f.write("\n")
        with open(os.path.join(out, "calib_true.txt"), "w") as f:
            f.write(CalibrationFile(cam, lights).dumps())
        _manifest(os.path.join(out, "manifest.json"), "render", args)
        return 0

    scene = SCENES[args.scene]()
    lights = _lights(args.lights or "ring15")
    material = Material(tuple(args.albedo), args.specular, args.shininess)
    gi = None
    if args.shadow_prob or args.ambient:
        gi = GlobalIllumApprox(args.shadow_prob, args.ambient)
    images = render_scene(scene.camera, scene.depth, scene.normals, material, lights,
                          gi=gi, quant=quant, seed=args.seed)
    calib = CalibrationFile(scene.camera, lights)
    save_dataset(out, images, scene.depth.mask, calib, scene.depth, scene.normals,
                 meta={"scene": args.scene, "mean_distance": scene.mean_distance})
    _manifest(os.path.join(out, "manifest.json"), "render", args)
    return 0


def _sampler_options(args):
    from .renderer import QuantizationSpec
    from .sampler import SamplerOptions

    return SamplerOptions(materials=args.materials, global_illumination=not args.no_gi,
                          quantization=QuantizationSpec(1024) if not args.no_quant else None,
                          d=args.d)


def _sampler_mode(args):
    from .io import load_calibration

    return "general" if args.mode == "general" else load_calibration(args.mode)


def cmd_sample(args):
    from .sampler import PerturbationSpec, record_stream, write_archive

    spec = PerturbationSpec.zero() if args.no_perturb else PerturbationSpec()
    stream = record_stream(args.seed, _sampler_mode(args), spec, _sampler_options(args), count=args.count)
    write_archive(args.out, stream, d=args.d)
    _manifest(args.out + ".manifest.json", "sample", args)
    return 0


def cmd_train(args):
    from .regressor.network import Architecture, CompactNet, save_checkpoint
    from .regressor.training import RecordBank, bank_from_stream, train
    from .sampler import PerturbationSpec, read_archive, record_stream

    if args.data:
        maps, targets = read_archive(args.data)
        bank = RecordBank.from_maps(maps, targets)
    else:
        spec = PerturbationSpec.zero() if args.no_perturb else PerturbationSpec()
        count = args.records or args.steps * args.batch
        bank = bank_from_stream(record_stream(args.seed, _sampler_mode(args), spec, _sampler_options(args)),
                                count)
    net = CompactNet(Architecture(d=bank.d), seed=args.seed)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    result = train(net, bank, args.steps, args.batch, seed=args.seed, lr=args.lr, log=log)
    save_checkpoint(net, args.out)
    _manifest(args.out + ".manifest.json", "train", args,
              {"loss_curve_deg": [float(np.degrees(v)) for v in result.loss_curve]})
    return 0


def cmd_reconstruct(args):
    from .integrator import IntegratorConfig
    from .io import load_calibration, load_dataset, write_mask, write_pfm
    from .pipeline import ReconstructionConfig, naive_reconstruct, reconstruct

    data = load_dataset(args.data)
    calib = load_calibration(args.calib) if args.calib else data.calib
    mean_distance = args.mean_distance
    if mean_distance is None:
        if not data.meta or "mean_distance" not in data.meta:
            raise DomainError("mean distance unknown: pass --mean-distance or provide scene.json")
        mean_distance = float(data.meta["mean_distance"])
    cfg = ReconstructionConfig(mean_distance=mean_distance, iterations=args.iters,
                               regressor=args.regressor, integrator=IntegratorConfig(lam=args.lam), d=args.d)
    run = naive_reconstruct if args.naive else reconstruct
    rec = run(data.images, data.mask, calib, cfg)
    out = _out_dir(args.out)
    write_pfm(os.path.join(out, "depth.pfm"), rec.depth.values)
    write_pfm(os.path.join(out, "normals.pfm"), rec.normals.values)
    write_pfm(os.path.join(out, "normals_nfs.pfm"), rec.normals_from_depth.values)
    write_mask(os.path.join(out, "mask.png"), rec.depth.mask & rec.normals.mask)
    history = [{"iteration": i + 1, "normal_change_deg": h.normal_change_deg}
               for i, h in enumerate(rec.history)]
    _manifest(os.path.join(out, "manifest.json"), "reconstruct", args, {"history": history})
    return 0


def _load_prediction(path):
    from .geometry import DepthMap, NormalMap
    from .io import read_mask, read_pfm

    mask = read_mask(os.path.join(path, "mask.png"))
    z = read_pfm(os.path.join(path, "depth.pfm")).astype(np.float64)
    n = read_pfm(os.path.join(path, "normals.pfm")).astype(np.float64)
    nfs = read_pfm(os.path.join(path, "normals_nfs.pfm")).astype(np.float64)

    def normal_map(v):
        norm = np.linalg.norm(v, axis=-1)
        ok = mask & (norm > 0.5)
        return NormalMap(np.where(ok[..., None], v / np.where(ok, norm, 1.0)[..., None], 0.0), ok)

    return DepthMap(z, mask & (z > 0)), normal_map(n), normal_map(nfs)


def cmd_evaluate(args):
    from .io import load_dataset
    from .pipeline import evaluate

    gt = load_dataset(args.gt)
    if gt.gt_depth is None or gt.gt_normals is None:
        raise DomainError(f"{args.gt} has no ground-truth depth and normals")
    depth, normals, nfs = _load_prediction(args.pred)
    rep = evaluate(depth, normals, gt.gt_depth, gt.gt_normals, gt.mask,
                   nfs_normals=nfs, align_mean_z=args.align_mean_z)
    print(f"MAE_deg={rep.mae_deg:.4f} MZE_mm={rep.mze_mm:.4f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"mae_deg": rep.mae_deg, "mae_nfs_deg": rep.mae_nfs_deg, "mze_mm": rep.mze_mm,
                       "n_pixels": rep.n_pixels}, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def cmd_calibrate(args):
    import warnings

    from .calibration import CalibrationProblem, PlanePose, calibrate, plane_points
    from .io import load_calibration, read_png

    init = load_calibration(args.init)
    cam = init.camera
    with open(args.planes) as f:
        planes = json.load(f)
    poses = []
    for k, plane in enumerate(planes):
        u, v, X = plane_points(cam, plane["point"], plane["normal"], args.stride)
        obs = []
        for m in range(len(init.lights)):
            p = os.path.join(args.captures, f"pose_{k}", f"light_{m:03d}.png")
            if not os.path.exists(p):
                raise DomainError(f"missing capture for pose {k}, light {m}: {p}")
            obs.append(read_png(p)[v.astype(int), u.astype(int)])
        n = np.asarray(plane["normal"], dtype=np.float64)
        poses.append(PlanePose(X, n / np.linalg.norm(n), np.stack(obs)))
    problem = CalibrationProblem(cam, poses, init.lights)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = calibrate(problem, epochs=args.epochs)
    for w in caught:
        print(f"warning[calibrate]: {w.message}", file=sys.stderr)
    with open(args.out, "w") as f:
        f.write(result.calibration.dumps())
    _manifest(args.out + ".manifest.json", "calibrate", args,
              {"final_l1": result.l1_history[-1], "initial_l1": result.l1_history[0]})
    print(f"L1_initial={result.l1_history[0]:.6f} L1_final={result.l1_history[-1]:.6f}")
    return 0


def _add_sampler_flags(p):
    p.add_argument("--mode", default="general",
                   help="'general' or a calibration file for setup-specific sampling")
    p.add_argument("--materials", choices=("mixed", "lambertian"), default="mixed")
    p.add_argument("--no-gi", action="store_true", help="disable the global illumination approximation")
    p.add_argument("--no-quant", action="store_true", help="disable sensor saturation and quantization")
    p.add_argument("--no-perturb", action="store_true", help="sample without setup perturbations")
    p.add_argument("--d", type=int, default=32, help="observation map size")


def build_parser():
    parser = argparse.ArgumentParser(prog="nearps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nearps {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"cap numerical library threads (default: ${THREADS_ENV} or library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a built-in analytic scene to a dataset directory")
    p.add_argument("--scene", choices=("sphere", "plane", "wave", "planes"), required=True,
                   help="'planes' renders calibration captures of a reference plane")
    p.add_argument("--lights", default=None, help="built-in rig (ring15, far15) or calibration file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", type=int, default=65536, help="sensor quantization levels")
    p.add_argument("--albedo", type=float, nargs=3, default=(0.6, 0.5, 0.4))
    p.add_argument("--specular", type=float, default=0.0)
    p.add_argument("--shininess", type=float, default=1.0)
    p.add_argument("--shadow-prob", type=float, default=0.0)
    p.add_argument("--ambient", type=float, default=0.0)
    p.add_argument("--plane-distances", type=float, nargs="+", default=(0.25, 0.35))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sample", help="write synthetic training records to an archive")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train the compact normal network")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--records", type=int, default=None, help="records to draw (default steps*batch)")
    p.add_argument("--data", default=None, help="train from a sample archive instead of the sampler")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct depth and normals from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--calib", default=None, help="override the dataset's calibration")
    p.add_argument("--regressor", default="lambertian", help="'lambertian' or 'net:<checkpoint>'")
    p.add_argument("--iters", type=int, default=2)
    p.add_argument("--naive", action="store_true", help="skip attenuation compensation")
    p.add_argument("--mean-distance", type=float, default=None)
    p.add_argument("--lam", type=float, default=1e-6, help="depth prior weight")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("calibrate", help="fit light parameters from reference plane captures")
    p.add_argument("--captures", required=True, help="directory with pose_<k>/light_<m>.png")
    p.add_argument("--planes", required=True, help="JSON list of {point, normal} per pose")
    p.add_argument("--init", required=True, help="initial calibration file")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--stride", type=int, default=8, help="use every n-th pixel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="compare a reconstruction with ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--align-mean-z", action="store_true")
    p.add_argument("--out", default=None, help="also write metrics as JSON")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except (DomainError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error[{args.command}]: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
