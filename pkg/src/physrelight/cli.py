"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every error is reported as a single line on stderr.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import shutil
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import augment, envrelight, evaluation, metrics, pms, report, synth
from .dataset import FrameStore, ManifestError, read_manifest, write_manifest
from .formation import shading
from .imageio import PFMFormatError, load_pfm, save_pfm, save_png_srgb
from .lighting import (
    CalibrationError,
    DirectionalLight,
    LightFileError,
    calibrate_from_sphere,
    format_light_line,
    load_lights,
    parse_light_line,
    save_lights,
    standard_rig,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PROG = "physrelight"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _threads(args):
    if args.deterministic:
        return 1
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("RELIGHT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"RELIGHT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _pool(args):
    n = _threads(args)
    return concurrent.futures.ThreadPoolExecutor(n) if n > 1 else None


def _light_arg(text, what):
    vals = text.replace(",", " ").split()
    if len(vals) == 3:
        vals = vals + ["1", "1", "1"]
    if len(vals) != 6:
        raise UsageError(f"{what} needs 'dx dy dz [ir ig ib]', got {text!r}")
    try:
        return parse_light_line("0 " + " ".join(vals))[1]
    except LightFileError as exc:
        raise UsageError(f"{what}: {exc}") from None


def _floats(text, n, what):
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        vals = []
    if len(vals) != n:
        raise UsageError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    return vals


def _load_config(path):
    from .learner.model import TrainConfig

    if path is None:
        return TrainConfig()
    try:
        with open(path) as fh:
            return TrainConfig.from_dict(json.load(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _write_raster(img, path, png):
    save_pfm(img, path)
    if png:
        save_png_srgb(img, os.path.splitext(path)[0] + ".png")


# ---------------------------------------------------------------- commands


def cmd_synth_gen(args):
    lights = load_lights(args.lights) if args.lights else standard_rig()
    seeds = list(range(args.seed, args.seed + args.scenes))
    pool = _pool(args)
    try:
        path = synth.generate_dataset(args.scenes, lights, args.out, seeds=seeds,
                                      resolution=args.resolution, lambertian=args.lambertian,
                                      pool=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    print(path)


def cmd_pms_solve(args):
    src = read_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    out_root = os.path.abspath(args.out)
    th = pms.Thresholds(args.tlo, args.thi)
    light_files = {}
    scenes = []
    for entry in src["scenes"]:
        lf = entry["light_file"]
        if lf not in light_files:
            light_files[lf] = load_lights(os.path.join(root, lf))
            shutil.copyfile(os.path.join(root, lf), os.path.join(out_root, os.path.basename(lf)))
        lset = light_files[lf]
        frames = entry["frames"]
        lights = [DirectionalLight(f["light"][:3], f["light"][3:]) if "light" in f
                  else lset.by_id(f["light_id"]) for f in frames]
        images = [load_pfm(os.path.join(root, f["files"]["image"])) for f in frames]
        albedo, normals, valid = pms.solve_image(images, lights, th)
        tag = entry.get("variant", "")
        sdir = f"scene_{entry['scene_seed']:05d}{'_' + tag if tag else ''}"
        os.makedirs(os.path.join(out_root, sdir), exist_ok=True)
        save_pfm(albedo, os.path.join(out_root, sdir, "albedo.pfm"))
        save_pfm(normals, os.path.join(out_root, sdir, "normals.pfm"))
        save_pfm(valid[..., None].astype(np.float32), os.path.join(out_root, sdir, "validity.pfm"))
        new_frames = []
        for f, light, img in zip(frames, lights, images):
            vis = pms.estimate_visibility(img, albedo, normals, light, valid, th)
            res = pms.compute_residual(img, albedo, normals, light, vis)
            lid = f["light_id"]
            files = {
                "image": os.path.relpath(os.path.join(root, f["files"]["image"]), out_root),
                "albedo": f"{sdir}/albedo.pfm",
                "normals": f"{sdir}/normals.pfm",
                "shading": f"{sdir}/l{lid:03d}_shading.pfm",
                "visibility": f"{sdir}/l{lid:03d}_visibility.pfm",
                "residual": f"{sdir}/l{lid:03d}_residual.pfm",
            }
            save_pfm(shading(normals, light).astype(np.float32), os.path.join(out_root, files["shading"]))
            save_pfm(vis, os.path.join(out_root, files["visibility"]))
            save_pfm(res, os.path.join(out_root, files["residual"]))
            fr = {"light_id": lid, "files": files}
            if "light" in f:
                fr["light"] = f["light"]
            new_frames.append(fr)
        scene = {"scene_seed": entry["scene_seed"], "light_file": os.path.basename(lf),
                 "frames": new_frames, "validity": f"{sdir}/validity.pfm"}
        if tag:
            scene["variant"] = tag
        scenes.append(scene)
        print(f"scene {entry['scene_seed']}{' ' + tag if tag else ''}: "
              f"{int(valid.sum())}/{valid.size} valid pixels")
    manifest = {"format": "physrelight-manifest/1", "kind": "pms",
                "light_file": os.path.basename(src["light_file"]), "scenes": scenes}
    if "resolution" in src:
        manifest["resolution"] = src["resolution"]
    path = os.path.join(out_root, "manifest.json")
    write_manifest(manifest, path)
    print(path)


def cmd_train(args):
    from .learner.io import save_model
    from .learner.train import train

    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.seed = args.seed
    store = FrameStore.from_manifest(args.manifest)
    val = None
    if args.val_scenes:
        store, val = store.split(args.val_scenes)
    model, hist = train(cfg, store, val, log=lambda s: print(s, flush=True))
    save_model(model, args.out, extra={"history": hist.to_dict()})
    stem = os.path.splitext(args.out)[0]
    report.write_tsv(f"{stem}_history.tsv", ["epoch", "train", "val"],
                     [[i + 1, t, v] for i, (t, v) in enumerate(zip(hist.train, hist.val))])
    report.plot_history(f"{stem}_history.png", {"model": hist})
    print(args.out)


def _load_any_model(path):
    from .learner.io import load_model

    return load_model(path)


def cmd_relight(args):
    from .learner.model import relight

    model = _load_any_model(args.model)
    img = load_pfm(args.input)
    if img.shape[2] != 3:
        raise DataError(f"{args.input}: relighting needs an RGB image")
    l_src = _light_arg(args.src_light, "--src-light") if args.src_light else None
    if l_src is None and model.config.known_source_illumination:
        raise UsageError("this model was trained with known source illumination; pass --src-light")
    l_dst = _light_arg(args.dst_light, "--dst-light")
    out = relight(model, img, l_src, l_dst)
    _write_raster(out, args.out, args.png)
    print(args.out)


def cmd_relight_env(args):
    model = _load_any_model(args.model)
    img = load_pfm(args.input)
    if args.target_mean:
        img = envrelight.color_match_linear(img, _floats(args.target_mean, 3, "--target-mean"))
    l_src = _light_arg(args.src_light, "--src-light") if args.src_light else None
    if l_src is None and model.config.known_source_illumination:
        raise UsageError("this model was trained with known source illumination; pass --src-light")
    env = load_pfm(args.envmap)
    lights = envrelight.env_to_lights(env, sin_weight=not args.no_sin_weight)
    if not lights:
        raise DataError(f"{args.envmap}: environment map is entirely black")
    out = envrelight.relight_env(model, img, l_src, lights, topk=args.topk)
    _write_raster(out, args.out, args.png)
    print(args.out)


def cmd_eval(args):
    a, b = load_pfm(args.a), load_pfm(args.b)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    print(f"{metrics.evaluate(args.metric, a, b):.6f}")


def cmd_calibrate(args):
    img = load_pfm(args.sphere)
    cx, cy = _floats(args.center, 2, "--center")
    light = calibrate_from_sphere(img, (cx, cy), args.radius, args.reflectance)
    print(format_light_line(args.id, light))


def cmd_augment(args):
    src = read_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    out_root = os.path.abspath(args.out)
    rng = np.random.default_rng(args.seed)
    light_sets = {}
    scenes = []
    flip_sets = augment.FLIP_SETS if not args.no_flips else ((),)
    for entry in src["scenes"]:
        lf = entry["light_file"]
        if lf not in light_sets:
            light_sets[lf] = load_lights(os.path.join(root, lf))
            shutil.copyfile(os.path.join(root, lf), os.path.join(out_root, os.path.basename(lf)))
        lset = light_sets[lf]
        samples = []
        for f in entry["frames"]:
            light = (DirectionalLight(f["light"][:3], f["light"][3:]) if "light" in f
                     else lset.by_id(f["light_id"]))
            layers = {k: load_pfm(os.path.join(root, p)) for k, p in f["files"].items()}
            samples.append((f["light_id"], synth.IntrinsicSet(light=light, **layers)))
        for flips in flip_sets:
            tag = "".join(flips) or "id"
            base = entry.get("variant")
            variant = f"{base}-{tag}" if base else tag
            sdir = f"scene_{entry['scene_seed']:05d}_{variant}"
            os.makedirs(os.path.join(out_root, sdir), exist_ok=True)
            frames = []
            for lid, sample in samples:
                s = augment.flip_composite(sample, flips)
                if args.scale:
                    s = augment.scale_sample(s, augment.draw_scale(rng))
                files = {}
                for name, raster in s.layers().items():
                    rel = f"{sdir}/l{lid:03d}_{name}.pfm"
                    save_pfm(raster, os.path.join(out_root, rel))
                    files[name] = rel
                frames.append({"light_id": lid, "files": files,
                               "light": [float(v) for v in (*s.light.direction, *s.light.intensity)]})
            scenes.append({"scene_seed": entry["scene_seed"], "light_file": os.path.basename(lf),
                           "variant": variant, "frames": frames})
    manifest = {"format": "physrelight-manifest/1", "kind": "augmented",
                "light_file": os.path.basename(src["light_file"]), "scenes": scenes}
    if "resolution" in src:
        manifest["resolution"] = src["resolution"]
    path = os.path.join(out_root, "manifest.json")
    write_manifest(manifest, path)
    print(path)


def cmd_gradcheck(args):
    from .learner.gradcheck import check_full_graph

    rep = check_full_graph(metric=args.metric, size=args.size, samples=args.samples,
                           seed=args.seed, tolerance=args.tolerance)
    for line in rep.lines():
        print(line)
    if not rep.passed:
        raise NumericalError(f"gradient check failed: max relative error {rep.max_rel_error:.3e}")


def cmd_study(args):
    from .learner.model import TrainConfig
    from .study import compare_to_baseline, loss_grid, synthetic_stores

    cfg = _load_config(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.seed = args.seed
    losses = [l.strip() for l in args.losses.split(",") if l.strip()]
    for l in losses:
        if l not in metrics.METRICS:
            raise UsageError(f"unknown training loss {l!r}; choose from {', '.join(metrics.METRICS)}")
    if args.manifest:
        store = FrameStore.from_manifest(args.manifest)
        train_store, val_store = store.split(args.val_scenes)
    else:
        rig = standard_rig(args.lights)
        pool = _pool(args)
        try:
            train_store, val_store = synthetic_stores(args.scenes, args.val_scenes, rig,
                                                      seed=args.seed, resolution=args.resolution,
                                                      pool=pool)
        finally:
            if pool is not None:
                pool.shutdown()
    os.makedirs(args.out, exist_ok=True)

    def log(s):
        print(s, flush=True)

    res = loss_grid(cfg, train_store, val_store, losses, metrics.METRICS, n_pairs=args.pairs,
                    log=log)
    grid_path = os.path.join(args.out, "study.tsv")
    report.write_grid(grid_path, res.grid, res.losses, res.metrics)
    report.plot_grid(os.path.join(args.out, "study.png"), res.grid, res.losses, res.metrics)
    report.plot_history(os.path.join(args.out, "study_history.png"), res.histories)
    if args.baseline:
        cmp = compare_to_baseline(cfg.with_loss("dssim"), train_store, val_store,
                                  n_pairs=args.pairs, log=log)
        report.write_tsv(os.path.join(args.out, "baseline.tsv"), ["model", "dssim"],
                         [["pms_diffuse", cmp.baseline], ["known_source", cmp.known],
                          ["unknown_source", cmp.unknown]])
    print(grid_path)


# ---------------------------------------------------------------- parser


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: $RELIGHT_THREADS or all cores)")
    common.add_argument("--deterministic", action="store_true",
                        help="single worker, fixed reduction order")

    p = _Parser(prog=PROG, description="Physics-guided relighting toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth-gen", parents=[common], help="render an oracle dataset")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lights", help="light file (default: standard 32-light rig)")
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--lambertian", action="store_true")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("pms", help="photometric stereo")
    pms_sub = s.add_subparsers(dest="pms_command", parser_class=_Parser)
    ps = pms_sub.add_parser("solve", parents=[common], help="reconstruct A, N, V and R")
    ps.add_argument("--manifest", required=True)
    ps.add_argument("--out", required=True)
    ps.add_argument("--tlo", type=float, default=pms.Thresholds.tlo)
    ps.add_argument("--thi", type=float, default=pms.Thresholds.thi)
    ps.set_defaults(func=cmd_pms_solve)

    s = sub.add_parser("train", parents=[common], help="train a relighting model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--val-scenes", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("relight", parents=[common], help="relight one image")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--src-light")
    s.add_argument("--dst-light", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--png", action="store_true", help="also write an sRGB PNG")
    s.set_defaults(func=cmd_relight)

    s = sub.add_parser("relight-env", parents=[common], help="relight under an environment map")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--src-light")
    s.add_argument("--envmap", required=True)
    s.add_argument("--topk", type=int)
    s.add_argument("--no-sin-weight", action="store_true")
    s.add_argument("--target-mean", help="r,g,b center-patch means for color matching")
    s.add_argument("--out", required=True)
    s.add_argument("--png", action="store_true")
    s.set_defaults(func=cmd_relight_env)

    s = sub.add_parser("eval", parents=[common], help="compare two rasters")
    s.add_argument("--metric", choices=metrics.METRICS, default="dssim")
    s.add_argument("a")
    s.add_argument("b")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("calibrate", parents=[common], help="light from a chrome sphere")
    s.add_argument("--sphere", required=True)
    s.add_argument("--center", required=True, help="x,y in pixels")
    s.add_argument("--radius", type=float, required=True)
    s.add_argument("--reflectance", type=float, default=1.0)
    s.add_argument("--id", type=int, default=0)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("augment", parents=[common], help="offline flip/scale expansion")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-flips", action="store_true")
    s.add_argument("--scale", action="store_true", help="random intensity scale per frame")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit")
    s.add_argument("--metric", choices=metrics.METRICS, default="dssim")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("study", parents=[common], help="training-loss x metric grid")
    s.add_argument("--manifest", help="use this dataset instead of rendering one")
    s.add_argument("--scenes", type=int, default=8, help="training scenes when rendering")
    s.add_argument("--val-scenes", type=int, default=2)
    s.add_argument("--lights", type=int, default=32)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--losses", default=",".join(metrics.METRICS))
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--pairs", type=int, default=32, help="held-out evaluation pairs")
    s.add_argument("--baseline", action="store_true",
                   help="also compare against the diffuse photometric-stereo baseline")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_study)
    return p


def _limit_threads(n):
    return threadpool_limits(n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("missing subcommand; see --help")
        _limit_threads(_threads(args))
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"{PROG}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PFMFormatError, ManifestError, LightFileError, CalibrationError) as exc:
        print(f"{PROG}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"{PROG}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        return _classify(exc)


def _classify(exc):
    from .learner.io import ModelFileError
    from .learner.train import TrainingDiverged

    msg = str(exc).replace("\n", " ")
    if isinstance(exc, TrainingDiverged) or isinstance(exc, FloatingPointError):
        print(f"{PROG}: numerical failure: {msg}", file=sys.stderr)
        return EXIT_NUMERIC
    if isinstance(exc, (ModelFileError, OSError, ValueError, KeyError)):
        print(f"{PROG}: data error: {msg}", file=sys.stderr)
        return EXIT_DATA
    raise exc


if __name__ == "__main__":
    sys.exit(main())
