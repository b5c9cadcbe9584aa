"""Single entry point exposing the pipeline stages.

Exit codes: 0 success, 2 usage error, 3 data validation error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .types import ValidationError

logger = logging.getLogger("stdgs")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MANIFEST_SCHEMA_VERSION = 1


def _write_run_manifest(out_dir, stage, config, inputs, outputs, seed, t_start):
    from .dataio import atomic_write_json
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "stage": stage,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "version": __version__,
        "wall_clock_s": round(time.time() - t_start, 3),
    }
    atomic_write_json(os.path.join(out_dir, "run_manifest.json"), manifest)


def cmd_simulate(args) -> int:
    from .simulate import (SceneScript, ScriptRenderer, simulate_events,
                           synthesize_blur, subsample_frames)
    from .dataio import write_dataset
    t0 = time.time()
    script = SceneScript.from_json(args.script)
    renderer = ScriptRenderer(script)
    sub = renderer.render_frames(args.subfps)
    sharp = subsample_frames(sub, args.fps, args.subfps)
    stream = simulate_events(script, args.contrast, refractory_us=args.refractory_us,
                             subfps=args.subfps, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    manifest = write_dataset(args.out, sharp, stream)
    outputs = [manifest]
    if args.blur_window > 1:
        blurred_sub = synthesize_blur(sub, args.blur_window)
        blurred = subsample_frames(blurred_sub, args.fps, args.subfps)
        bdir = os.path.join(args.out, "blurred")
        from .dataio import write_image
        for i, f in enumerate(blurred.frames):
            path = os.path.join(bdir, f"{i:05d}.png")
            write_image(path, f.image)
            outputs.append(path)
    cfg = {"script": args.script, "contrast": args.contrast,
           "blur_window": args.blur_window, "fps": args.fps,
           "subfps": args.subfps, "refractory_us": args.refractory_us}
    _write_run_manifest(args.out, "simulate", cfg, [args.script], outputs,
                        args.seed, t0)
    return EXIT_OK


def cmd_disentangle(args) -> int:
    from .dataio import load_dataset
    from .disentangle import DisentangleConfig, disentangle_scene, write_decomposition
    t0 = time.time()
    frames, stream = load_dataset(os.path.join(args.data, "manifest.json"))
    cfg = DisentangleConfig(superpixels=args.superpixels, bins=args.bins,
                            clusters=args.clusters, steps=args.steps,
                            seed=args.seed)
    decomp = disentangle_scene(frames, stream, cfg)
    out = args.out or os.path.join(args.data, "decomposition")
    summary = write_decomposition(out, decomp)
    _write_run_manifest(out, "disentangle",
                        {"superpixels": args.superpixels, "bins": args.bins,
                         "clusters": args.clusters, "steps": args.steps},
                        [args.data], [summary], args.seed, t0)
    return EXIT_OK


def cmd_track(args) -> int:
    from .dataio import load_dataset
    from .disentangle import load_decomposition
    from .track import TrackConfig, track_object, write_trajectory
    t0 = time.time()
    frames, stream = load_dataset(os.path.join(args.data, "manifest.json"))
    decomp = load_decomposition(args.decomp)
    out = args.out or os.path.join(args.data, "tracks")
    os.makedirs(out, exist_ok=True)
    cfg = TrackConfig(step_us=int(args.step_ms * 1000))
    outputs = []
    for oid in range(1, decomp.num_objects + 1):
        traj = track_object(stream, decomp, oid, cfg)
        path = os.path.join(out, f"trajectory_{oid}.json")
        write_trajectory(path, traj)
        outputs.append(path)
    _write_run_manifest(out, "track", {"step_ms": args.step_ms},
                        [args.data, args.decomp], outputs, args.seed, t0)
    return EXIT_OK


def _load_train_config(path, seed):
    from .train import TrainConfig
    from .scene import SceneConfig
    from .disentangle import DisentangleConfig
    cfg = TrainConfig()
    if path:
        with open(path) as fh:
            d = json.load(fh)
        for k, v in d.items():
            if k == "scene":
                cfg.scene = SceneConfig(**v)
            elif k == "disentangle":
                cfg.disentangle = DisentangleConfig(**v)
            elif k == "lrs":
                cfg.lrs.update(v)
            elif hasattr(cfg, k):
                setattr(cfg, k, v)
            else:
                raise ValidationError(f"unknown training config key {k!r}")
    if seed is not None:
        cfg.seed = seed
    return cfg


def cmd_train(args) -> int:
    from .dataio import load_dataset, atomic_write_text
    from .disentangle import load_decomposition
    from .track import load_trajectory
    from .train import TrainConfig, train
    from .scene import save_scene
    t0 = time.time()
    frames, stream = load_dataset(os.path.join(args.data, "manifest.json"))
    decomp = load_decomposition(args.decomp) if args.decomp else None
    cfg = _load_train_config(args.config, args.seed)
    if args.unified_baseline:
        cfg.mode = "unified"
    trajectories = {}
    if args.tracks and cfg.mode != "unified":
        for name in sorted(os.listdir(args.tracks)):
            if name.startswith("trajectory_") and name.endswith(".json"):
                traj = load_trajectory(os.path.join(args.tracks, name))
                trajectories[traj.object_id] = traj
    if decomp is None:
        from .train import _all_background
        decomp = _all_background(None, frames)
    os.makedirs(args.out, exist_ok=True)
    scene, field, report = train(frames, stream, decomp, trajectories, cfg,
                                 out_dir=args.out)
    ckpt = os.path.join(args.out, "scene.json")
    save_scene(ckpt, scene, overlap_field=field)
    report_path = os.path.join(args.out, "report.jsonl")
    atomic_write_text(report_path, report.to_json_lines())
    _write_run_manifest(args.out, "train", report.config,
                        [args.data, args.decomp or "", args.tracks or ""],
                        [ckpt, report_path], cfg.seed, t0)
    return EXIT_OK


def cmd_render(args) -> int:
    import torch
    from .scene import load_scene
    from .render import render
    from .dataio import write_image, _camera_from_json
    t0 = time.time()
    scene, field = load_scene(args.scene)
    if args.pose:
        with open(args.pose) as fh:
            cam = _camera_from_json(json.load(fh), args.pose)
    else:
        cam = scene.reference_camera
    width = args.width or int(round(2 * cam.cx))
    height = args.height or int(round(2 * cam.cy))
    with torch.no_grad():
        out = render(scene, cam, args.time_us, field, width, height)
    write_image(args.out, out.image_numpy())
    outputs = [args.out]
    if args.dump_layers:
        d = args.dump_layers
        os.makedirs(d, exist_ok=True)
        for name, arr in [
            ("color_background", out.background.color.numpy()),
            ("color_objects", out.objects.color.numpy()),
            ("density_background", out.background.density.numpy()),
            ("density_objects", out.objects.density.numpy()),
        ]:
            path = os.path.join(d, f"{name}.png")
            write_image(path, np.clip(arr, 0, 1))
            outputs.append(path)
        if out.rho is not None:
            path = os.path.join(d, "rho.png")
            write_image(path, out.rho.numpy())
            outputs.append(path)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_run_manifest(out_dir, "render",
                        {"time_us": args.time_us}, [args.scene], outputs,
                        args.seed, t0)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataio import load_dataset, atomic_write_json
    from .scene import load_scene
    from .train import evaluate, split_train_holdout
    t0 = time.time()
    frames, _stream = load_dataset(os.path.join(args.data, "manifest.json"))
    scene, field = load_scene(args.scene)
    mode = "fused" if (field is not None or scene.objects) else "background_only"
    _train_idx, held = split_train_holdout(frames, args.holdout_every)
    indices = held if held else None
    metrics = evaluate(scene, field, frames, indices, mode=mode)
    print(json.dumps(metrics, sort_keys=True))
    if args.out:
        atomic_write_json(args.out, metrics)
        out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
        _write_run_manifest(out_dir, "eval",
                            {"holdout_every": args.holdout_every},
                            [args.data, args.scene], [args.out], args.seed, t0)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stdgs",
        description="Spatiotemporal-disentangled Gaussian splatting pipeline",
    )
    p.add_argument("--threads", type=int, default=1,
                   help="worker hint; results are thread-count invariant")
    p.add_argument("--seed", type=int, default=None, help="global seed override")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize a toy frame+event dataset")
    s.add_argument("--script", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--contrast", type=float, default=0.15)
    s.add_argument("--blur-window", type=int, default=8, dest="blur_window")
    s.add_argument("--fps", type=float, default=20.0)
    s.add_argument("--subfps", type=float, default=400.0)
    s.add_argument("--refractory-us", type=int, default=0, dest="refractory_us")
    s.set_defaults(func=cmd_simulate, default_seed=0)

    s = sub.add_parser("disentangle", help="separate background and objects")
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--superpixels", type=int, default=200)
    s.add_argument("--bins", type=int, default=8)
    s.add_argument("--clusters", type=int, default=2)
    s.add_argument("--steps", type=int, default=200)
    s.set_defaults(func=cmd_disentangle, default_seed=7)

    s = sub.add_parser("track", help="track objects through the event stream")
    s.add_argument("--data", required=True)
    s.add_argument("--decomp", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--step-ms", type=float, default=10.0, dest="step_ms")
    s.set_defaults(func=cmd_track, default_seed=0)

    s = sub.add_parser("train", help="optimize the Gaussian scene")
    s.add_argument("--data", required=True)
    s.add_argument("--decomp", default=None)
    s.add_argument("--tracks", default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--unified-baseline", action="store_true",
                   dest="unified_baseline")
    s.set_defaults(func=cmd_train, default_seed=0)

    s = sub.add_parser("render", help="render a checkpoint at a pose and time")
    s.add_argument("--scene", required=True)
    s.add_argument("--pose", default=None)
    s.add_argument("--time-us", type=int, required=True, dest="time_us")
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--height", type=int, default=None)
    s.add_argument("--dump-layers", default=None, dest="dump_layers")
    s.set_defaults(func=cmd_render, default_seed=0)

    s = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint vs a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--holdout-every", type=int, default=8, dest="holdout_every")
    s.set_defaults(func=cmd_eval, default_seed=0)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    if args.seed is None:
        args.seed = args.default_seed

    import torch
    # numeric results must not depend on --threads; torch stays single-threaded
    torch.set_num_threads(1)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
