"""Command-line surface for the pipeline.

Exit codes: 0 ok, 1 usage error, 2 unreadable/invalid input file,
3 failed check (gradcheck or similar).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BAD_INPUT = 2
EXIT_CHECK_FAILED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_config(args):
    from .trainer import TrainingConfig, config_from_ini
    override_keys = ("iterations", "lr", "eval_every", "plane_resolution",
                     "feat_dim", "local_channels", "global_channels",
                     "audio_dim", "parallel", "no_completion_branch",
                     "no_fine_field", "seed")
    overrides = {k: getattr(args, k, None) for k in override_keys}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "config", None):
        return config_from_ini(args.config, overrides)
    return _apply_overrides(TrainingConfig(), overrides)


def _apply_overrides(cfg, overrides):
    import dataclasses
    return dataclasses.replace(cfg, **overrides)


def _add_train_flags(p):
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--plane-resolution", dest="plane_resolution", type=int)
    p.add_argument("--feat-dim", dest="feat_dim", type=int)
    p.add_argument("--local-channels", dest="local_channels", type=int)
    p.add_argument("--global-channels", dest="global_channels", type=int)
    p.add_argument("--audio-dim", dest="audio_dim", type=int)
    p.add_argument("--parallel", type=int)
    p.add_argument("--no-completion-branch", dest="no_completion_branch",
                   action="store_const", const=True, default=None)
    p.add_argument("--no-fine-field", dest="no_fine_field",
                   action="store_const", const=True, default=None)
    p.add_argument("--resume", help="checkpoint to resume from")


def _progress(row):
    it, total, l1, lift, lip, eval_psnr = row
    msg = f"iter {it}: loss={total:.5f} l1={l1:.5f} lifting={lift:.5f} lip={lip:.5f}"
    if eval_psnr is not None:
        msg += f" holdout_psnr={eval_psnr:.2f}dB"
    print(msg)


def cmd_synth_scene(args):
    from .formats import save_bundle
    from .synthetic import ScenePreset, synth_scene
    kwargs = {"name": args.preset}
    if args.resolution is not None:
        kwargs["resolution"] = args.resolution
        kwargs["local_resolution"] = args.resolution
    if args.frames is not None:
        kwargs["n_frames"] = args.frames
    elif args.preset == "talking-head":
        kwargs["n_frames"] = 32
    bundle = synth_scene(args.seed, ScenePreset(**kwargs))
    save_bundle(bundle, Path(args.out))
    print(f"wrote {bundle.n_frames}-frame {args.preset} bundle to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args):
    from .formats import load_bundle, save_ply
    from .trainer import rebuild_from_checkpoint
    bundle = load_bundle(Path(args.bundle))
    _, _, _, model, _, _ = rebuild_from_checkpoint(args.checkpoint)
    cloud = model.reconstruct_cloud(bundle.f_local, bundle.f_global,
                                    bundle.priors[args.frame])
    save_ply(cloud, args.out)
    print(f"reconstructed {len(cloud)} primitives -> {args.out}")
    return EXIT_OK


def cmd_train_stage1(args):
    from .formats import load_bundle
    from .trainer import save_training_checkpoint, train_stage1
    bundle = load_bundle(Path(args.bundle))
    config = _build_config(args)
    res = train_stage1(config, bundle, resume_path=args.resume,
                       progress=_progress)
    save_training_checkpoint(args.out, 1, res.iteration, config, res.model,
                             optimizer=res.optimizer)
    print(f"stage-1 checkpoint -> {args.out}")
    return EXIT_OK


def cmd_train_stage2(args):
    from .formats import load_bundle
    from .trainer import save_training_checkpoint, train_stage2
    bundle = load_bundle(Path(args.bundle))
    config = _build_config(args)
    res = train_stage2(config, bundle, args.stage1, resume_path=args.resume,
                       progress=_progress)
    save_training_checkpoint(args.out, 2, res.iteration, res.config, res.model,
                             motion=res.motion, optimizer=res.optimizer)
    print(f"stage-2 checkpoint -> {args.out}")
    return EXIT_OK


def cmd_animate(args):
    from .formats import load_audio_track, load_bundle, save_png
    from .trainer import animate, rebuild_from_checkpoint
    bundle = load_bundle(Path(args.bundle))
    stage, _, _, model, motion, _ = rebuild_from_checkpoint(args.checkpoint)
    if motion is None:
        raise ValueError("animate needs a stage-2 checkpoint with motion fields")
    track = bundle.audio
    if args.audio:
        track = load_audio_track(args.audio)
    if track is None:
        raise ValueError("no audio track: bundle has none and --audio not given")
    cam = bundle.cameras[args.view]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = animate(model, motion, bundle, track, cam)
    for i, frame in enumerate(frames):
        save_png(frame, out / f"frame_{i:04d}.png")
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_render(args):
    from .formats import load_bundle, load_ply, save_png
    from .trainer import rebuild_from_checkpoint
    bundle = load_bundle(Path(args.bundle))
    _, _, _, model, _, _ = rebuild_from_checkpoint(args.checkpoint)
    if args.cloud:
        cloud = load_ply(args.cloud)
    else:
        cloud = model.reconstruct_cloud(bundle.f_local, bundle.f_global,
                                        bundle.priors[args.frame])
    rgb = model.render_cloud_rgb(cloud, bundle.cameras[args.frame])
    save_png(rgb, args.out)
    print(f"rendered view {args.frame} -> {args.out}")
    return EXIT_OK


def cmd_metrics(args):
    from .formats import load_png, save_metrics_csv
    from .objectives import psnr, ssim
    for d in (args.frames, args.reference):
        if not Path(d).is_dir():
            raise FileNotFoundError(f"no such directory: {d}")
    frames = sorted(Path(args.frames).glob("*.png"))
    refs = sorted(Path(args.reference).glob("*.png"))
    if len(frames) != len(refs) or not frames:
        raise ValueError(f"frame count mismatch: {len(frames)} vs {len(refs)}")
    rows = []
    for i, (f, r) in enumerate(zip(frames, refs)):
        a, b = load_png(f), load_png(r)
        rows.append((i, psnr(a, b), ssim(a, b), float("nan")))
    save_metrics_csv(rows, args.out)
    mean_psnr = float(np.mean([r[1] for r in rows]))
    print(f"{len(rows)} frames, mean PSNR {mean_psnr:.2f} dB -> {args.out}")
    return EXIT_OK


def cmd_bench(args):
    from .core import CameraPose, GaussianCloud
    from .rasterizer import RasterConfig, render_benchmark
    rng = np.random.default_rng(args.seed)
    n = args.primitives
    s = args.resolution
    cloud = GaussianCloud(
        mu=rng.normal(0.0, 0.5, (n, 3)),
        scale_log=rng.normal(np.log(0.02), 0.3, (n, 3)),
        rot=rng.normal(0.0, 1.0, (n, 4)),
        opacity_logit=rng.normal(0.0, 1.0, n),
        feat=rng.uniform(0.0, 1.0, (n, args.feat_dim)),
        branch_tag=np.zeros(n, dtype=np.uint8))
    cam = CameraPose.look_at(eye=[0, 0, 2.5], target=[0, 0, 0], up=[0, 1, 0],
                             fx=float(s), fy=float(s), cx=s / 2, cy=s / 2,
                             image_w=s, image_h=s)
    cfg = RasterConfig(parallel=args.parallel)
    report = render_benchmark(cloud, cam, args.frames, cfg)
    print(f"{n} primitives at {s}x{s}: {report['fps']:.1f} FPS "
          f"({report['frames']} frames, cull+sort {report['cull_sort_s']:.3f}s, "
          f"composite {report['composite_s']:.3f}s)")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    ok, rows = run_suite(seed=args.seed, instances=args.instances)
    for name, worst, tol, passed in rows:
        status = "ok" if passed else "FAIL"
        print(f"{name:20s} rel_err {worst:.3e}  tol {tol:.0e}  {status}")
    if not ok:
        print("gradcheck FAILED")
        return EXIT_CHECK_FAILED
    print("gradcheck passed")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="gaussianhead",
                     description="one-shot 3D Gaussian talking-head pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-scene", help="generate a synthetic scene bundle")
    p.add_argument("--preset", choices=["static-head", "talking-head"],
                   default="static-head")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int)
    p.add_argument("--frames", type=int)
    p.set_defaults(fn=cmd_synth_scene)

    p = sub.add_parser("reconstruct", help="one-shot features+prior -> PLY")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("train-stage1", help="train reconstruction + decoder")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train motion fields")
    p.add_argument("--bundle", required=True)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("animate", help="checkpoint + audio -> PNG frames")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", help="audio track file; default: bundle's track")
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_animate)

    p = sub.add_parser("render", help="render a reconstruction or a PLY cloud")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", help="PLY to render instead of reconstructing")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("metrics", help="frames vs reference -> CSV")
    p.add_argument("--frames", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("bench", help="forward rendering FPS report")
    p.add_argument("--primitives", type=int, default=10000)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--feat-dim", dest="feat_dim", type=int, default=8)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    from .formats import FormatError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits on usage errors; return the code so callers
        # embedding main() get an int instead of an exception
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except (FileNotFoundError, FormatError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
