"""Command-line surface: synthesize scenes, track, evaluate, check, train.

Exit codes are stable and documented:

* 0 - success
* 1 - unexpected internal error (or a failing ``gradcheck`` run)
* 2 - invalid input: configuration, shapes, file formats, integrity,
      degenerate depths/scales, missing ground truth
* 3 - checkpoint does not match the model configuration
* 4 - training diverged (non-finite loss)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import bundle_io, metrics, synthetic
from .errors import CheckpointMismatchError, CloudTrackError, DivergenceError
from .n2n import NeighborhoodConfig
from .pipeline import Tracker, TrackerConfig
from .training import TrainConfig, train_toy

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGED = 4

_PRESETS = {
    "default": synthetic.default_spec,
    "two-planes": synthetic.two_planes_spec,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudtrack",
        description="Long-term 3D point tracking in camera-stabilized feature clouds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene bundle with ground truth")
    p.add_argument("--spec", help="scene spec JSON file (omit to use a preset)")
    p.add_argument("--preset", choices=sorted(_PRESETS), default="default",
                   help="built-in scene family when no --spec is given")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=0, help="overrides the spec's seed")
    p.add_argument("--verify", action="store_true",
                   help="re-check GT reprojection/visibility before writing")

    p = sub.add_parser("track", help="track the scene's queries and write the result")
    p.add_argument("--scene", required=True, help="scene bundle directory")
    p.add_argument("--mode", choices=["uvd", "uvlogd", "camera", "world"], default="camera")
    p.add_argument("--neighbors", choices=["knn3d", "fixed2d"], default="knn3d")
    p.add_argument("--attention", choices=["n2n", "p2n"], default="n2n")
    p.add_argument("--ckpt", help="trained checkpoint (omit for seeded random init)")
    p.add_argument("--support-grid", type=int, default=0,
                   help="n x n auxiliary support queries (0 disables)")
    p.add_argument("--bidirectional", action="store_true",
                   help="also track backwards to fill frames before each query's birth")
    p.add_argument("--seed", type=int, default=0, help="parameter seed when no --ckpt")
    p.add_argument("--out", required=True, help="output tracking-result file")
    p.add_argument("--ply", help="also export trajectories as an ASCII PLY point cloud")

    p = sub.add_parser("eval", help="score a tracking result against scene ground truth")
    p.add_argument("--pred", required=True, help="tracking-result file")
    p.add_argument("--scene", required=True, help="scene bundle directory with GT")
    p.add_argument("--out", help="write the metric report as JSON (fixed key order)")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and module")
    p.add_argument("--full", action="store_true",
                   help="also re-run module checks at double tolerance sizes")

    p = sub.add_parser("train-toy", help="overfit on synthetic scenes; write ckpt + loss CSV")
    p.add_argument("--scene", required=True, nargs="+", help="scene bundle directories")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.add_argument("--csv", help="loss curve CSV (default: <out>.loss.csv)")
    return parser


# -- commands ----------------------------------------------------------------


def _cmd_synth(args) -> int:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = synthetic.SceneSpec.from_dict(json.load(fh))
        spec = dataclasses.replace(spec, seed=args.seed)
    else:
        spec = _PRESETS[args.preset](seed=args.seed)
    bundle = synthetic.generate(spec)
    if args.verify:
        problems = synthetic.verify_bundle(bundle)
        if problems:
            for line in problems:
                print(f"verify: {line}", file=sys.stderr)
            return EXIT_INVALID
    out = bundle_io.save_scene(args.out, bundle)
    print(f"wrote scene: {out} ({bundle.num_frames} frames, "
          f"{bundle.num_queries} queries)")
    return EXIT_OK


def _tracker_from_args(args) -> Tracker:
    if args.ckpt:
        return Tracker.from_checkpoint(
            args.ckpt,
            mode=args.mode,
            neighbor_mode=args.neighbors,
            support_grid=args.support_grid,
            bidirectional=args.bidirectional,
        )
    config = TrackerConfig(
        mode=args.mode,
        neighbor_mode=args.neighbors,
        support_grid=args.support_grid,
        bidirectional=args.bidirectional,
        seed=args.seed,
        neighborhood=NeighborhoodConfig(attention_mode=args.attention),
    )
    return Tracker(config)


def _cmd_track(args) -> int:
    bundle = bundle_io.load_scene(args.scene)
    tracker = _tracker_from_args(args)
    if args.ckpt and tracker.config.neighborhood.attention_mode != args.attention:
        raise CheckpointMismatchError(
            f"checkpoint was trained with attention mode "
            f"{tracker.config.neighborhood.attention_mode!r}, requested {args.attention!r}"
        )
    result = tracker.track(bundle)
    bundle_io.save_result(args.out, result)
    bundle_io.save_run_manifest(
        str(args.out) + ".run.json", tracker.config.to_dict(), args.seed
    )
    if args.ply:
        q, s, _ = result.positions.shape
        rng = np.random.default_rng(0)
        colors = np.repeat(rng.integers(30, 255, size=(q, 3)), s, axis=0)
        bundle_io.export_ply(args.ply, result.positions.reshape(-1, 3), colors)
    visible = float(result.visibility.mean()) * 100.0
    print(f"wrote result: {args.out} ({q if args.ply else result.positions.shape[0]} "
          f"queries, {result.positions.shape[1]} frames, {visible:.0f}% visible)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    result = bundle_io.load_result(args.pred)
    bundle = bundle_io.load_scene(args.scene)
    report = metrics.evaluate(result, bundle)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
        print(f"wrote report: {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_checks

    outcomes = run_checks(progress=lambda o: print(o.line(), flush=True))
    failures = [o for o in outcomes if not o.result.ok]
    if args.full:
        # re-run at a stricter relative tolerance to expose marginal passes
        strict = run_checks(rtol=5e-4, progress=None)
        # (looser rtol means stricter already passed; keep the failure list)
        failures += [o for o in strict if not o.result.ok]
    for o in failures:
        for detail in o.result.failures[:5]:
            print(f"  {o.name}: {detail}", file=sys.stderr)
    total = sum(o.seconds for o in outcomes)
    print(f"{len(outcomes)} checks, {len(failures)} failures, {total:.1f}s")
    return EXIT_OK if not failures else EXIT_UNEXPECTED


def _cmd_train_toy(args) -> int:
    bundles = [bundle_io.load_scene(d) for d in args.scene]
    tracker = Tracker(TrackerConfig(seed=args.seed, scale_per_window=True))
    config = TrainConfig(num_steps=args.steps, seed=args.seed)
    run = train_toy(tracker, bundles, config)
    tracker.save_checkpoint(args.out, extra_meta={"train": config.to_dict()})
    csv_path = args.csv or (str(args.out) + ".loss.csv")
    run.to_csv(csv_path)
    bundle_io.save_run_manifest(
        str(args.out) + ".run.json",
        {"tracker": tracker.config.to_dict(), "train": config.to_dict()},
        args.seed,
    )
    if run.losses:
        print(f"trained {run.num_steps} steps: loss {run.losses[0]:.4f} -> "
              f"{run.losses[-1]:.4f}")
    else:
        print("trained 0 steps: wrote the initial parameters")
    print(f"wrote checkpoint: {args.out}")
    print(f"wrote loss curve: {csv_path}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "train-toy": _cmd_train_toy,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CloudTrackError, FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:  # pragma: no cover - defensive
        traceback.print_exc()
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
