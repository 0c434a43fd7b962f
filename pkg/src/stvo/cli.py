"""Command-line entry point: run, eval, synth, selftest.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import StvoError


def _parser():
    p = argparse.ArgumentParser(prog="stvo", description="Frame-graph visual odometry engine")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run odometry on a sequence directory")
    r.add_argument("sequence", help="TUM-RGBD style directory or image directory")
    r.add_argument("--out", default=None, help="output directory (default: <sequence>/stvo_out)")
    r.add_argument("--config", default=None, help="JSON config written by a previous run")
    r.add_argument("--format", choices=["tum-rgbd", "image-dir"], default="tum-rgbd")
    r.add_argument("--flow", dest="flow_source", choices=["network", "oracle"], default=None)
    r.add_argument("--depth", dest="depth_source", choices=["ba", "external"], default=None)
    r.add_argument("--sam-norm", dest="sam_normalization", choices=["standardized", "raw"], default=None)
    r.add_argument("--intrinsics", nargs=4, type=float, metavar=("FX", "FY", "CX", "CY"), default=None)
    r.add_argument("--stride", type=int, default=None, help="use every n-th frame")
    r.add_argument("--iterations", type=int, default=None)
    r.add_argument("--inner-iters", dest="inner_iters", type=int, default=None)
    r.add_argument("--window", type=int, default=None)
    r.add_argument("-r", "--neighbours", dest="r", type=int, default=None)
    r.add_argument("--kf-threshold", dest="kf_threshold", type=float, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--weights", default=None, help="STVW weight file")
    r.add_argument("--no-plots", action="store_true")

    e = sub.add_parser("eval", help="ATE between two TUM trajectory files")
    e.add_argument("--gt", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--max-dt", type=float, default=0.02)
    e.add_argument("--no-scale", action="store_true", help="rigid instead of similarity alignment")
    e.add_argument("--plot", default=None, help="write an aligned trajectory figure here")

    s = sub.add_parser("synth", help="render a synthetic textured-plane sequence")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kind", choices=["zigzag", "forward", "orbit"], default="zigzag")
    s.add_argument("--height", type=int, default=384)
    s.add_argument("--width", type=int, default=512)

    t = sub.add_parser("selftest", help="run the built-in invariant checks")
    t.add_argument("--seed", type=int, default=0)
    return p


def cmd_run(args) -> int:
    from .config import resolve
    from .pipeline import load_sequence, run_vo, write_artifacts

    cli = {k: getattr(args, k) for k in ("flow_source", "depth_source", "sam_normalization", "stride",
                                         "iterations", "inner_iters", "window", "r", "kf_threshold",
                                         "seed", "weights")}
    if args.intrinsics is not None:
        cli["intrinsics"] = list(args.intrinsics)
    try:
        cfg = resolve(args.config, **cli)
    except ValueError as exc:
        print(f"stvo run: {exc}", file=sys.stderr)
        return 2
    seq = load_sequence(args.sequence, args.format, cfg.intrinsics)
    art = run_vo(cfg, seq)
    out = Path(args.out) if args.out else Path(args.sequence) / "stvo_out"
    paths = write_artifacts(art, out, plots=not args.no_plots, groundtruth=seq.groundtruth)
    for key in sorted(art.metrics):
        val = art.metrics[key]
        print(f"{key}\t{val:.6g}" if isinstance(val, float) else f"{key}\t{val}")
    for key in sorted(paths):
        print(f"{key}_path\t{paths[key]}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import ate
    from .fileio import read_tum

    gt = read_tum(args.gt)
    est = read_tum(args.est)
    res = ate(est, gt, max_dt=args.max_dt, with_scale=not args.no_scale)
    print(f"rmse {res.rmse:.6f}")
    print(f"mean {res.mean:.6f}")
    print(f"median {res.median:.6f}")
    print(f"max {res.max:.6f}")
    print(f"scale {res.scale:.6f}")
    print(f"pairs {len(res.pairs)}")
    if args.plot:
        from .plotting import plot_trajectory

        plot_trajectory(est, gt, args.plot)
    return 0


def cmd_synth(args) -> int:
    from . import synth

    if args.frames < 1:
        print("stvo synth: --frames must be >= 1", file=sys.stderr)
        return 2
    try:
        scene = synth.make_scene(args.frames, args.kind, args.seed, height=args.height, width=args.width)
    except ValueError as exc:
        print(f"stvo synth: {exc}", file=sys.stderr)
        return 2
    out = synth.export_tum(scene, args.out)
    print(f"frames\t{args.frames}")
    print(f"out\t{out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_checks

    ok = True
    for name, passed, detail in run_checks(args.seed):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}\t{name}\t{detail}")
    return 0 if ok else 1


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "synth": cmd_synth, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (StvoError, OSError) as exc:
        print(f"stvo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
