"""Command-line entry point: sim, run, eval and ablate."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .ate import NoOverlapError, evaluate_ate
from .config import ConfigError, load_run_config
from .estimator import DataGapError, WindowGapError
from .imu import ImuCoverageError
from .io import ParseError, read_tum
from .solver import SolverDivergence

log = logging.getLogger("surfel_lio")

EXPECTED = (ParseError, ConfigError, DataGapError, WindowGapError, ImuCoverageError, SolverDivergence,
            NoOverlapError, FileNotFoundError)


def _on_off(text: str) -> bool:
    t = text.lower()
    if t not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return t == "on"


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value run configuration")
    p.add_argument("--dataset", type=Path, help="directory with scans.csv, imu.csv, config.txt")
    p.add_argument("--output", type=Path, help="output directory")
    p.add_argument("--loop-closure", type=_on_off, default=None, metavar="on|off")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-points-per-bundle", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="surfel-lio", description="Lidar-inertial odometry on a multi-scale surfel map")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("sim", help="generate a synthetic dataset")
    s.add_argument("--world", default="room", help="room, corridor-loop, two-scale or static-room")
    s.add_argument("--duration", type=float, default=None)
    s.add_argument("--noise", type=_on_off, default=True, metavar="on|off")
    _common(s)

    r = sub.add_parser("run", help="run odometry and mapping over a dataset")
    _common(r)

    e = sub.add_parser("eval", help="absolute trajectory error")
    e.add_argument("--gt", type=Path, help="ground-truth TUM file (default: DATASET/groundtruth.txt)")
    e.add_argument("--est", type=Path, help="estimated TUM file (default: OUTPUT/trajectory.txt)")
    e.add_argument("--align", choices=("rigid", "none"), default="rigid")
    _common(e)

    a = sub.add_parser("ablate", help="compare enabled surfel depth sets")
    a.add_argument("--depth-sets", default="1;2;3;4;5;1,2,3,4,5",
                   help="semicolon-separated depth lists")
    _common(a)
    return ap


def _run_config(args, **extra):
    return load_run_config(args.dataset, args.config, output=str(args.output) if args.output else None,
                           loop_closure=args.loop_closure, seed=args.seed,
                           max_points_per_bundle=args.max_points_per_bundle, **extra)


def cmd_sim(args) -> int:
    from .sim import default_sim_config, generate_dataset, preset
    if args.output is None:
        raise ConfigError("sim needs --output")
    world, spec = preset(args.world, args.duration)
    cfg = default_sim_config(noisy=args.noise, seed=args.seed or 0)
    man = generate_dataset(world, spec, cfg, args.output)
    print(f"wrote {args.output}: {man['scan_points']} points, {man['imu_rows']} IMU samples")
    return 0


def cmd_run(args) -> int:
    from .pipeline import run_odometry
    if args.dataset is None:
        raise ConfigError("run needs --dataset")
    cfg = _run_config(args)
    res = run_odometry(cfg)
    print(f"{len(res.trajectory)} poses, {len(res.keyframes)} keyframes, {res.loops} loop closures, "
          f"{res.seconds:.1f} s")
    gt = Path(cfg.dataset) / "groundtruth.txt"
    if gt.exists():
        print(evaluate_ate(read_tum(gt), res.trajectory).summary())
    return 0


def cmd_eval(args) -> int:
    gt = args.gt or (args.dataset / "groundtruth.txt" if args.dataset else None)
    est = args.est or (args.output / "trajectory.txt" if args.output else None)
    if gt is None or est is None:
        raise ConfigError("eval needs --gt/--dataset and --est/--output")
    print(evaluate_ate(read_tum(gt), read_tum(est), args.align).summary())
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import load_streams, run_odometry
    if args.dataset is None:
        raise ConfigError("ablate needs --dataset")
    sets = []
    for chunk in args.depth_sets.split(";"):
        try:
            sets.append(tuple(int(d) for d in chunk.split(",") if d.strip()))
        except ValueError:
            raise ConfigError(f"bad depth list '{chunk}'") from None
    base = _run_config(args, output="")
    gt = read_tum(Path(base.dataset) / "groundtruth.txt")
    streams, imu = load_streams(base)
    rows = ["depths,ate_rmse_m,keyframes,seconds"]
    for depths in sets:
        cfg = base.replace(enabled_depths=depths)
        res = run_odometry(cfg, streams, imu)
        rep = evaluate_ate(gt, res.trajectory)
        label = "-".join(map(str, depths))
        rows.append(f"{label},{rep.rmse:.6f},{len(res.keyframes)},{res.seconds:.1f}")
        print(f"depths {label:<12} ATE {rep.rmse:.6f} m")
    if args.output:
        args.output.mkdir(parents=True, exist_ok=True)
        (args.output / "ablation.csv").write_text("\n".join(rows) + "\n")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    handler = {"sim": cmd_sim, "run": cmd_run, "eval": cmd_eval, "ablate": cmd_ablate}[args.cmd]
    try:
        return handler(args)
    except EXPECTED as e:
        print(f"surfel-lio {args.cmd}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
