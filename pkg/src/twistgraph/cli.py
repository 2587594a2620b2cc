"""Command-line front end.

Subcommands: simulate, smooth, metrics, unit-circle.
Exit codes: 0 success, 2 configuration error, 3 solver did not converge,
4 underconstrained problem.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import formats, simkit, tracking
from .fgraph import UnderconstrainedGraphError, optimize, total_cost
from .formats import ConfigError, RunConfig
from .simkit import TwistSegment
from .tracking import ModePolicy, NeedsPriorError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_UNDERCONSTRAINED = 4


def _default_segments(cfg: RunConfig) -> None:
    """Fill in a curved rendezvous scenario when the config names none."""
    d = cfg.duration
    if not cfg.optical_windows:
        cfg.optical_windows = [(0.30 * d, 0.40 * d), (0.80 * d, 0.90 * d)]
    if not cfg.gaps:
        cfg.gaps = [(0.19 * d, 0.28 * d), (0.72 * d, 0.80 * d)]
    if not cfg.chaser_segments:
        half = cfg.duration / 2.0
        cfg.chaser_segments = [
            TwistSegment(np.array([0.35, 0.0, 0.0, 0.0, 0.0, 0.012]), half),
            TwistSegment(np.array([0.25, 0.0, 0.02, 0.0, 0.0, -0.010]), half)]
    if not cfg.target_segments:
        third = cfg.duration / 3.0
        cfg.target_segments = [
            TwistSegment(np.array([0.30, 0.0, 0.0, 0.0, 0.0, 0.008]), third),
            TwistSegment(np.array([0.22, 0.0, 0.0, 0.0, 0.0, -0.015]), third),
            TwistSegment(np.array([0.28, 0.0, 0.0, 0.0, 0.0, 0.010]), third)]


def _load(args, **overrides) -> RunConfig:
    if args.config:
        cfg = formats.load_config(args.config, overrides)
    else:
        cfg = formats.parse_config([], overrides=overrides)
    _default_segments(cfg)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load(args, seed=args.seed)
    truth = simkit.generate_ground_truth(cfg.scenario_config())
    records = simkit.synthesize_measurements(truth, cfg.scenario_config())
    formats.write_truth(args.out_truth, truth)
    formats.write_measurements(args.out_meas, records)
    print(f"simulate: {len(truth.times)} truth samples, "
          f"{len(records)} measurements (seed {cfg.seed})")
    return EXIT_OK


def cmd_smooth(args) -> int:
    cfg = _load(args, mode=args.mode, gate=args.gate)
    records = formats.read_measurements(args.meas)
    policy = ModePolicy(mode=cfg.mode, down_after=cfg.down_after)
    keyframes = tracking.schedule_keyframes(records, gate=cfg.gate, policy=policy)
    graph, initial = tracking.build_graph(
        keyframes, records, policy, cfg.tracking_config())
    estimate = tracking.smooth(graph, initial, cfg.solver_settings(), keyframes)
    formats.write_estimate(args.out, estimate)
    rpt = estimate.report
    print(f"smooth: mode {cfg.mode}, {len(keyframes)} keyframes, "
          f"{len(graph.factors)} factors, cost {rpt.final_cost:.6g} "
          f"after {rpt.iterations} iterations")
    if not rpt.converged:
        print("smooth: solver did not converge", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_metrics(args) -> int:
    truth = formats.read_truth(args.truth)
    rows = formats.read_estimate(args.estimate)
    estimate = _estimate_from_rows(rows)
    report = tracking.metrics(estimate, truth)
    baselines = {}
    if args.meas:
        records = formats.read_measurements(args.meas)
        baselines = tracking.measurement_baselines(records, truth)
    if args.out:
        formats.write_metrics(args.out, report.groups, baselines)
    print(formats.metrics_table(report.groups, baselines))
    return EXIT_OK


def _estimate_from_rows(rows) -> tracking.TrajectoryEstimate:
    """Rebuild enough of a TrajectoryEstimate from an estimate file to score it."""
    from .fgraph import SolveReport, VariableKey
    from .manifold import SE3, R3, EuclidPoint

    keyframes, chaser, target = [], [], []
    rel_pos = np.empty((len(rows), 3))
    rel_ang = np.empty(len(rows))
    for i, row in enumerate(rows):
        kind = SE3 if row.target_pose is not None else R3
        keyframes.append(tracking.Keyframe(
            timestamp=row.timestamp,
            chaser_key=VariableKey(id=2 * i, kind=SE3, timestamp=row.timestamp),
            target_key=VariableKey(id=2 * i + 1, kind=kind,
                                   timestamp=row.timestamp),
            trigger=row.trigger,
            meas_kinds=(row.group,) if row.group != "GATE" else ()))
        chaser.append(row.chaser)
        target.append(row.target_pose if row.target_pose is not None
                      else EuclidPoint(row.target_position))
        rel_pos[i] = row.rel_position
        rel_ang[i] = row.rel_angle
    return tracking.TrajectoryEstimate(
        keyframes=keyframes, chaser_poses=chaser, target_states=target,
        rel_positions=rel_pos, rel_angles=rel_ang, report=SolveReport())


def cmd_unit_circle(args) -> int:
    graph, initial, keys, oracle = simkit.unit_circle_fixtures(
        args.variant, sigma=args.sigma, seed=args.seed)
    solution, report = optimize(graph, initial)
    worst = 0.0
    for key in keys:
        worst = max(worst, simkit.arc_distance(solution.get(key).translation))
    print(f"unit-circle {args.variant}: cost {total_cost(graph, initial):.4g} "
          f"-> {report.final_cost:.4g} in {report.iterations} iterations, "
          f"max arc distance {worst:.3g}")
    if not report.converged:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="twistgraph",
        description="Constant-twist factor-graph smoothing tools.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate ground truth and measurements")
    s.add_argument("--config", help="key=value run configuration file")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out-truth", required=True)
    s.add_argument("--out-meas", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("smooth", help="run the factor-graph smoother")
    s.add_argument("--config", help="key=value run configuration file")
    s.add_argument("--meas", required=True, help="measurement stream file")
    s.add_argument("--mode", choices=("A", "B"), default=None)
    s.add_argument("--gate", type=float, default=None)
    s.add_argument("--out", required=True, help="estimate output file")
    s.set_defaults(fn=cmd_smooth)

    s = sub.add_parser("metrics", help="score an estimate against ground truth")
    s.add_argument("--estimate", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--meas", help="optional stream for raw-measurement baselines")
    s.add_argument("--out", help="optional metrics output file")
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("unit-circle", help="run a unit-circle fixture")
    s.add_argument("--variant", required=True,
                   choices=("EXTRAPOLATE", "INTERPOLATE", "CHAIN"))
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_unit_circle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnderconstrainedGraphError, NeedsPriorError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_UNDERCONSTRAINED


if __name__ == "__main__":
    sys.exit(main())
