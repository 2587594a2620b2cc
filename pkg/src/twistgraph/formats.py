"""On-disk formats: flat key=value configs and comma-separated record files.

Poses serialize as `tx,ty,tz,qw,qx,qy,qz` (unit quaternion, w first,
normalized on read).  Every writer round-trips losslessly through the
matching reader.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields, field

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .manifold import Pose3, Rotation3
from .simkit import GroundTruth, ScenarioConfig, TwistSegment
from .tracking import MeasurementRecord, TrackingConfig, TrajectoryEstimate
from .fgraph import SolverSettings


class ConfigError(ValueError):
    """Bad key, value, or syntax in a run configuration."""


def pose_to_fields(T: Pose3) -> list[str]:
    q = ScipyRotation.from_matrix(T.rotation.matrix).as_quat()  # x, y, z, w
    vals = list(T.translation) + [q[3], q[0], q[1], q[2]]
    return [f"{v:.12g}" for v in vals]


def pose_from_fields(fs: list[str]) -> Pose3:
    t = np.array([float(v) for v in fs[:3]])
    qw, qx, qy, qz = (float(v) for v in fs[3:7])
    q = np.array([qx, qy, qz, qw])
    q = q / np.linalg.norm(q)
    return Pose3(Rotation3(ScipyRotation.from_quat(q).as_matrix()), t)


POSE_COLS = ["tx", "ty", "tz", "qw", "qx", "qy", "qz"]


# ---------------------------------------------------------------------------
# Trajectory (ground truth) files.


def write_truth(path, truth: GroundTruth) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "agent"] + POSE_COLS)
        for t, C, T in zip(truth.times, truth.chaser, truth.target):
            w.writerow([f"{t:.9g}", "chaser"] + pose_to_fields(C))
            w.writerow([f"{t:.9g}", "target"] + pose_to_fields(T))
            n += 2
    return n


def read_truth(path) -> GroundTruth:
    times, chaser, target = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            t = float(row[0])
            pose = pose_from_fields(row[2:9])
            if row[1] == "chaser":
                times.append(t)
                chaser.append(pose)
            else:
                target.append(pose)
    if len(chaser) != len(target):
        raise ConfigError(f"unpaired trajectory rows in {path}")
    return GroundTruth(times=np.asarray(times), chaser=chaser, target=target)


# ---------------------------------------------------------------------------
# Measurement files.


def write_measurements(path, records: list[MeasurementRecord]) -> int:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "kind"] + POSE_COLS)
        for rec in records:
            if rec.kind == "USBL":
                payload = [f"{v:.12g}" for v in rec.payload] + [""] * 4
            else:
                payload = pose_to_fields(rec.payload)
            w.writerow([f"{rec.timestamp:.9g}", rec.kind] + payload)
    return len(records)


def read_measurements(path) -> list[MeasurementRecord]:
    records = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            t, kind = float(row[0]), row[1]
            if kind == "USBL":
                payload = np.array([float(v) for v in row[2:5]])
            elif kind in ("ODOM", "OPTICAL"):
                payload = pose_from_fields(row[2:9])
            else:
                raise ConfigError(f"unknown measurement kind {kind!r} in {path}")
            records.append(MeasurementRecord(timestamp=t, kind=kind, payload=payload))
    return records


# ---------------------------------------------------------------------------
# Estimate files.


def write_estimate(path, estimate: TrajectoryEstimate) -> int:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "trigger", "group"]
                   + ["chaser_" + c for c in POSE_COLS]
                   + ["target_" + c for c in POSE_COLS]
                   + ["rel_x", "rel_y", "rel_z", "rel_angle"])
        for i, kf in enumerate(estimate.keyframes):
            S = estimate.target_states[i]
            if isinstance(S, Pose3):
                tgt = pose_to_fields(S)
            else:  # R^3 state: orientation columns stay empty
                tgt = [f"{v:.12g}" for v in S.coords] + [""] * 4
            ang = estimate.rel_angles[i]
            w.writerow(
                [f"{kf.timestamp:.9g}", kf.trigger, kf.group]
                + pose_to_fields(estimate.chaser_poses[i]) + tgt
                + [f"{v:.12g}" for v in estimate.rel_positions[i]]
                + [f"{ang:.12g}" if np.isfinite(ang) else ""])
    return len(estimate.keyframes)


@dataclass
class EstimateRow:
    timestamp: float
    trigger: str
    group: str
    chaser: Pose3
    target_position: np.ndarray
    target_pose: Pose3 | None
    rel_position: np.ndarray
    rel_angle: float  # nan when undefined


def read_estimate(path) -> list[EstimateRow]:
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            has_tgt_rot = row[13] != ""
            rows.append(EstimateRow(
                timestamp=float(row[0]), trigger=row[1], group=row[2],
                chaser=pose_from_fields(row[3:10]),
                target_position=np.array([float(v) for v in row[10:13]]),
                target_pose=pose_from_fields(row[10:17]) if has_tgt_rot else None,
                rel_position=np.array([float(v) for v in row[17:20]]),
                rel_angle=float(row[20]) if row[20] != "" else float("nan")))
    return rows


# ---------------------------------------------------------------------------
# Metrics files.


def write_metrics(path, groups: dict, baselines: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "group", "mean_pos", "std_pos", "count",
                    "mean_ang", "std_ang", "ang_count"])
        for g, s in groups.items():
            w.writerow(["estimate", g, f"{s.mean_pos:.6g}", f"{s.std_pos:.6g}",
                        s.count, f"{s.mean_ang:.6g}", f"{s.std_ang:.6g}",
                        s.ang_count])
        for g, s in baselines.items():
            w.writerow(["baseline", g, f"{s.mean_pos:.6g}", f"{s.std_pos:.6g}",
                        s.count, f"{s.mean_ang:.6g}", f"{s.std_ang:.6g}",
                        s.ang_count])


def metrics_table(groups: dict, baselines: dict) -> str:
    lines = [f"{'row':<10}{'group':<9}{'pos mean±std [m]':<24}"
             f"{'angle mean±std [rad]':<24}{'n':>5}"]
    for label, d in (("estimate", groups), ("baseline", baselines)):
        for g, s in d.items():
            pos = f"{s.mean_pos:.3f} ± {s.std_pos:.3f}" if s.count else "---"
            ang = (f"{s.mean_ang:.4f} ± {s.std_ang:.4f}"
                   if s.ang_count else "---")
            lines.append(f"{label:<10}{g:<9}{pos:<24}{ang:<24}{s.count:>5}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Run configuration: flat key=value text plus command-line overrides.


@dataclass
class RunConfig:
    mode: str = "A"
    gate: float = 1.0
    seed: int = 0
    # scenario
    duration: float = 320.0
    dt: float = 0.05
    odom_rate_hz: float = 10.0
    usbl_rate_hz: float = 0.5
    optical_rate_hz: float = 2.0
    optical_windows: list = field(default_factory=list)  # [(a, b), ...]
    gaps: list = field(default_factory=list)
    chaser_start: Pose3 = field(default_factory=Pose3.identity)
    target_start: Pose3 = field(default_factory=Pose3.identity)
    chaser_segments: list = field(default_factory=list)  # [TwistSegment, ...]
    target_segments: list = field(default_factory=list)
    # noise
    odom_sigma_pos: float = 0.002
    odom_sigma_rot: float = 0.0005
    usbl_sigma: float = 1.5
    optical_sigma_pos: float = 0.05
    optical_sigma_rot: float = 0.01
    # estimation
    ct_sigma_pos: float = 0.05
    ct_sigma_rot: float = 0.005
    rp_sigma: float = 0.05
    boundary_sigma: float = 0.01
    down_after: int = 1
    chaser_prior_sigma_pos: float = 1e-4
    chaser_prior_sigma_rot: float = 1e-4
    target_prior_sigma_pos: float = 10.0
    target_prior_sigma_rot: float = 0.5
    # solver
    max_iterations: int = 100
    rel_cost_tol: float = 1e-9
    dx_tol: float = 1e-10
    init_lambda: float = 1e-4

    def scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(
            chaser_start=self.chaser_start, target_start=self.target_start,
            chaser_segments=self.chaser_segments,
            target_segments=self.target_segments,
            dt=self.dt, odom_rate_hz=self.odom_rate_hz,
            usbl_rate_hz=self.usbl_rate_hz,
            optical_rate_hz=self.optical_rate_hz,
            optical_windows=self.optical_windows, gaps=self.gaps,
            odom_sigma_pos=self.odom_sigma_pos,
            odom_sigma_rot=self.odom_sigma_rot,
            usbl_sigma=self.usbl_sigma,
            optical_sigma_pos=self.optical_sigma_pos,
            optical_sigma_rot=self.optical_sigma_rot, seed=self.seed)

    def tracking_config(self) -> TrackingConfig:
        return TrackingConfig(
            chaser_start=self.chaser_start, target_start=self.target_start,
            gate=self.gate,
            chaser_prior_sigma_pos=self.chaser_prior_sigma_pos,
            chaser_prior_sigma_rot=self.chaser_prior_sigma_rot,
            target_prior_sigma_pos=self.target_prior_sigma_pos,
            target_prior_sigma_rot=self.target_prior_sigma_rot,
            ct_sigma_pos=self.ct_sigma_pos, ct_sigma_rot=self.ct_sigma_rot,
            rp_sigma=self.rp_sigma, usbl_sigma=self.usbl_sigma,
            optical_sigma_pos=self.optical_sigma_pos,
            optical_sigma_rot=self.optical_sigma_rot,
            odom_sigma_pos=self.odom_sigma_pos,
            odom_sigma_rot=self.odom_sigma_rot,
            boundary_sigma=self.boundary_sigma)

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(
            max_iterations=self.max_iterations,
            rel_cost_tol=self.rel_cost_tol, dx_tol=self.dx_tol,
            init_lambda=self.init_lambda)


def _parse_pose(text: str) -> Pose3:
    vals = text.replace(",", " ").split()
    if len(vals) != 7:
        raise ConfigError(f"pose needs 7 numbers (tx ty tz qw qx qy qz): {text!r}")
    return pose_from_fields(vals)


def _parse_segments(text: str) -> list[TwistSegment]:
    segs = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        vals = [float(v) for v in part.replace(",", " ").split()]
        if len(vals) != 7:
            raise ConfigError(
                f"segment needs 7 numbers (vx vy vz wx wy wz duration): {part!r}")
        segs.append(TwistSegment(twist=np.array(vals[:6]), duration=vals[6]))
    return segs


def _parse_windows(text: str) -> list[tuple[float, float]]:
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        a, b = part.split(":")
        out.append((float(a), float(b)))
    return out


_PARSERS = {
    "mode": str,
    "optical_windows": _parse_windows,
    "gaps": _parse_windows,
    "chaser_start": _parse_pose,
    "target_start": _parse_pose,
    "chaser_segments": _parse_segments,
    "target_segments": _parse_segments,
    "seed": int,
    "down_after": int,
    "max_iterations": int,
}


def parse_config(lines, source: str = "<config>",
                 overrides: dict | None = None) -> RunConfig:
    """Flat key=value parser; later assignments (and overrides) win.

    Unknown keys are rejected with the offending line number.
    """
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        _assign(cfg, key, value, f"{source}:{lineno}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"override: unknown key {key!r}")
        if isinstance(value, str):
            _assign(cfg, key, value, "override")
        else:
            setattr(cfg, key, value)
    _validate(cfg)
    return cfg


def _assign(cfg: RunConfig, key: str, value: str, where: str) -> None:
    parser = _PARSERS.get(key, float)
    try:
        setattr(cfg, key, parser(value))
    except (ValueError, ConfigError) as err:
        raise ConfigError(f"{where}: bad value for {key!r}: {err}") from err


def _validate(cfg: RunConfig) -> None:
    if cfg.mode not in ("A", "B"):
        raise ConfigError(f"mode must be A or B, got {cfg.mode!r}")
    if cfg.gate <= 0:
        raise ConfigError("gate must be positive")
    for name in ("usbl_sigma", "optical_sigma_pos", "optical_sigma_rot",
                 "odom_sigma_pos", "odom_sigma_rot"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    for name in ("ct_sigma_pos", "ct_sigma_rot", "rp_sigma", "boundary_sigma",
                 "dt", "odom_rate_hz"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh, source=str(path), overrides=overrides)
