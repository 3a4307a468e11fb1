"""Continuation of FK solutions along joint-space paths.

A path is piecewise linear in joint space and parametrised by arc length.
The pose is carried along with a zeroth-order predictor (the previous pose)
and a Newton corrector on ``F(X, q) = 0``; steps are halved when Newton
struggles or the pose jumps by more than a workspace leaf, and the trace
stops, without guessing, when det A collapses at an iterate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rpr3 import manipulator as mk
from rpr3.manipulator import JointVector, ManipulatorGeometry, Pose

SINGULAR_DET = 1e-10
NEWTON_TOL = 1e-11
MAX_NEWTON = 8
START_TOL = 1e-6
# workspace leaf at the default depth 7 over [-33, 33]^2 x [-pi, pi)
DEFAULT_LEAF = (66.0 / 128, 66.0 / 128, 2 * math.pi / 128)


class PathError(ValueError):
    """Raised for unusable inputs (start off the FK fiber, bad waypoints)."""


@dataclass(frozen=True)
class JointPath:
    """Piecewise-linear joint-space path; ``step`` bounds the arc-length increment."""
    waypoints: tuple
    step: float = 0.05

    def __post_init__(self):
        pts = tuple(tuple(float(v) for v in JointVector(w).rho) for w in self.waypoints)
        if len(pts) < 2:
            raise PathError("a path needs at least two waypoints")
        if not self.step > 0:
            raise PathError("step must be positive")
        object.__setattr__(self, "waypoints", pts)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.waypoints)

    @property
    def knots(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.array, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.knots[-1])

    @property
    def closed(self) -> bool:
        return bool(np.allclose(self.array[0], self.array[-1], atol=1e-9))

    def at(self, t: float) -> np.ndarray:
        knots = self.knots
        w = self.array
        if knots[-1] == 0.0:
            return w[0].copy()
        t = min(max(t, 0.0), knots[-1])
        i = int(np.clip(np.searchsorted(knots, t, side="right") - 1, 0, len(w) - 2))
        span = knots[i + 1] - knots[i]
        u = 0.0 if span == 0 else (t - knots[i]) / span
        return w[i] + u * (w[i + 1] - w[i])

    def check_limits(self, g: ManipulatorGeometry):
        # the limit box is convex, so checking waypoints covers the segments
        if not np.all(mk.limits_mask(g, self.array)):
            raise PathError("every waypoint must lie within the joint limits")

    def reversed(self) -> "JointPath":
        return JointPath(self.waypoints[::-1], self.step)


@dataclass
class PathReport:
    """Trace of one continuation run."""
    params: np.ndarray
    poses: np.ndarray
    joints: np.ndarray
    det_a: np.ndarray
    sign_changes: list
    closed: bool
    mode_changed: bool
    failed_at: float | None = None
    message: str = ""
    start_region: int | None = None
    end_region: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failed_at is None

    @property
    def min_abs_det(self) -> float:
        return float(np.min(np.abs(self.det_a))) if len(self.det_a) else math.nan

    @property
    def start(self) -> Pose:
        return Pose(*self.poses[0])

    @property
    def end(self) -> Pose:
        return Pose(*self.poses[-1])

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "failed_at": self.failed_at,
            "message": self.message,
            "steps": int(len(self.params) - 1),
            "closed": self.closed,
            "mode_changed": self.mode_changed,
            "min_abs_det_a": self.min_abs_det,
            "sign_change_count": len(self.sign_changes),
            "sign_changes": [float(t) for t in self.sign_changes],
            "start_pose": self.poses[0].tolist(),
            "end_pose": self.poses[-1].tolist(),
            "start_region": self.start_region,
            "end_region": self.end_region,
            "trace": [{"t": float(t), "rho": q.tolist(), "pose": p.tolist(), "det_a": float(d)}
                      for t, q, p, d in zip(self.params, self.joints, self.poses, self.det_a)],
            **self.extra,
        }


def _residual(g, X, q):
    v = mk.leg_vectors(g, X)
    return np.sum(v * v, axis=-1) - q * q


def _newton(g, X, q, max_iter):
    """Newton on F(., q) from X; returns (pose, iterations, status)."""
    for it in range(1, max_iter + 1):
        A = mk.jacobian_a_array(g, X)
        if abs(np.linalg.det(A)) < SINGULAR_DET:
            return X, it, "singular"
        X = X - np.linalg.solve(A, _residual(g, X, q))
        X[2] = float(mk.wrap_angle(X[2]))
        if np.max(np.abs(_residual(g, X, q))) <= NEWTON_TOL:
            return X, it, "ok"
    return X, max_iter, "slow"


def _jump(a, b):
    d = np.abs(a - b)
    d[2] = abs(float(mk.wrap_angle(a[2] - b[2])))
    return d


def continue_path(g: ManipulatorGeometry, path: JointPath, start: Pose,
                  leaf=DEFAULT_LEAF, min_step=1e-7) -> PathReport:
    """Carry ``start`` along ``path`` by predictor-corrector continuation."""
    path.check_limits(g)
    q0 = path.at(0.0)
    X = start.as_array()
    if np.max(np.abs(_residual(g, X, q0))) > START_TOL:
        raise PathError("start pose is not an FK solution of the first waypoint")
    X, _, status = _newton(g, X, q0, 20)
    if status == "singular":
        raise PathError("start pose is type-2 singular")
    leaf = np.asarray(leaf, float)
    L = path.length
    ts, Xs, qs = [0.0], [X.copy()], [q0]
    dets = [float(np.linalg.det(mk.jacobian_a_array(g, X)))]
    t, h = 0.0, path.step
    failed, message = None, ""
    while t < L - 1e-12:
        t1 = min(t + h, L)
        q1 = path.at(t1)
        Y, it, status = _newton(g, X.copy(), q1, MAX_NEWTON)
        big = np.any(_jump(Y, X) > leaf)
        if status == "singular":
            failed, message = t1, "det A fell below the refinement threshold"
            break
        if status != "ok" or big:
            h *= 0.5
            if h < min_step:
                failed, message = t1, "step fell below the minimum; branch lost"
                break
            continue
        t, X = t1, Y
        ts.append(t)
        Xs.append(X.copy())
        qs.append(q1)
        dets.append(float(np.linalg.det(mk.jacobian_a_array(g, X))))
        if it <= 3:
            h = min(path.step, 2 * h)
    det = np.array(dets)
    s = np.sign(det)
    changes = [0.5 * (ts[i] + ts[i + 1]) for i in range(len(s) - 1) if s[i] != s[i + 1]]
    poses = np.array(Xs)
    closed = path.closed
    moved = bool(np.max(_jump(poses[-1], poses[0])) > 1e-6)
    return PathReport(np.array(ts), poses, np.array(qs), det, changes, closed,
                      bool(failed is None and closed and moved), failed, message)


# ---------------------------------------------------------------- classify --

@dataclass
class ModeChangeClassification:
    """Basic-region reading of a trace."""
    regions: np.ndarray
    class_sizes: np.ndarray
    sequence: list
    enters_size_two: bool
    nonsingular_mode_change: bool
    necessary_condition_holds: bool
    impossible_transitions: list

    def to_dict(self) -> dict:
        return {"region_sequence": self.sequence,
                "class_sizes_visited": sorted(set(int(c) for c in self.class_sizes if c > 0)),
                "enters_size_two_class": self.enters_size_two,
                "nonsingular_mode_change": self.nonsingular_mode_change,
                "necessary_condition_holds": self.necessary_condition_holds,
                "impossible_transitions": self.impossible_transitions}


def classify_mode_change(report: PathReport, bundle) -> ModeChangeClassification:
    """Label a trace with basic regions and check the mode-change conditions.

    A non-singular mode change must pass through a coincidence class of size
    two.  Consecutive distinct regions that both belong to size-6 classes,
    with no region in between, are listed as impossible transitions.
    """
    poses = np.atleast_2d(report.poses)
    lo = np.asarray(bundle.config.workspace_box.lo)
    hi = np.asarray(bundle.config.workspace_box.hi)
    if np.any(poses[:, :2] < lo[:2]) or np.any(poses[:, :2] > hi[:2]):
        raise PathError("trace leaves the analyzed workspace box")
    jb = bundle.config.joint_bounds(bundle.geometry)
    if np.any(report.joints < np.asarray(jb.lo) - 1e-9) or \
            np.any(report.joints > np.asarray(jb.hi) + 1e-9):
        raise PathError("trace leaves the analyzed joint box")
    regions = bundle.region_of(poses)
    sizes_of = bundle.class_size_of_region()
    sizes = np.where(regions >= 0, sizes_of[np.maximum(regions, 0)], 0)
    seq = []
    for r in regions.tolist():
        if r >= 0 and (not seq or seq[-1] != r):
            seq.append(int(r))
    bad = [[a, b] for a, b in zip(seq, seq[1:])
           if sizes_of[a] == 6 and sizes_of[b] == 6]
    enters = bool(np.any(sizes == 2))
    nonsing = bool(report.mode_changed and not report.sign_changes)
    report.start_region = int(regions[0])
    report.end_region = int(regions[-1])
    return ModeChangeClassification(regions, sizes, seq, enters, nonsing,
                                    (not nonsing) or enters, bad)


# ------------------------------------------------------------------ search --

def find_mode_change_loop(g: ManipulatorGeometry, q0, start: Pose, bundle, tries=400,
                          seed=0, step=0.05, target: Pose | None = None):
    """Search a closed path q0 -> q1 -> w -> q0 that changes assembly mode.

    ``q1`` is drawn where the multiplicity map reads 2 and ``w`` anywhere in
    the limit box; a candidate is kept when the continuation succeeds, ends
    at another FK solution of q0, never changes the sign of det A and keeps
    |det A| at least 10x above the refinement threshold.  With ``target``
    the loop must end within 1e-6 of that pose.  Returns
    (path, report) or (None, None).
    """
    rng = np.random.default_rng(seed)
    q0 = np.asarray(q0, float)
    lo, hi = g.rho_min, g.rho_max
    pool = lo + (hi - lo) * rng.random((20000, 3))
    pool = pool[bundle.multiplicity_at(pool) == 2]
    pool = pool[mk.fk_batch(g, pool).count == 2]
    if len(pool) == 0:
        return None, None
    for _ in range(tries):
        q1 = pool[rng.integers(len(pool))]
        w = lo + (hi - lo) * rng.random(3)
        path = JointPath((tuple(q0), tuple(q1), tuple(w), tuple(q0)), step)
        rep = continue_path(g, path, start)
        if not (rep.mode_changed and not rep.sign_changes
                and rep.min_abs_det >= 10 * SINGULAR_DET):
            continue
        if target is None or np.max(_jump(rep.poses[-1], target.as_array())) <= 1e-6:
            return path, rep
    return None, None


# ---------------------------------------------------------------------- io --

def read_path_csv(path, step=0.05) -> JointPath:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append(tuple(float(v) for v in row[:3]))
            except ValueError:
                if rows:
                    raise PathError(f"bad waypoint row {row!r}") from None
                continue  # header
            if len(row) < 3:
                raise PathError(f"waypoint rows need three values: {row!r}")
    return JointPath(tuple(rows), step)


def write_path_csv(path, jp: JointPath):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho1", "rho2", "rho3"])
        for q in jp.waypoints:
            w.writerow([repr(v) for v in q])


def write_report_json(path, report: PathReport, classification=None):
    doc = report.to_dict()
    if classification is not None:
        doc["classification"] = classification.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def fixture_path() -> Path:
    return Path(__file__).with_name("data") / "mode_change_path.csv"


def fixture_meta() -> dict:
    return json.loads((Path(__file__).with_name("data") / "mode_change_path.json").read_text())
