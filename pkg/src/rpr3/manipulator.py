"""Kinematics of the planar 3-RPR parallel manipulator.

Base anchors ``A1 = (0, 0)``, ``A2 = (c2, 0)``, ``A3 = (c3, d3)``; the platform
is the triangle ``B1 B2 B3`` with ``B1`` as its origin, so a pose
``(x, y, phi)`` places

    B1 = (x, y)
    B2 = B1 + l2 (cos phi, sin phi)
    B3 = B1 + l3 (cos(phi + theta), sin(phi + theta))

and the actuated joint ``i`` is the leg length ``|Ai Bi|``.  The residual
convention used throughout is ``F_i = |Ai Bi|^2 - rho_i^2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rpr3 import _fk

TWO_PI = 2.0 * math.pi
FK_SAMPLES = 2048
MERGE_TOL = 1e-6


def wrap_angle(phi):
    """Map an angle (scalar or array) into [-pi, pi)."""
    return (np.asarray(phi) + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class ManipulatorGeometry:
    base_points: tuple
    platform_edges: tuple
    joint_limits: tuple
    params: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        base = tuple(tuple(float(c) for c in p) for p in self.base_points)
        edges = tuple(float(e) for e in self.platform_edges)
        limits = _normalize_limits(self.joint_limits)
        if len(base) != 3 or any(len(p) != 2 for p in base):
            raise ValueError("base_points must be three 2-D points")
        if len(edges) != 3:
            raise ValueError("platform_edges must hold three lengths")
        if base[0] != (0.0, 0.0):
            raise ValueError("A1 must be the origin")
        if base[1][1] != 0.0:
            raise ValueError("A2 must lie on the x axis (A2.y == 0)")
        e12, e23, e31 = edges
        if not (e12 + e23 > e31 and e23 + e31 > e12 and e31 + e12 > e23):
            raise ValueError("platform edges violate the strict triangle inequality")
        for lo, hi in limits:
            if not 0.0 < lo < hi:
                raise ValueError("joint limits need 0 < rho_min < rho_max")
        object.__setattr__(self, "base_points", base)
        object.__setattr__(self, "platform_edges", edges)
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "params", np.array([
            self.c2, self.c3, self.d3, self.l2, self.l3,
            math.cos(self.theta), math.sin(self.theta)]))

    @property
    def l2(self) -> float:
        return self.platform_edges[0]

    @property
    def l3(self) -> float:
        return self.platform_edges[2]

    @property
    def cos_theta(self) -> float:
        e12, e23, e31 = self.platform_edges
        return (e12 * e12 + e31 * e31 - e23 * e23) / (2.0 * e12 * e31)

    @property
    def theta(self) -> float:
        """Interior platform angle at B1."""
        return math.acos(self.cos_theta)

    @property
    def c2(self) -> float:
        return self.base_points[1][0]

    @property
    def c3(self) -> float:
        return self.base_points[2][0]

    @property
    def d3(self) -> float:
        return self.base_points[2][1]

    @property
    def rho_min(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.joint_limits])

    @property
    def rho_max(self) -> np.ndarray:
        return np.array([hi for _, hi in self.joint_limits])

    @classmethod
    def reference(cls) -> "ManipulatorGeometry":
        return cls(base_points=((0.0, 0.0), (15.91, 0.0), (0.0, 10.0)),
                   platform_edges=(17.04, 16.54, 20.84),
                   joint_limits=(10.0, 32.0))

    @classmethod
    def from_dict(cls, doc: dict) -> "ManipulatorGeometry":
        try:
            return cls(base_points=doc["base_points"],
                       platform_edges=doc["platform_edges"],
                       joint_limits=doc["joint_limits"])
        except KeyError as exc:
            raise ValueError(f"geometry document is missing {exc}") from None

    @classmethod
    def load(cls, path) -> "ManipulatorGeometry":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        limits = self.joint_limits
        if all(lim == limits[0] for lim in limits):
            limits = list(limits[0])
        else:
            limits = [list(lim) for lim in limits]
        return {"base_points": [list(p) for p in self.base_points],
                "platform_edges": list(self.platform_edges),
                "joint_limits": limits}


def _normalize_limits(limits):
    limits = list(limits)
    if len(limits) == 2 and all(np.isscalar(v) for v in limits):
        limits = [limits] * 3
    if len(limits) != 3:
        raise ValueError("joint_limits must be [min, max] or three such pairs")
    return tuple((float(lo), float(hi)) for lo, hi in limits)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "phi", float(wrap_angle(self.phi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi])

    def distance(self, other: "Pose") -> float:
        """Max-norm distance with the angle wrapped."""
        return max(abs(self.x - other.x), abs(self.y - other.y),
                   abs(float(wrap_angle(self.phi - other.phi))))


@dataclass(frozen=True)
class JointVector:
    rho: tuple

    def __post_init__(self):
        rho = tuple(float(r) for r in self.rho)
        if len(rho) != 3:
            raise ValueError("a joint vector has three components")
        if any(r < 0.0 or not math.isfinite(r) for r in rho):
            raise ValueError("leg lengths must be finite and non-negative")
        object.__setattr__(self, "rho", rho)

    def as_array(self) -> np.ndarray:
        return np.array(self.rho)


@dataclass(frozen=True)
class JacobianPair:
    A: np.ndarray
    B: np.ndarray
    detA: float
    detB: float


# ---------------------------------------------------------------- inverse --

def leg_vectors(g: ManipulatorGeometry, poses) -> np.ndarray:
    """Vectors ``Bi - Ai`` for poses of shape (..., 3); result (..., 3, 2)."""
    poses = np.asarray(poses, dtype=float)
    x, y, phi = poses[..., 0], poses[..., 1], poses[..., 2]
    th = g.theta
    out = np.empty(poses.shape[:-1] + (3, 2))
    out[..., 0, 0] = x
    out[..., 0, 1] = y
    out[..., 1, 0] = x + g.l2 * np.cos(phi) - g.c2
    out[..., 1, 1] = y + g.l2 * np.sin(phi)
    out[..., 2, 0] = x + g.l3 * np.cos(phi + th) - g.c3
    out[..., 2, 1] = y + g.l3 * np.sin(phi + th) - g.d3
    return out


def ik_array(g: ManipulatorGeometry, poses) -> np.ndarray:
    """Leg lengths for an array of poses (..., 3)."""
    v = leg_vectors(g, poses)
    return np.hypot(v[..., 0], v[..., 1])


def inverse_kinematics(g: ManipulatorGeometry, X: Pose) -> JointVector:
    return JointVector(tuple(ik_array(g, X.as_array())))


def limits_mask(g: ManipulatorGeometry, rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    return np.all((rho >= g.rho_min) & (rho <= g.rho_max), axis=-1)


def within_limits(g: ManipulatorGeometry, q: JointVector) -> bool:
    return bool(limits_mask(g, q.as_array()))


def residual(g: ManipulatorGeometry, X: Pose, q: JointVector) -> np.ndarray:
    v = leg_vectors(g, X.as_array())
    return np.sum(v * v, axis=-1) - q.as_array() ** 2


# -------------------------------------------------------------- Jacobians --

def jacobian_a_array(g: ManipulatorGeometry, poses) -> np.ndarray:
    """dF/dX for poses (..., 3); result (..., 3, 3)."""
    poses = np.asarray(poses, dtype=float)
    phi = poses[..., 2]
    v = leg_vectors(g, poses)
    # d(Bi - Ai)/dphi
    dphi = np.zeros(v.shape)
    dphi[..., 1, 0] = -g.l2 * np.sin(phi)
    dphi[..., 1, 1] = g.l2 * np.cos(phi)
    dphi[..., 2, 0] = -g.l3 * np.sin(phi + g.theta)
    dphi[..., 2, 1] = g.l3 * np.cos(phi + g.theta)
    a = np.empty(poses.shape[:-1] + (3, 3))
    a[..., :, 0] = 2.0 * v[..., 0]
    a[..., :, 1] = 2.0 * v[..., 1]
    a[..., :, 2] = 2.0 * np.sum(v * dphi, axis=-1)
    return a


def det_a(g: ManipulatorGeometry, poses) -> np.ndarray:
    return np.linalg.det(jacobian_a_array(g, poses))


def jacobians(g: ManipulatorGeometry, X: Pose, q: JointVector) -> JacobianPair:
    A = jacobian_a_array(g, X.as_array())
    B = np.diag(-2.0 * q.as_array())
    return JacobianPair(A=A, B=B, detA=float(np.linalg.det(A)),
                        detB=float(np.prod(np.diag(B))))


# ---------------------------------------------------------------- forward --

@dataclass(frozen=True)
class FKBatch:
    """Solutions for a batch of joint vectors; rows past ``count`` are NaN."""
    poses: np.ndarray
    residual: np.ndarray
    det_a: np.ndarray
    count: np.ndarray


def fk_batch(g: ManipulatorGeometry, rho, samples: int = FK_SAMPLES,
             polish: bool = True) -> FKBatch:
    rho = np.ascontiguousarray(np.atleast_2d(rho), dtype=float)
    poses, res, dets, count = _fk.solve_batch(g.params, rho, int(samples),
                                              bool(polish), MERGE_TOL)
    return FKBatch(poses, res, dets, count)


def forward_kinematics(g: ManipulatorGeometry, q: JointVector,
                       samples: int = FK_SAMPLES) -> list:
    """All real assembly configurations for ``q``, sorted by (x, y, phi)."""
    if any(r <= 0.0 for r in q.rho):
        raise ValueError("forward kinematics needs positive leg lengths")
    out = fk_batch(g, q.as_array(), samples)
    n = int(out.count[0])
    poses = [Pose(*out.poses[0, j]) for j in range(n)]
    return sorted(poses, key=lambda p: (p.x, p.y, p.phi))


# ---------------------------------------------------- type-2 singularities --

def type2_singular_y(g: ManipulatorGeometry, x: float, phi: float,
                     y_range=(-33.0, 33.0), step: float = 66.0 / 128) -> list:
    """All y in ``y_range`` where det A(x, y, phi) vanishes.

    Sign changes are bracketed on a grid of spacing ``step`` and refined by
    bisection to machine precision.
    """
    lo, hi = y_range
    n = max(2, int(math.ceil((hi - lo) / step)) + 1)
    ys = np.linspace(lo, hi, n)
    pts = np.column_stack([np.full(n, x), ys, np.full(n, phi)])
    d = det_a(g, pts)

    def f(y):
        return float(det_a(g, (x, y, phi)))

    roots = []
    for i in np.flatnonzero(np.sign(d[:-1]) * np.sign(d[1:]) <= 0):
        a, b, fa = ys[i], ys[i + 1], d[i]
        if fa == 0.0:
            roots.append(float(a))
            continue
        if d[i + 1] == 0.0:
            continue
        while True:
            m = 0.5 * (a + b)
            if m == a or m == b:
                break
            fm = f(m)
            if fm == 0.0:
                a = b = m
                break
            if (fm > 0.0) == (fa > 0.0):
                a, fa = m, fm
            else:
                b = m
        roots.append(float(a if abs(f(a)) <= abs(f(b)) else b))
    return roots


def leg_lines_concurrency(g: ManipulatorGeometry, X: Pose) -> float:
    """Distance of the third leg line from the intersection of the other two.

    The two lines with the best-conditioned intersection are used, so two
    coincident lines do not spoil the test.  Returns ``inf`` when all three
    lines are parallel.
    """
    v = leg_vectors(g, X.as_array())
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    anchors = np.array(g.base_points)
    best, pair = 0.0, None
    for i, j in ((0, 1), (0, 2), (1, 2)):
        c = abs(u[i, 0] * u[j, 1] - u[i, 1] * u[j, 0])
        if c > best:
            best, pair = c, (i, j)
    if pair is None:
        return math.inf
    i, j = pair
    k = 3 - i - j
    di, dj = u[i], u[j]
    cross = di[0] * dj[1] - di[1] * dj[0]
    w = anchors[j] - anchors[i]
    t = (w[0] * dj[1] - w[1] * dj[0]) / cross
    p = anchors[i] + t * di
    w = p - anchors[k]
    return abs(w[0] * u[k, 1] - w[1] * u[k, 0])


def load_geometry(path=None) -> ManipulatorGeometry:
    if path is None:
        return ManipulatorGeometry.reference()
    return ManipulatorGeometry.load(Path(path))
