"""Uniform B-splines in matrix form.

Control points are 0-based: ``Q_0 .. Q_{N-1}``.  With degree ``p`` and knot
spacing ``dt`` the valid time span is ``[t0, t0 + (N - p) * dt]``; on segment
``i`` the curve is ``[1, u, ..., u^p] @ M_{p+1} @ Q[i : i + p + 1]`` with
``u`` in ``[0, 1)``.  Ground-mode splines carry 2-D control points (x, y),
aerial ones 3-D.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial
from typing import Tuple

import numpy as np

from .errors import InvalidParameterError, OutOfDomainError

GROUND, AERIAL = "ground", "aerial"


@lru_cache(maxsize=None)
def basis_matrix(degree: int) -> np.ndarray:
    """Constant (p+1)x(p+1) matrix of the uniform B-spline of degree ``p``;
    row = power of ``u``, column = control point."""
    k = degree + 1
    m = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            s = sum((-1) ** (s - j) * comb(k, s - j) * (k - s - 1) ** (k - 1 - i)
                    for s in range(j, k))
            m[i, j] = comb(k - 1, i) * s / factorial(k - 1)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class BSplineTrajectory:
    control_points: np.ndarray
    dt: float
    degree: int = 3
    t0: float = 0.0

    def __post_init__(self):
        q = np.array(self.control_points, dtype=np.float64)
        if q.ndim == 1:
            q = q[:, None]
        if self.degree < 0:
            raise InvalidParameterError("degree must be >= 0")
        if len(q) < self.degree + 1:
            raise InvalidParameterError(
                f"need at least {self.degree + 1} control points, got {len(q)}")
        if not self.dt > 0:
            raise InvalidParameterError("knot spacing dt must be positive")
        if not np.all(np.isfinite(q)):
            raise InvalidParameterError("control points must be finite")
        q.setflags(write=False)
        object.__setattr__(self, "control_points", q)

    @property
    def num_control_points(self) -> int:
        return len(self.control_points)

    @property
    def dim(self) -> int:
        return self.control_points.shape[1]

    @property
    def mode(self) -> str:
        return GROUND if self.dim == 2 else AERIAL

    @property
    def num_knots(self) -> int:
        return self.num_control_points + self.degree + 1

    @property
    def duration(self) -> float:
        return (self.num_control_points - self.degree) * self.dt

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration

    def _segments(self, t: np.ndarray):
        s = (t - self.t0) / self.dt
        nseg = self.num_control_points - self.degree
        tol = 1e-9 * max(1.0, nseg)
        if np.any(s < -tol) or np.any(s > nseg + tol):
            raise OutOfDomainError(
                f"t outside valid span [{self.t0}, {self.t_end}]")
        seg = np.clip(np.floor(s).astype(np.int64), 0, nseg - 1)
        return seg, s - seg

    def evaluate(self, t):
        """Point(s) on the curve; ``t`` may be a scalar or an array."""
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        seg, u = self._segments(t)
        p = self.degree
        powers = u[:, None] ** np.arange(p + 1)[None, :]
        weights = powers @ basis_matrix(p)                    # (T, p+1)
        idx = seg[:, None] + np.arange(p + 1)[None, :]
        out = np.einsum("tk,tkd->td", weights, self.control_points[idx])
        return out[0] if scalar else out

    def derivative(self, order: int = 1) -> "BSplineTrajectory":
        if order < 0 or order > self.degree:
            raise InvalidParameterError(f"derivative order {order} exceeds degree {self.degree}")
        q = self.control_points
        for _ in range(order):
            q = np.diff(q, axis=0) / self.dt
        return BSplineTrajectory(q, self.dt, self.degree - order, self.t0)

    def with_control_points(self, q) -> "BSplineTrajectory":
        return BSplineTrajectory(q, self.dt, self.degree, self.t0)

    def shifted(self, t0: float) -> "BSplineTrajectory":
        return BSplineTrajectory(self.control_points, self.dt, self.degree, t0)

    def to_3d(self) -> "BSplineTrajectory":
        if self.dim == 3:
            return self
        q = np.column_stack([self.control_points, np.zeros(self.num_control_points)])
        return self.with_control_points(q)

    def to_json(self) -> str:
        doc = {"degree": self.degree, "dt": self.dt, "mode": self.mode,
               "control_points": self.control_points.tolist()}
        if self.t0:
            doc["t0"] = self.t0
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "BSplineTrajectory":
        doc = json.loads(text)
        q = np.asarray(doc["control_points"], dtype=np.float64)
        expected = 2 if doc.get("mode") == GROUND else 3
        if q.shape[1] != expected:
            raise InvalidParameterError("control point dimension does not match mode")
        return cls(q, float(doc["dt"]), int(doc["degree"]), float(doc.get("t0", 0.0)))


def flatten_to_ground(traj: BSplineTrajectory) -> BSplineTrajectory:
    """Drop the vertical component of every control point."""
    if traj.mode == GROUND:
        return traj
    return traj.with_control_points(traj.control_points[:, :2])


def _second_difference(n: int) -> np.ndarray:
    d = np.zeros((max(n - 2, 0), n))
    for i in range(n - 2):
        d[i, i:i + 3] = (1.0, -2.0, 1.0)
    return d


def fit_to_waypoints(waypoints, dt: float, num_control_points: int | None = None,
                     smoothing: float = 1e-9) -> Tuple[BSplineTrajectory, float]:
    """Least-squares cubic fit through ``waypoints`` spread uniformly over the
    valid span, with the first and last waypoint matched exactly.

    By default there are ``K + 2`` control points for ``K`` waypoints, so the
    waypoints sit on the knots at spacing ``dt``.  A tiny second-difference
    penalty picks a unique solution when the fit is underdetermined.  Returns
    ``(trajectory, max residual)``.
    """
    w = np.asarray(waypoints, dtype=np.float64)
    if w.ndim != 2 or len(w) < 2:
        raise InvalidParameterError("need at least two waypoints")
    if not dt > 0:
        raise InvalidParameterError("dt must be positive")
    p = 3
    k = len(w)
    n = num_control_points if num_control_points is not None else k + 2
    if n < p + 1:
        raise InvalidParameterError("too few control points for a cubic")
    span = (n - p) * dt
    times = np.linspace(0.0, span, k)
    template = BSplineTrajectory(np.zeros((n, 1)), dt, p)
    a = _collocation(template, times)                       # (K, N)
    c = a[[0, -1]]
    d2 = _second_difference(n)
    h = 2.0 * (a.T @ a + smoothing * d2.T @ d2)
    kkt = np.zeros((n + 2, n + 2))
    kkt[:n, :n] = h
    kkt[:n, n:] = c.T
    kkt[n:, :n] = c
    rhs = np.vstack([2.0 * a.T @ w, w[[0, -1]]])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    q = sol[:n]
    traj = BSplineTrajectory(q, dt, p)
    residual = float(np.max(np.linalg.norm(a @ q - w, axis=1)))
    return traj, residual


def _collocation(template: BSplineTrajectory, times: np.ndarray) -> np.ndarray:
    """Matrix mapping control points to curve values at ``times``."""
    seg, u = template._segments(template.t0 + times)
    p = template.degree
    weights = (u[:, None] ** np.arange(p + 1)[None, :]) @ basis_matrix(p)
    a = np.zeros((len(times), template.num_control_points))
    for r, (s, wrow) in enumerate(zip(seg, weights)):
        a[r, s:s + p + 1] = wrow
    return a


def boundary_control_points(position, velocity, acceleration, dt: float) -> np.ndarray:
    """First three cubic control points that start the curve with the given
    position, velocity and acceleration."""
    p = np.asarray(position, dtype=np.float64)
    v = np.asarray(velocity, dtype=np.float64)
    a = np.asarray(acceleration, dtype=np.float64)
    q1 = p - a * dt * dt / 6.0
    return np.stack([q1 + a * dt * dt / 2.0 - v * dt, q1, q1 + a * dt * dt / 2.0 + v * dt])
