"""Residual models for bundle adjustment and pose-graph optimisation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import lie
from . import trace as tr
from .errors import CheiralityError, InvalidArgumentError


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class BalIntrinsics:
    """BAL radial camera; fields may be scalars or per-camera arrays."""

    f: object
    k1: object = 0.0
    k2: object = 0.0

    def __post_init__(self):
        if not np.all(np.asarray(self.f) > 0):
            raise InvalidArgumentError("focal length must be positive")

    def take(self, cidx):
        def pick(v):
            v = np.asarray(v, dtype=np.float64)
            return v if v.ndim == 0 else v[cidx]
        return pick(self.f), pick(self.k1), pick(self.k2)


@dataclass(frozen=True)
class Observation:
    camera_index: int
    point_index: int
    pixel: tuple


@dataclass(frozen=True)
class PgoEdge:
    i: int
    j: int
    measurement: lie.PoseSE3
    information: np.ndarray = field(default_factory=lambda: np.eye(6))

    def __post_init__(self):
        if self.i == self.j:
            raise InvalidArgumentError("an edge must connect two distinct poses")
        info = np.asarray(self.information, dtype=np.float64)
        if info.shape != (6, 6) or not np.allclose(info, info.T):
            raise InvalidArgumentError("information must be a symmetric 6x6 matrix")
        object.__setattr__(self, "information", info)


# -- projections on single poses -----------------------------------------------------


def pinhole_project(pose, point, k: PinholeIntrinsics, depth_eps=tr.DEPTH_EPS):
    p = lie.se3_act(pose, point)
    if not p[2] > depth_eps:
        raise CheiralityError([0], f"point at depth {p[2]:.3g} is behind the camera")
    return np.array([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])


def bal_project(pose, point, k: BalIntrinsics):
    p = lie.se3_act(pose, point)
    if not abs(p[2]) > 1e-12:
        raise CheiralityError([0], "point lies on the camera plane")
    q = -p[:2] / p[2]
    r2 = q @ q
    f, k1, k2 = (float(np.asarray(v)) for v in (k.f, k.k1, k.k2))
    return f * (1.0 + k1 * r2 + k2 * r2 * r2) * q


# -- traced residuals ----------------------------------------------------------------


def ba_residual(poses, points, intrinsics, camera_index, point_index, pixels):
    """One 2-row per observation: projection minus observed pixel."""
    cidx = np.asarray(camera_index, dtype=np.int64)
    pidx = np.asarray(point_index, dtype=np.int64)
    pc = tr.se3_act(poses[cidx], points[pidx])
    if isinstance(intrinsics, PinholeIntrinsics):
        proj = tr.pinhole(pc, intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)
    elif isinstance(intrinsics, BalIntrinsics):
        proj = tr.bal_projection(pc, *intrinsics.take(cidx))
    else:
        raise InvalidArgumentError(f"unsupported intrinsics {type(intrinsics).__name__}")
    return proj - np.asarray(pixels, dtype=np.float64)


def pgo_residual(poses, i, j, measurements, sqrt_information=None):
    """``Log(T_i^-1 T_j Z_ij^-1)`` per edge, optionally whitened by ``L^T``."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    z_inv = lie.inverse(np.asarray(measurements, dtype=np.float64).reshape(-1, 7))
    rel = tr.se3_compose(tr.se3_inverse(poses[i]), poses[j])
    r = tr.se3_log(tr.se3_compose(rel, z_inv))
    if sqrt_information is not None:
        r = tr.matvec(sqrt_information, r)
    return r


def whitening(information):
    """``L^T`` with ``information = L L^T``, so that ``|L^T r|^2 = r^T info r``."""
    info = np.asarray(information, dtype=np.float64)
    return np.swapaxes(np.linalg.cholesky(info), -1, -2)


# -- problem builders ------------------------------------------------------------------


@dataclass
class Problem:
    """A traced least-squares problem ready for the LM driver."""

    groups: tuple
    model: Callable
    initial: dict
    num_residuals: int
    residual_width: int
    data: dict = field(default_factory=dict)   # builder inputs, for inspection

    def params(self):
        return {g: self.initial[g.name] for g in self.groups}


def build_ba(poses, points, intrinsics, camera_index, point_index, pixels):
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 7)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cidx = np.asarray(camera_index, dtype=np.int64)
    pidx = np.asarray(point_index, dtype=np.int64)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if cidx.size and (cidx.min() < 0 or cidx.max() >= len(poses)):
        raise InvalidArgumentError("camera index out of range")
    if pidx.size and (pidx.min() < 0 or pidx.max() >= len(points)):
        raise InvalidArgumentError("point index out of range")
    groups = (tr.ParamGroup("poses", tr.POSE, len(poses)),
              tr.ParamGroup("points", tr.POINT, len(points)))

    def model(leaves):
        return ba_residual(leaves["poses"], leaves["points"], intrinsics, cidx, pidx, pixels)

    data = {"intrinsics": intrinsics, "camera_index": cidx, "point_index": pidx, "pixels": pixels}
    return Problem(groups, model, {"poses": poses, "points": points}, len(cidx), 2, data)


def build_ba_from_bal(bal):
    intr = BalIntrinsics(bal.focal, bal.k1, bal.k2)
    return build_ba(bal.poses, bal.points, intr, bal.camera_index, bal.point_index, bal.pixels)


def build_pgo(poses, edges_i, edges_j, measurements, information=None, anchor=True):
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 7)
    ei = np.asarray(edges_i, dtype=np.int64)
    ej = np.asarray(edges_j, dtype=np.int64)
    if ei.size and (min(ei.min(), ej.min()) < 0 or max(ei.max(), ej.max()) >= len(poses)):
        raise InvalidArgumentError("edge endpoint out of range")
    sqrt_info = None
    if information is not None:
        info = np.asarray(information, dtype=np.float64)
        if not np.allclose(info, np.broadcast_to(np.eye(6), info.shape)):
            sqrt_info = whitening(info)
    group = tr.ParamGroup("poses", tr.POSE, len(poses), fixed=(0,) if anchor else ())
    meas = np.asarray(measurements, dtype=np.float64).reshape(-1, 7)

    def model(leaves):
        return pgo_residual(leaves["poses"], ei, ej, meas, sqrt_info)

    data = {"edge_i": ei, "edge_j": ej, "measurements": meas, "information": information}
    return Problem((group,), model, {"poses": poses}, len(ei), 6, data)


def build_pgo_from_graph(graph, anchor=True):
    return build_pgo(graph.poses, graph.edge_i, graph.edge_j, graph.measurements,
                     graph.information, anchor=anchor)
