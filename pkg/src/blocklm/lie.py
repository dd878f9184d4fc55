"""SE(3) poses stored as translation + unit quaternion.

Array layout used throughout the package:

* pose rows are ``[tx, ty, tz, qx, qy, qz, qw]`` (7 scalars),
* tangent rows are ``[rho | omega]`` (translation first, rotation in radians).

Every array function broadcasts over leading dimensions, so the same code
serves a single pose and a batch of a million replicated poses. The small
dataclasses at the bottom wrap single elements for a friendlier scalar API.

Increments are applied on the left, ``retract(T, d) = Exp(d) * T``, and all
derivatives in :mod:`blocklm.trace` are taken with respect to that left
perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

# Below this rotation angle exp/log use their Taylor expansions.
SMALL_ANGLE = 1e-8
# Series cut-off for the coupling coefficients of V, V^-1 and Q, whose closed
# forms cancel catastrophically well before SMALL_ANGLE.
_SERIES_ANGLE = 1e-3


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _bmv(m, v):
    return np.einsum("...ij,...j->...i", m, v)


# -- quaternions ---------------------------------------------------------------


def quat_normalize(q):
    """Unit-normalize and flip to the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., 3:4] < 0.0, -q, q)


def quat_mul(a, b):
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conj(q):
    return np.concatenate([-q[..., :3], q[..., 3:]], axis=-1)


def quat_rotate(q, v):
    u, w = q[..., :3], q[..., 3:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q):
    x, y, z, w = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def matrix_to_quat(m):
    """Rotation matrix to quaternion, branching on the largest component."""
    m = np.asarray(m, dtype=float)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    cand = np.stack([m[:, 0, 0], m[:, 1, 1], m[:, 2, 2], tr], axis=-1)
    pick = np.argmax(cand, axis=-1)
    q = np.empty((m.shape[0], 4))
    for k in range(4):
        sel = pick == k
        if not np.any(sel):
            continue
        r = m[sel]
        if k == 3:
            s = 2.0 * np.sqrt(1.0 + tr[sel])
            q[sel] = np.stack(
                [(r[:, 2, 1] - r[:, 1, 2]) / s, (r[:, 0, 2] - r[:, 2, 0]) / s,
                 (r[:, 1, 0] - r[:, 0, 1]) / s, 0.25 * s], -1)
            continue
        i, j, l = k, (k + 1) % 3, (k + 2) % 3
        s = 2.0 * np.sqrt(1.0 + r[:, i, i] - r[:, j, j] - r[:, l, l])
        out = np.empty((r.shape[0], 4))
        out[:, i] = 0.25 * s
        out[:, j] = (r[:, j, i] + r[:, i, j]) / s
        out[:, l] = (r[:, l, i] + r[:, i, l]) / s
        out[:, 3] = (r[:, l, j] - r[:, j, l]) / s
        q[sel] = out
    return quat_normalize(q).reshape(batch + (4,))


def so3_exp(omega):
    """Rotation vector to unit quaternion."""
    omega = np.asarray(omega, dtype=float)
    theta2 = np.sum(omega * omega, axis=-1, keepdims=True)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta2 / 48.0, np.sin(0.5 * safe) / safe)
    w = np.where(small, 1.0 - theta2 / 8.0, np.cos(0.5 * safe))
    return quat_normalize(np.concatenate([k * omega, w], axis=-1))


def so3_log(q):
    """Unit quaternion to rotation vector with angle in [0, pi]."""
    q = quat_normalize(q)
    u, w = q[..., :3], q[..., 3:]
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    small = n < 0.5 * SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    # w >= 0 after normalisation, so atan2 stays in [0, pi/2] and the angle in [0, pi];
    # at exactly pi (w == 0) the axis is u / |u| with no cancellation.
    safe_w = np.where(small, w, 1.0)
    factor = np.where(
        small,
        2.0 / safe_w * (1.0 - n * n / (3.0 * safe_w * safe_w)),
        2.0 * np.arctan2(n, w) / safe_n,
    )
    return factor * u


def _theta(omega):
    theta2 = np.sum(omega * omega, axis=-1)
    return np.sqrt(theta2), theta2


def _v_coeffs(omega):
    """Coefficients a, b with V = I + a [w]x + b [w]x^2."""
    theta, theta2 = _theta(omega)
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta2 / 24.0 + theta2**2 / 720.0, 2.0 * np.sin(0.5 * t) ** 2 / t**2)
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0 + theta2**2 / 5040.0, (t - np.sin(t)) / t**3)
    return a, b


def so3_left_jacobian(omega):
    a, b = _v_coeffs(omega)
    w = skew(omega)
    return np.eye(3) + a[..., None, None] * w + b[..., None, None] * (w @ w)


def so3_left_jacobian_inv(omega):
    theta, theta2 = _theta(omega)
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0 + theta2**2 / 30240.0,
        (1.0 - t * np.sin(t) / (4.0 * np.sin(0.5 * t) ** 2)) / t**2,
    )
    w = skew(omega)
    return np.eye(3) - 0.5 * w + c[..., None, None] * (w @ w)


# -- SE(3) on arrays -------------------------------------------------------------


def identity(shape=()):
    out = np.zeros(tuple(shape) + (7,))
    out[..., 6] = 1.0
    return out


def exp(tau):
    tau = np.asarray(tau, dtype=float)
    rho, omega = tau[..., :3], tau[..., 3:]
    q = so3_exp(omega)
    t = _bmv(so3_left_jacobian(omega), rho)
    return np.concatenate([t, q], axis=-1)


def log(pose):
    pose = np.asarray(pose, dtype=float)
    omega = so3_log(pose[..., 3:])
    rho = _bmv(so3_left_jacobian_inv(omega), pose[..., :3])
    return np.concatenate([rho, omega], axis=-1)


def compose(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    qa = a[..., 3:]
    t = quat_rotate(qa, b[..., :3]) + a[..., :3]
    q = quat_normalize(quat_mul(qa, b[..., 3:]))
    return np.concatenate([t, q], axis=-1)


def inverse(a):
    a = np.asarray(a, dtype=float)
    qi = quat_conj(a[..., 3:])
    t = -quat_rotate(qi, a[..., :3])
    return np.concatenate([t, quat_normalize(qi)], axis=-1)


def act(pose, point):
    pose = np.asarray(pose, dtype=float)
    return quat_rotate(pose[..., 3:], np.asarray(point, dtype=float)) + pose[..., :3]


def retract(pose, delta):
    """Left-multiplicative update ``Exp(delta) * pose``."""
    return compose(exp(delta), pose)


def rotation_matrix(pose):
    return quat_to_matrix(np.asarray(pose, dtype=float)[..., 3:])


def to_matrix(pose):
    pose = np.asarray(pose, dtype=float)
    out = np.zeros(pose.shape[:-1] + (4, 4))
    out[..., :3, :3] = rotation_matrix(pose)
    out[..., :3, 3] = pose[..., :3]
    out[..., 3, 3] = 1.0
    return out


def from_matrix(m):
    m = np.asarray(m, dtype=float)
    return np.concatenate([m[..., :3, 3], matrix_to_quat(m[..., :3, :3])], axis=-1)


def adjoint(pose):
    """6x6 adjoint for [rho | omega] tangents: Exp(Ad_T d) = T Exp(d) T^-1."""
    pose = np.asarray(pose, dtype=float)
    r = rotation_matrix(pose)
    out = np.zeros(pose.shape[:-1] + (6, 6))
    out[..., :3, :3] = r
    out[..., 3:, 3:] = r
    out[..., :3, 3:] = skew(pose[..., :3]) @ r
    return out


def _q_matrix(tau):
    rho, omega = tau[..., :3], tau[..., 3:]
    theta, theta2 = _theta(omega)
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    c1 = np.where(small, 1.0 / 6.0 - theta2 / 120.0 + theta2**2 / 5040.0, (t - np.sin(t)) / t**3)
    c2 = np.where(
        small,
        1.0 / 24.0 - theta2 / 720.0 + theta2**2 / 40320.0,
        (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - theta2 / 2520.0 + theta2**2 / 120960.0,
        (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
    )
    p, w = skew(rho), skew(omega)
    wp, pw = w @ p, p @ w
    wpw = wp @ w
    ww = w @ w
    c1, c2, c3 = (c[..., None, None] for c in (c1, c2, c3))
    return (
        0.5 * p
        + c1 * (wp + pw + wpw)
        + c2 * (ww @ p + p @ ww - 3.0 * wpw)
        + c3 * (wpw @ w + w @ wpw)
    )


def left_jacobian_inv(tau):
    """Inverse SE(3) left Jacobian: Log(Exp(x) Exp(tau)) ~ tau + Jl^-1(tau) x."""
    tau = np.asarray(tau, dtype=float)
    jinv = so3_left_jacobian_inv(tau[..., 3:])
    q = _q_matrix(tau)
    out = np.zeros(tau.shape[:-1] + (6, 6))
    out[..., :3, :3] = jinv
    out[..., 3:, 3:] = jinv
    out[..., :3, 3:] = -jinv @ q @ jinv
    return out


def rodrigues_to_quat(r):
    return so3_exp(r)


def quat_to_rodrigues(q):
    return so3_log(q)


# -- scalar wrappers -------------------------------------------------------------


def _finite(arr, what):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{what} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class QuatRotation:
    x: float
    y: float
    z: float
    w: float

    def __post_init__(self):
        q = quat_normalize(_finite([self.x, self.y, self.z, self.w], "quaternion"))
        for name, val in zip("xyzw", q):
            object.__setattr__(self, name, float(val))

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0, 1.0)

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.w])

    def matrix(self):
        return quat_to_matrix(self.as_array())


@dataclass(frozen=True)
class PoseSE3:
    rotation: QuatRotation
    translation: tuple

    def __post_init__(self):
        t = _finite(self.translation, "translation").reshape(3)
        object.__setattr__(self, "translation", tuple(float(v) for v in t))

    @classmethod
    def identity(cls):
        return cls(QuatRotation.identity(), (0.0, 0.0, 0.0))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float).reshape(7)
        return cls(QuatRotation(*arr[3:]), tuple(arr[:3]))

    def as_array(self):
        return np.concatenate([np.array(self.translation), self.rotation.as_array()])

    def matrix(self):
        return to_matrix(self.as_array())


@dataclass(frozen=True)
class Tangent6:
    rho: tuple
    omega: tuple

    def __post_init__(self):
        object.__setattr__(self, "rho", tuple(float(v) for v in _finite(self.rho, "rho").reshape(3)))
        object.__setattr__(self, "omega", tuple(float(v) for v in _finite(self.omega, "omega").reshape(3)))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float).reshape(6)
        return cls(tuple(arr[:3]), tuple(arr[3:]))

    def as_array(self):
        return np.array(self.rho + self.omega)


def _tangent_array(tau):
    if isinstance(tau, Tangent6):
        return tau.as_array()
    return _finite(tau, "tangent").reshape(6)


def _pose_array(pose):
    if isinstance(pose, PoseSE3):
        return pose.as_array()
    return PoseSE3.from_array(pose).as_array()


def se3_exp(tau) -> PoseSE3:
    return PoseSE3.from_array(exp(_tangent_array(tau)))


def se3_log(pose) -> Tangent6:
    return Tangent6.from_array(log(_pose_array(pose)))


def se3_compose(a, b) -> PoseSE3:
    return PoseSE3.from_array(compose(_pose_array(a), _pose_array(b)))


def se3_inverse(a) -> PoseSE3:
    return PoseSE3.from_array(inverse(_pose_array(a)))


def se3_act(pose, point) -> np.ndarray:
    return act(_pose_array(pose), _finite(point, "point").reshape(3))


def se3_retract(pose, delta) -> PoseSE3:
    return PoseSE3.from_array(retract(_pose_array(pose), _tangent_array(delta)))
