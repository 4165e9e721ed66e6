"""Batched Lie-group kernels on plain numpy arrays.

Every function broadcasts over leading axes. Parameter layouts:

    SO2  [theta]
    SO3  [qw, qx, qy, qz]              (unit quaternion)
    SE2  [x, y, theta]
    SE3  [tx, ty, tz, qw, qx, qy, qz]

Tangent vectors put the translation block first, then rotation:
SE3 tau = [rho(3), phi(3)], SE2 tau = [rho(2), theta]. Perturbations are
right-sided, X (+) tau = X Exp(tau).
"""

from collections import namedtuple

import numpy as np

# below this angle the Jacobian coefficients switch to their Taylor series
_SERIES = 1e-2
# rotation angles this close to pi are on the Log branch cut
BRANCH_TOL = 1e-9


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


# --------------------------------------------------------------------------
# quaternions

def quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R):
    """Rotation matrices to unit quaternions with qw >= 0."""
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cand = np.stack([
        np.stack([1 + tr, R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], -1),
        np.stack([R[..., 2, 1] - R[..., 1, 2], 1 + m00 - m11 - m22,
                  R[..., 0, 1] + R[..., 1, 0], R[..., 0, 2] + R[..., 2, 0]], -1),
        np.stack([R[..., 0, 2] - R[..., 2, 0], R[..., 0, 1] + R[..., 1, 0],
                  1 - m00 + m11 - m22, R[..., 1, 2] + R[..., 2, 1]], -1),
        np.stack([R[..., 1, 0] - R[..., 0, 1], R[..., 0, 2] + R[..., 2, 0],
                  R[..., 1, 2] + R[..., 2, 1], 1 - m00 - m11 + m22], -1),
    ], axis=-2)
    pick = np.argmax(np.stack([tr, m00, m11, m22], -1), axis=-1)
    q = np.take_along_axis(cand, pick[..., None, None], axis=-2)[..., 0, :]
    q = quat_normalize(q)
    return np.where(q[..., :1] < 0, -q, q)


# --------------------------------------------------------------------------
# SO(3)

def so3_exp(phi):
    """Rotation vector to unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    small = th < _SERIES
    ths = np.where(small, 1.0, th)
    k = np.where(small, 0.5 - th * th / 48.0, np.sin(0.5 * ths) / ths)
    q = np.concatenate([np.cos(0.5 * th)[..., None], k[..., None] * phi], axis=-1)
    return quat_normalize(q)


def so3_log(q):
    """Unit quaternion to rotation vector, plus the rotation angle.

    The sign of q is canonicalised (qw >= 0) so the angle lies in [0, pi].
    """
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    th = 2.0 * np.arctan2(n, w)
    small = n < 1e-8
    ns = np.where(small, 1.0, n)
    ws = np.where(small, w, 1.0)
    k = np.where(small, 2.0 / ws * (1.0 - n * n / (3.0 * ws * ws)), th / ns)
    return k[..., None] * v, th


def _so3_coeffs(th):
    """(1-cos)/th^2, (th-sin)/th^3 with series near zero."""
    small = th < _SERIES
    t = np.where(small, 1.0, th)
    t2 = th * th
    a = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / t ** 3)
    return a, b


def so3_jl(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    a, b = _so3_coeffs(th)
    P = hat(phi)
    return np.eye(3) + a[..., None, None] * P + b[..., None, None] * (P @ P)


def so3_jl_inv(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    small = th < _SERIES
    t = np.where(small, 1.0, th)
    t2 = th * th
    c = np.where(small, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
                 1.0 / (t * t) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    P = hat(phi)
    return np.eye(3) - 0.5 * P + c[..., None, None] * (P @ P)


def so3_jr(phi):
    return so3_jl(-np.asarray(phi, dtype=float))


def so3_jr_inv(phi):
    return so3_jl_inv(-np.asarray(phi, dtype=float))


# --------------------------------------------------------------------------
# SE(3)

def se3_identity(shape=()):
    out = np.zeros(tuple(shape) + (7,))
    out[..., 3] = 1.0
    return out


def se3_from_rt(R, t):
    return np.concatenate([np.asarray(t, dtype=float), rot_to_quat(R)], axis=-1)


def se3_matrix(T):
    T = np.asarray(T, dtype=float)
    M = np.zeros(T.shape[:-1] + (4, 4))
    M[..., :3, :3] = quat_to_rot(T[..., 3:])
    M[..., :3, 3] = T[..., :3]
    M[..., 3, 3] = 1.0
    return M


def se3_exp(tau):
    tau = np.asarray(tau, dtype=float)
    rho, phi = tau[..., :3], tau[..., 3:]
    t = (so3_jl(phi) @ rho[..., None])[..., 0]
    return np.concatenate([t, so3_exp(phi)], axis=-1)


def se3_log(T):
    """Returns (tau, rotation angle)."""
    T = np.asarray(T, dtype=float)
    phi, th = so3_log(T[..., 3:])
    rho = (so3_jl_inv(phi) @ T[..., :3, None])[..., 0]
    return np.concatenate([rho, phi], axis=-1), th


def se3_compose(a, b):
    ta, qa = a[..., :3], a[..., 3:]
    t = ta + (quat_to_rot(qa) @ b[..., :3, None])[..., 0]
    return np.concatenate([t, quat_normalize(quat_mul(qa, b[..., 3:]))], axis=-1)


def se3_inverse(a):
    qi = quat_conj(a[..., 3:])
    t = -(quat_to_rot(qi) @ a[..., :3, None])[..., 0]
    return np.concatenate([t, qi], axis=-1)


def se3_act(T, p):
    """Apply the transform to points: R p + t."""
    return (quat_to_rot(T[..., 3:]) @ np.asarray(p, dtype=float)[..., None])[..., 0] + T[..., :3]


def se3_adjoint(T):
    R = quat_to_rot(T[..., 3:])
    Ad = np.zeros(T.shape[:-1] + (6, 6))
    Ad[..., :3, :3] = R
    Ad[..., 3:, 3:] = R
    Ad[..., :3, 3:] = hat(T[..., :3]) @ R
    return Ad


def _se3_q(rho, phi):
    th = np.linalg.norm(phi, axis=-1)
    small = th < _SERIES
    t = np.where(small, 1.0, th)
    t2 = th * th
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                  (t - np.sin(t)) / t ** 3)
    c2 = np.where(small, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
                  (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t ** 4))
    c3 = np.where(small, 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
                  (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t ** 5))
    P, V = hat(phi), hat(rho)
    PV = P @ V
    VP = V @ P
    PVP = PV @ P
    PP = P @ P
    e = lambda c: c[..., None, None]  # noqa: E731
    return (0.5 * V + e(c1) * (PV + VP + PVP)
            + e(c2) * (PP @ V + VP @ P - 3.0 * PVP)
            + e(c3) * (PVP @ P + PP @ V @ P))


def se3_jl(tau):
    tau = np.asarray(tau, dtype=float)
    rho, phi = tau[..., :3], tau[..., 3:]
    J = so3_jl(phi)
    out = np.zeros(tau.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., :3, 3:] = _se3_q(rho, phi)
    return out


def se3_jl_inv(tau):
    tau = np.asarray(tau, dtype=float)
    rho, phi = tau[..., :3], tau[..., 3:]
    Ji = so3_jl_inv(phi)
    out = np.zeros(tau.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., :3, 3:] = -Ji @ _se3_q(rho, phi) @ Ji
    return out


def se3_jr(tau):
    return se3_jl(-np.asarray(tau, dtype=float))


def se3_jr_inv(tau):
    return se3_jl_inv(-np.asarray(tau, dtype=float))


def se3_oplus(T, tau):
    return se3_compose(T, se3_exp(tau))


def se3_ominus(Y, X):
    return se3_log(se3_compose(se3_inverse(X), Y))[0]


# --------------------------------------------------------------------------
# SE(2)

def _se2_v(th):
    small = np.abs(th) < _SERIES
    t = np.where(small, 1.0, th)
    t2 = th * th
    s = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    c = np.where(small, th / 2.0 - th * t2 / 24.0, (1.0 - np.cos(t)) / t)
    return s, c


def se2_exp(tau):
    tau = np.asarray(tau, dtype=float)
    th = tau[..., 2]
    s, c = _se2_v(th)
    x = s * tau[..., 0] - c * tau[..., 1]
    y = c * tau[..., 0] + s * tau[..., 1]
    return np.stack([x, y, wrap_angle(th)], axis=-1)


def se2_log(T):
    T = np.asarray(T, dtype=float)
    th = wrap_angle(T[..., 2])
    s, c = _se2_v(th)
    det = s * s + c * c
    rx = (s * T[..., 0] + c * T[..., 1]) / det
    ry = (-c * T[..., 0] + s * T[..., 1]) / det
    return np.stack([rx, ry, th], axis=-1)


def se2_compose(a, b):
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    y = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    return np.stack([x, y, wrap_angle(a[..., 2] + b[..., 2])], axis=-1)


def se2_inverse(a):
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = -(c * a[..., 0] + s * a[..., 1])
    y = -(-s * a[..., 0] + c * a[..., 1])
    return np.stack([x, y, wrap_angle(-a[..., 2])], axis=-1)


def se2_oplus(T, tau):
    return se2_compose(T, se2_exp(tau))


def se2_ominus(Y, X):
    return se2_log(se2_compose(se2_inverse(X), Y))


def se2_to_se3(T):
    """Embed planar poses as SE(3) poses (z = 0, yaw only)."""
    T = np.asarray(T, dtype=float)
    out = np.zeros(T.shape[:-1] + (7,))
    out[..., :2] = T[..., :2]
    out[..., 3] = np.cos(0.5 * T[..., 2])
    out[..., 6] = np.sin(0.5 * T[..., 2])
    return out


def r2_to_r3(p):
    p = np.asarray(p, dtype=float)
    return np.concatenate([p, np.zeros(p.shape[:-1] + (1,))], axis=-1)


# --------------------------------------------------------------------------
# variable spaces used by the factor-graph engine

Space = namedtuple("Space", "name param_size dim identity oplus ominus")


def _rn_space(n):
    return Space(f"R{n}", n, n, lambda shape=(): np.zeros(tuple(shape) + (n,)),
                 lambda x, tau: x + tau, lambda y, x: y - x)


SPACES = {
    "SE3": Space("SE3", 7, 6, se3_identity, se3_oplus, se3_ominus),
    "SE2": Space("SE2", 3, 3, lambda shape=(): np.zeros(tuple(shape) + (3,)),
                 se2_oplus, se2_ominus),
    "R3": _rn_space(3),
    "R2": _rn_space(2),
}
