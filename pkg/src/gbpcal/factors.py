"""Measurement models, the adaptive regulariser and DCS robust scaling.

Each model evaluates residuals ``r = z [-] h(x)`` and their Jacobians with
respect to right perturbations of every adjacent variable, batched over
factors. The planar (SE2) models are the 3-D ones restricted to the planar
subgroup: poses are embedded with z = 0 and yaw only, and the matching
residual rows / tangent columns are selected.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import lie
from . import manifold as mf
from .gaussian import CanonicalGaussian

RANGE_TOL = 1e-9
GIMBAL_TOL = 1e-6


class FactorError(ValueError):
    pass


class DegenerateGeometry(FactorError):
    """Marker coincides with the sensor origin."""


class GimbalSingularity(FactorError):
    """Elevation at +-90 degrees; azimuth undefined."""


# ---------------------------------------------------------------------------
# batched 3-D models

class RangeBearing:
    kind = "range_bearing"
    slots = ("SE3", "R3")
    meas_size = 3
    res_dim = 3

    @staticmethod
    def predict(T_WS, t_WM):
        """Returns (h [n,3], p [n,3] marker in the sensor frame, valid [n])."""
        R = lie.quat_to_rot(T_WS[..., 3:])
        p = (np.swapaxes(R, -1, -2) @ (t_WM - T_WS[..., :3])[..., None])[..., 0]
        r = np.linalg.norm(p, axis=-1)
        rho = np.hypot(p[..., 0], p[..., 1])
        az = np.arctan2(p[..., 1], p[..., 0])
        el = np.arctan2(p[..., 2], rho)
        valid = (r > RANGE_TOL) & (np.abs(el) < 0.5 * np.pi - GIMBAL_TOL)
        return np.stack([r, az, el], axis=-1), p, valid

    def evaluate(self, lins, meas, jac=True):
        T, m = lins
        h, p, valid = self.predict(T, m)
        res = np.stack([meas[..., 0] - h[..., 0],
                        lie.wrap_angle(meas[..., 1] - h[..., 1]),
                        lie.wrap_angle(meas[..., 2] - h[..., 2])], axis=-1)
        if not jac:
            return res, None, valid
        n = p.shape[0]
        r = np.where(valid, h[..., 0], 1.0)
        rho2 = p[..., 0] ** 2 + p[..., 1] ** 2
        rho2 = np.where(rho2 > 0, rho2, 1.0)
        rho = np.sqrt(rho2)
        dh = np.zeros((n, 3, 3))
        dh[:, 0, :] = p / r[:, None]
        dh[:, 1, 0] = -p[:, 1] / rho2
        dh[:, 1, 1] = p[:, 0] / rho2
        k = 1.0 / (r * r * rho)
        dh[:, 2, 0] = -p[:, 0] * p[:, 2] * k
        dh[:, 2, 1] = -p[:, 1] * p[:, 2] * k
        dh[:, 2, 2] = rho2 * k
        R = lie.quat_to_rot(T[..., 3:])
        dp = np.zeros((n, 3, 9))
        dp[:, :, :3] = -np.eye(3)
        dp[:, :, 3:6] = lie.hat(p)
        dp[:, :, 6:] = np.swapaxes(R, -1, -2)
        return res, -(dh @ dp), valid


def _not_branch(th):
    return np.abs(th - np.pi) > lie.BRANCH_TOL


class Odometry:
    kind = "odometry"
    slots = ("SE3", "SE3")
    meas_size = 7
    res_dim = 6

    def evaluate(self, lins, meas, jac=True):
        A, B = lins
        E = lie.se3_compose(lie.se3_compose(lie.se3_inverse(B), A), meas)
        res, th = lie.se3_log(E)
        valid = _not_branch(th)
        if not jac:
            return res, None, valid
        Jri = lie.se3_jr_inv(res)
        JA = Jri @ lie.se3_adjoint(lie.se3_inverse(meas))
        JB = -Jri @ lie.se3_adjoint(lie.se3_inverse(E))
        return res, np.concatenate([JA, JB], axis=-1), valid


class SensorCalibration:
    """Loop closure T_WS^-1 T_WB T_BS = identity over (T_WS, T_WB, T_BS)."""
    kind = "calibration"
    slots = ("SE3", "SE3", "SE3")
    meas_size = 0
    res_dim = 6

    def evaluate(self, lins, meas, jac=True):
        S, B, C = lins
        E = lie.se3_compose(lie.se3_inverse(S), lie.se3_compose(B, C))
        res, th = lie.se3_log(E)
        valid = _not_branch(th)
        if not jac:
            return res, None, valid
        Jri = lie.se3_jr_inv(res)
        JS = -Jri @ lie.se3_adjoint(lie.se3_inverse(E))
        JB = Jri @ lie.se3_adjoint(lie.se3_inverse(C))
        return res, np.concatenate([JS, JB, Jri], axis=-1), valid


class MarkerCalibration:
    """t_WM - T_WB t_BM = 0 over (t_WM, T_WB, t_BM); marker rotation unobservable."""
    kind = "marker_calibration"
    slots = ("R3", "SE3", "R3")
    meas_size = 0
    res_dim = 3

    def evaluate(self, lins, meas, jac=True):
        m, B, b = lins
        res = m - lie.se3_act(B, b)
        valid = np.ones(res.shape[0], dtype=bool)
        if not jac:
            return res, None, valid
        n = res.shape[0]
        R = lie.quat_to_rot(B[..., 3:])
        J = np.zeros((n, 3, 12))
        J[:, :, :3] = np.eye(3)
        J[:, :, 3:6] = -R
        J[:, :, 6:9] = R @ lie.hat(b)
        J[:, :, 9:] = -R
        return res, J, valid


class Prior:
    """Unary factor z (-) x on a single variable."""

    def __init__(self, space):
        self.space = space
        self.kind = f"prior_{space}"
        self.slots = (space,)
        sp = lie.SPACES[space]
        self.meas_size = sp.param_size
        self.res_dim = sp.dim

    def evaluate(self, lins, meas, jac=True):
        (x,) = lins
        n = x.shape[0]
        valid = np.ones(n, dtype=bool)
        if self.space == "SE3":
            res, th = lie.se3_log(lie.se3_compose(lie.se3_inverse(x), meas))
            valid = _not_branch(th)
            J = -lie.se3_jl_inv(res) if jac else None
        elif self.space == "SE2":
            res = lie.se2_ominus(meas, x)
            if jac:
                e = lie.se3_jl_inv(res[:, [0, 1, 2, 2, 2, 2]] * [1, 1, 0, 0, 0, 1])
                J = -e[:, [0, 1, 5]][:, :, [0, 1, 5]]
            else:
                J = None
        else:
            res = meas - x
            J = -np.broadcast_to(np.eye(self.res_dim), (n, self.res_dim, self.res_dim)).copy() if jac else None
        return res, J, valid


class Between:
    """Linear relative measurement z - (x_j - x_i) on a vector space."""

    def __init__(self, space):
        self.kind = f"between_{space}"
        self.slots = (space, space)
        self.res_dim = self.meas_size = lie.SPACES[space].dim

    def evaluate(self, lins, meas, jac=True):
        xi, xj = lins
        res = meas - (xj - xi)
        valid = np.ones(res.shape[0], dtype=bool)
        if not jac:
            return res, None, valid
        n, d = res.shape
        J = np.zeros((n, d, 2 * d))
        J[:, :, :d] = np.eye(d)
        J[:, :, d:] = -np.eye(d)
        return res, J, valid


# ---------------------------------------------------------------------------
# planar models by restriction of the 3-D ones

_EMBED = {"SE2": (lie.se2_to_se3, [0, 1, 5]), "R2": (lie.r2_to_r3, [0, 1])}
_DIM3 = {"SE2": 6, "R2": 3}


class Planar:
    def __init__(self, base, rows, kind, meas_embed=None):
        self.base = base
        self.rows = list(rows)
        self.kind = kind
        self.slots = tuple("SE2" if s == "SE3" else "R2" for s in base.slots)
        self.res_dim = len(self.rows)
        self.meas_embed = meas_embed
        self.meas_size = {None: base.meas_size, "se2": 3, "rb": 2}[meas_embed]
        cols, off = [], 0
        for s in self.slots:
            cols.extend(off + c for c in _EMBED[s][1])
            off += _DIM3[s]
        self.cols = cols

    def evaluate(self, lins, meas, jac=True):
        lins3 = [_EMBED[s][0](x) for s, x in zip(self.slots, lins)]
        if self.meas_embed == "se2":
            meas = lie.se2_to_se3(meas)
        elif self.meas_embed == "rb":
            meas = np.concatenate([meas, np.zeros(meas.shape[:-1] + (1,))], axis=-1)
        res, J, valid = self.base.evaluate(lins3, meas, jac)
        res = res[:, self.rows]
        if J is not None:
            J = J[:, self.rows][:, :, self.cols]
        return res, J, valid


MODELS = {
    "range_bearing": RangeBearing(),
    "odometry": Odometry(),
    "calibration": SensorCalibration(),
    "marker_calibration": MarkerCalibration(),
    "range_bearing_2d": Planar(RangeBearing(), [0, 1], "range_bearing_2d", "rb"),
    "odometry_2d": Planar(Odometry(), [0, 1, 5], "odometry_2d", "se2"),
    "calibration_2d": Planar(SensorCalibration(), [0, 1, 5], "calibration_2d"),
    "marker_calibration_2d": Planar(MarkerCalibration(), [0, 1], "marker_calibration_2d"),
}
for _s in lie.SPACES:
    MODELS[f"prior_{_s}"] = Prior(_s)
for _s in ("R2", "R3"):
    MODELS[f"between_{_s}"] = Between(_s)


def measurement_params(kind, z):
    """Flatten a measurement ManifoldPoint (or None) to model parameters."""
    model = MODELS[kind]
    if model.meas_size == 0:
        return np.zeros(0)
    if z.kind == "Composite":
        return np.array([float(c.data[0]) for c in z.components])
    return np.asarray(z.data, dtype=float).copy()


def measurement_point(kind, params):
    model = MODELS[kind]
    if model.meas_size == 0:
        return None
    if kind.startswith("range_bearing"):
        return range_bearing_point(*params)
    if kind.startswith("odometry"):
        return mf.from_params("SE3" if kind == "odometry" else "SE2", params)
    return mf.from_params(model.slots[0], params)


def evaluate(kind, points, measurement=None):
    """Residual and stacked Jacobian for one factor given ManifoldPoints."""
    model = MODELS[kind]
    lins = [mf.to_params(p)[None] for p in points]
    meas = measurement_params(kind, measurement)[None] if model.meas_size else np.zeros((1, 0))
    res, J, valid = model.evaluate(lins, meas)
    return res[0], J[0], bool(valid[0])


# ---------------------------------------------------------------------------
# single-instance measurement functions

def range_bearing_point(r, azimuth, elevation=None):
    parts = [mf.rn([r]), mf.so2(azimuth)]
    if elevation is not None:
        parts.append(mf.so2(elevation))
    return mf.composite(*parts)


def predict_range_bearing(T_WS, t_WM):
    """Range, azimuth and elevation of the marker seen from the sensor."""
    t = np.asarray(t_WM.data if isinstance(t_WM, mf.ManifoldPoint) else t_WM, dtype=float)
    h, _, _ = RangeBearing.predict(T_WS.data[None], t[None])
    r, az, el = h[0]
    if r < RANGE_TOL:
        raise DegenerateGeometry(f"range {r:.3g} m below {RANGE_TOL}")
    if abs(abs(el) - 0.5 * np.pi) < GIMBAL_TOL:
        raise GimbalSingularity("elevation at +-90 deg")
    return range_bearing_point(r, az, el)


def range_bearing_residual(z, T_WS, t_WM):
    return mf.ominus(z, predict_range_bearing(T_WS, t_WM))


def odometry_residual(T_prev, T_curr, z):
    return mf.ominus(z, mf.compose(mf.invert(T_prev), T_curr))


def calibration_residual(T_WS, T_WB, T_BS):
    return mf.log(mf.compose(mf.invert(T_WS), mf.compose(T_WB, T_BS)))


def marker_calibration_residual(t_WM, T_WB, t_BM):
    m = np.asarray(getattr(t_WM, "data", t_WM), dtype=float)
    b = np.asarray(getattr(t_BM, "data", t_BM), dtype=float)
    return m - lie.se3_act(T_WB.data, b)


# ---------------------------------------------------------------------------
# adaptive regulariser and DCS

@dataclass(frozen=True)
class AdaptiveReg:
    lambda_reg: float = 10.0
    lambda_up: float = 11.0
    lambda_down: float = 9.0
    eps_lambda: float = 1e-4

    def __post_init__(self):
        if not self.lambda_reg > 0:
            raise ValueError("lambda_reg must be positive")
        if not (self.lambda_up > 1 and self.lambda_down > 1 and self.eps_lambda > 0):
            raise ValueError("need lambda_up > 1, lambda_down > 1, eps_lambda > 0")


def update_adaptive_reg(reg, E_curr, E_prev):
    """Grow the damping when the local energy rose by more than eps, else shrink it."""
    if E_curr - E_prev > reg.eps_lambda:
        return replace(reg, lambda_reg=reg.lambda_reg * reg.lambda_up)
    return replace(reg, lambda_reg=reg.lambda_reg / reg.lambda_down)


def apply_regularizer(potential, reg):
    """Attach the zero-mean prior N^-1(0, lambda_reg I)."""
    lam_reg = 0.0 if reg is None else reg.lambda_reg
    return CanonicalGaussian(potential.eta, potential.lam + lam_reg * np.eye(potential.dim))


@dataclass(frozen=True)
class DcsConfig:
    phi: float = 10.0

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError("phi must be positive")


def dcs_scale(E_m, cfg):
    """s = min(1, 2 phi / (phi + E)); the information matrix is scaled by s^2."""
    E_m = np.asarray(E_m, dtype=float)
    s = np.minimum(1.0, 2.0 * cfg.phi / (cfg.phi + E_m))
    return float(s) if s.ndim == 0 else s
