"""Manifold points and the Exp/Log, (+)/(-) algebra over them.

Supported kinds: SO2, SO3, SE2, SE3, Rn and Composite (an ordered product of
the others, e.g. the range-bearing measurement space <R, SO2, SO2>).
Tangent vectors are plain 1-D numpy arrays; translation blocks come before
rotation blocks.
"""

from dataclasses import dataclass, field

import numpy as np

from . import lie

KINDS = ("SO2", "SO3", "SE2", "SE3", "Rn", "Composite")


class ManifoldError(ValueError):
    """Invalid argument for a manifold operation (dimension or kind mismatch)."""


class BranchError(ManifoldError):
    """Log requested at a rotation of exactly pi, where the branch is ambiguous."""


@dataclass(frozen=True, eq=False)
class ManifoldPoint:
    kind: str
    data: np.ndarray = field(default_factory=lambda: np.zeros(0))
    components: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ManifoldError(f"unknown manifold kind {self.kind!r}")
        data = np.array(self.data, dtype=float).reshape(-1)
        if self.kind in ("SO3", "SE3"):
            # keep the rotation a unit quaternion whatever the caller passed in
            data[-4:] = lie.quat_normalize(data[-4:])
        elif self.kind == "SO2":
            data = lie.wrap_angle(data)
        elif self.kind == "SE2":
            data[2] = lie.wrap_angle(data[2])
        expected = {"SO2": 1, "SO3": 4, "SE2": 3, "SE3": 7}.get(self.kind)
        if expected is not None and data.size != expected:
            raise ManifoldError(f"{self.kind} expects {expected} parameters, got {data.size}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def dim(self):
        return tangent_dim(self)

    @property
    def translation(self):
        if self.kind == "SE3":
            return self.data[:3].copy()
        if self.kind == "SE2":
            return self.data[:2].copy()
        if self.kind == "Rn":
            return self.data.copy()
        raise ManifoldError(f"{self.kind} has no translation")

    @property
    def rotation(self):
        """Rotation matrix (2x2 or 3x3)."""
        if self.kind in ("SO3", "SE3"):
            return lie.quat_to_rot(self.data[-4:])
        if self.kind in ("SO2", "SE2"):
            c, s = np.cos(self.data[-1]), np.sin(self.data[-1])
            return np.array([[c, -s], [s, c]])
        raise ManifoldError(f"{self.kind} has no rotation")

    def matrix(self):
        if self.kind == "SE3":
            return lie.se3_matrix(self.data)
        if self.kind == "SE2":
            M = np.eye(3)
            M[:2, :2] = self.rotation
            M[:2, 2] = self.data[:2]
            return M
        raise ManifoldError("matrix() is defined for SE2/SE3 only")

    def __repr__(self):
        if self.kind == "Composite":
            return f"ManifoldPoint(Composite, {list(self.components)!r})"
        return f"ManifoldPoint({self.kind}, {np.array2string(self.data, precision=6)})"


# ---------------------------------------------------------------------------
# constructors

def so2(theta):
    return ManifoldPoint("SO2", [theta])


def so3(q):
    return ManifoldPoint("SO3", q)


def se2(x, y, theta):
    return ManifoldPoint("SE2", [x, y, theta])


def se3(t=(0.0, 0.0, 0.0), q=(1.0, 0.0, 0.0, 0.0)):
    return ManifoldPoint("SE3", np.concatenate([np.asarray(t, float), np.asarray(q, float)]))


def se3_from_matrix(M):
    M = np.asarray(M, dtype=float)
    return ManifoldPoint("SE3", lie.se3_from_rt(M[:3, :3], M[:3, 3]))


def rn(values):
    return ManifoldPoint("Rn", np.asarray(values, dtype=float).reshape(-1))


def composite(*parts):
    return ManifoldPoint("Composite", np.zeros(0), parts)


def identity(kind, n=None, layout=None):
    if kind == "Rn":
        if n is None:
            raise ManifoldError("Rn identity needs a dimension")
        return rn(np.zeros(n))
    if kind == "Composite":
        return composite(*(identity(k, n=d) for k, d in _check_layout(layout)))
    return exp(kind, np.zeros(_GROUP_DIMS[kind]))


_GROUP_DIMS = {"SO2": 1, "SO3": 3, "SE2": 3, "SE3": 6}


def tangent_dim(x):
    if x.kind == "Composite":
        return sum(tangent_dim(c) for c in x.components)
    if x.kind == "Rn":
        return x.data.size
    return _GROUP_DIMS[x.kind]


def layout_of(x):
    """(kind, tangent_dim) per component; usable as the ``layout`` of exp."""
    return tuple((c.kind, tangent_dim(c)) for c in x.components)


def _check_layout(layout):
    if not layout:
        raise ManifoldError("Composite exp needs a layout of (kind, dim) pairs")
    return [(k, int(d)) for k, d in layout]


def _tangent(tau, dim=None):
    tau = np.asarray(tau, dtype=float).reshape(-1)
    if dim is not None and tau.size != dim:
        raise ManifoldError(f"tangent vector has dimension {tau.size}, expected {dim}")
    return tau


# ---------------------------------------------------------------------------
# Exp / Log

def exp(kind, tau, layout=None):
    """Exponential map from the tangent space at identity to the group."""
    if kind == "Rn":
        return rn(_tangent(tau))
    if kind == "Composite":
        layout = _check_layout(layout)
        tau = _tangent(tau, sum(d for _, d in layout))
        parts, i = [], 0
        for k, d in layout:
            parts.append(exp(k, tau[i:i + d]))
            i += d
        return composite(*parts)
    if kind not in _GROUP_DIMS:
        raise ManifoldError(f"unknown manifold kind {kind!r}")
    tau = _tangent(tau, _GROUP_DIMS[kind])
    if kind == "SO2":
        return so2(tau[0])
    if kind == "SO3":
        return ManifoldPoint("SO3", lie.so3_exp(tau))
    if kind == "SE2":
        return ManifoldPoint("SE2", lie.se2_exp(tau))
    return ManifoldPoint("SE3", lie.se3_exp(tau))


def _check_branch(theta):
    if abs(float(theta) - np.pi) < lie.BRANCH_TOL:
        raise BranchError("rotation angle is pi: Log branch is ambiguous")


def log(x):
    """Logarithmic map; SO2 angles come back in (-pi, pi]."""
    if x.kind == "Rn":
        return x.data.copy()
    if x.kind == "Composite":
        return np.concatenate([log(c) for c in x.components]) if x.components else np.zeros(0)
    if x.kind == "SO2":
        return lie.wrap_angle(x.data.copy())
    if x.kind == "SE2":
        return lie.se2_log(x.data)
    if x.kind == "SO3":
        phi, th = lie.so3_log(x.data)
        _check_branch(th)
        return phi
    tau, th = lie.se3_log(x.data)
    _check_branch(th)
    return tau


# ---------------------------------------------------------------------------
# group operations

def _same_kind(a, b):
    if a.kind != b.kind:
        raise ManifoldError(f"kind mismatch: {a.kind} vs {b.kind}")
    if a.kind == "Rn" and a.data.size != b.data.size:
        raise ManifoldError("Rn dimension mismatch")
    if a.kind == "Composite" and len(a.components) != len(b.components):
        raise ManifoldError("composite layout mismatch")


def compose(a, b):
    _same_kind(a, b)
    if a.kind in ("Rn", "Composite"):
        raise ManifoldError(f"compose is defined for group kinds, not {a.kind}")
    if a.kind == "SO2":
        return so2(a.data[0] + b.data[0])
    if a.kind == "SO3":
        return ManifoldPoint("SO3", lie.quat_mul(a.data, b.data))
    if a.kind == "SE2":
        return ManifoldPoint("SE2", lie.se2_compose(a.data, b.data))
    return ManifoldPoint("SE3", lie.se3_compose(a.data, b.data))


def invert(a):
    if a.kind in ("Rn", "Composite"):
        raise ManifoldError(f"invert is defined for group kinds, not {a.kind}")
    if a.kind == "SO2":
        return so2(-a.data[0])
    if a.kind == "SO3":
        return ManifoldPoint("SO3", lie.quat_conj(a.data))
    if a.kind == "SE2":
        return ManifoldPoint("SE2", lie.se2_inverse(a.data))
    return ManifoldPoint("SE3", lie.se3_inverse(a.data))


def oplus(x, tau):
    """x (+) tau = x o Exp(tau); addition on Rn, blockwise on composites."""
    tau = _tangent(tau, tangent_dim(x))
    if x.kind == "Rn":
        return rn(x.data + tau)
    if x.kind == "Composite":
        parts, i = [], 0
        for c in x.components:
            d = tangent_dim(c)
            parts.append(oplus(c, tau[i:i + d]))
            i += d
        return composite(*parts)
    return compose(x, exp(x.kind, tau))


def ominus(y, x):
    """y (-) x = Log(x^-1 o y); blockwise on composites."""
    _same_kind(y, x)
    if y.kind == "Rn":
        return y.data - x.data
    if y.kind == "Composite":
        if not y.components:
            return np.zeros(0)
        return np.concatenate([ominus(a, b) for a, b in zip(y.components, x.components)])
    return log(compose(invert(x), y))


def allclose(a, b, atol=1e-9):
    """Closeness in the tangent space of b."""
    return bool(np.all(np.abs(ominus(a, b)) <= atol))


def numerical_jacobian(f, x, eps=1e-6):
    """Central-difference Jacobian of f in the tangent space at x.

    f may return a ManifoldPoint (differences taken with ominus) or an
    array-like tangent value. Column i is
    (f(x (+) eps e_i) (-) f(x (+) -eps e_i)) / (2 eps).
    """
    if eps <= 0:
        raise ManifoldError("eps must be positive")
    n = tangent_dim(x)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        fp, fm = f(oplus(x, e)), f(oplus(x, -e))
        if isinstance(fp, ManifoldPoint):
            d = ominus(fp, fm)
        else:
            d = np.asarray(fp, dtype=float) - np.asarray(fm, dtype=float)
        cols.append(np.atleast_1d(d) / (2.0 * eps))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# conversions to the engine's flat parameter rows

def to_params(x):
    """Flat parameters as used by the batched engine (SE2/SE3/Rn)."""
    if x.kind in ("SE3", "SE2", "Rn"):
        return x.data.copy()
    raise ManifoldError(f"{x.kind} is not a variable kind")


def from_params(space, params):
    params = np.asarray(params, dtype=float)
    if space == "SE3":
        return ManifoldPoint("SE3", params)
    if space == "SE2":
        return ManifoldPoint("SE2", params)
    return rn(params)


def space_of(x):
    if x.kind in ("SE3", "SE2"):
        return x.kind
    if x.kind == "Rn" and x.data.size in (2, 3):
        return f"R{x.data.size}"
    raise ManifoldError(f"no engine space for {x!r}")
