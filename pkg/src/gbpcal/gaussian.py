"""Gaussians in canonical (information) form: N^-1(eta, lam)."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class GaussianError(ValueError):
    pass


class SingularMarginalization(GaussianError):
    """The block being eliminated is not invertible."""


class NotPositiveDefinite(GaussianError):
    pass


@dataclass(frozen=True, eq=False)
class CanonicalGaussian:
    eta: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float).reshape(-1)
        lam = np.array(self.lam, dtype=float).reshape(eta.size, eta.size)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "lam", 0.5 * (lam + lam.T))

    @property
    def dim(self):
        return self.eta.size

    @classmethod
    def zeros(cls, dim):
        """The zero-information Gaussian, identity element of product."""
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    def mean(self):
        return to_moments(self)[0]

    def __mul__(self, other):
        return product(self, other)

    def __truediv__(self, other):
        return quotient(self, other)

    def __repr__(self):
        return f"CanonicalGaussian(dim={self.dim}, eta={np.array2string(self.eta, precision=4)})"


def _check(a, b):
    if a.dim != b.dim:
        raise GaussianError(f"dimension mismatch: {a.dim} vs {b.dim}")


def product(a, b):
    _check(a, b)
    return CanonicalGaussian(a.eta + b.eta, a.lam + b.lam)


def quotient(a, b):
    # may be indefinite; that is fine for messages
    _check(a, b)
    return CanonicalGaussian(a.eta - b.eta, a.lam - b.lam)


def marginalize(joint, keep):
    """Schur complement onto the ``keep`` indices (in the given order)."""
    keep = np.asarray(keep, dtype=int).reshape(-1)
    if keep.size == 0:
        raise GaussianError("keep must be non-empty")
    if keep.min() < 0 or keep.max() >= joint.dim or len(set(keep.tolist())) != keep.size:
        raise GaussianError("keep must be a subset of the joint's indices")
    elim = np.setdiff1d(np.arange(joint.dim), keep)
    lkk = joint.lam[np.ix_(keep, keep)]
    if elim.size == 0:
        return CanonicalGaussian(joint.eta[keep], lkk)
    lke = joint.lam[np.ix_(keep, elim)]
    lee = joint.lam[np.ix_(elim, elim)]
    rhs = np.column_stack([joint.lam[np.ix_(elim, keep)], joint.eta[elim]])
    try:
        with np.errstate(all="raise"):
            sol = scipy.linalg.solve(lee, rhs, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, FloatingPointError) as exc:
        raise SingularMarginalization(str(exc)) from exc
    if not np.all(np.isfinite(sol)) or np.linalg.cond(lee) > 1e14:
        raise SingularMarginalization("eliminated block is numerically singular")
    eta = joint.eta[keep] - lke @ sol[:, -1]
    lam = lkk - lke @ sol[:, :-1]
    return CanonicalGaussian(eta, lam)


def to_moments(g):
    """(mean, covariance); requires lam positive definite."""
    try:
        c = scipy.linalg.cho_factor(g.lam)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if np.min(np.diag(c[0])) ** 2 <= 1e-12 * max(np.max(np.abs(np.diag(g.lam))), 1e-300):
        raise NotPositiveDefinite("information matrix is singular")
    mean = scipy.linalg.cho_solve(c, g.eta)
    cov = scipy.linalg.cho_solve(c, np.eye(g.dim))
    return mean, 0.5 * (cov + cov.T)


def from_moments(mean, cov):
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    try:
        c = scipy.linalg.cho_factor(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    lam = scipy.linalg.cho_solve(c, np.eye(mean.size))
    return CanonicalGaussian(lam @ mean, lam)


def is_positive_definite(lam, rtol=1e-12):
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        return False
    try:
        L = np.linalg.cholesky(lam)
    except np.linalg.LinAlgError:
        return False
    return bool(np.min(np.diag(L)) ** 2 > rtol * np.max(np.abs(np.diag(lam))))
