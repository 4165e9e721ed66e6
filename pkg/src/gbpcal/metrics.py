"""RMSE absolute trajectory / rotation errors, computed without alignment.

The initial-pose priors fix the gauge, so estimates are compared to ground
truth directly in the world frame.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import lie
from . import manifold as mf


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRecord:
    seed: int
    motion: int
    iteration: int
    ate_twb_m: float
    are_twb_deg: float
    ate_tbs_m: float = float("nan")
    are_tbs_deg: float = float("nan")
    ate_tbm_m: float = float("nan")
    energy: float = float("nan")
    msgs_sent: int = 0
    msgs_dropped: int = 0

    def __post_init__(self):
        for name in ("ate_twb_m", "are_twb_deg", "ate_tbs_m", "are_tbs_deg", "ate_tbm_m"):
            v = getattr(self, name)
            if v < 0:
                raise MetricsError(f"{name} must be non-negative, got {v}")

    def as_row(self):
        return asdict(self)


CSV_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def rotation_errors(est, truth, kind="SE3"):
    """Geodesic angle (radians) between estimated and true rotations."""
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    if est.shape != truth.shape:
        raise MetricsError(f"shape mismatch {est.shape} vs {truth.shape}")
    if kind == "SE3":
        q = lie.quat_mul(lie.quat_conj(truth[..., 3:]), est[..., 3:])
        return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))
    if kind == "SE2":
        return np.abs(lie.wrap_angle(est[..., 2] - truth[..., 2]))
    raise MetricsError(f"no rotation for {kind}")


def _rmse(e):
    e = np.asarray(e, float).reshape(-1)
    if e.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(e ** 2)))


def rmse_ate_array(est, truth, kind="SE3"):
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    if est.shape != truth.shape:
        raise MetricsError(f"shape mismatch {est.shape} vs {truth.shape}")
    k = 2 if kind in ("SE2", "R2") else 3
    return _rmse(np.linalg.norm(est[..., :k] - truth[..., :k], axis=-1))


def rmse_are_array(est, truth, kind="SE3"):
    """Degrees."""
    return float(np.degrees(_rmse(rotation_errors(est, truth, kind))))


def _paired(estimates, ground_truth):
    if set(estimates) != set(ground_truth):
        missing = set(ground_truth) ^ set(estimates)
        raise MetricsError(f"id sets differ: {sorted(missing)[:5]}")
    keys = sorted(estimates)
    return [estimates[k] for k in keys], [ground_truth[k] for k in keys]


def rmse_ate(estimates, ground_truth):
    """RMSE translation error (m) over matching ids of two {id: ManifoldPoint} maps."""
    est, gt = _paired(estimates, ground_truth)
    if not est:
        raise MetricsError("no poses to evaluate")
    errs = [np.linalg.norm(e.translation - g.translation) for e, g in zip(est, gt)]
    return _rmse(errs)


def rmse_are(estimates, ground_truth):
    """RMSE geodesic rotation error (deg) over matching ids."""
    est, gt = _paired(estimates, ground_truth)
    if not est:
        raise MetricsError("no poses to evaluate")
    kind = est[0].kind
    e = np.stack([mf.to_params(x) for x in est])
    g = np.stack([mf.to_params(x) for x in gt])
    return rmse_are_array(e, g, kind)
