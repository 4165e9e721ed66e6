"""UTIAS MR.CLAM ingestion and the planar sliding-window run.

The dataset directory holds whitespace-delimited text files, ``#`` starts a
comment:

    Barcodes.dat                 subject  barcode
    Landmark_Groundtruth.dat     subject  x  y  [x_sd  y_sd]
    Robot{i}_Groundtruth.dat     time  x  y  theta
    Robot{i}_Odometry.dat        time  v  omega
    Robot{i}_Measurement.dat     time  barcode  range  bearing

Robot ``i`` is subject ``i``; every other subject is a static landmark.
"""

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lie
from . import manifold as mf
from .factors import AdaptiveReg, range_bearing_point
from .gaussian import CanonicalGaussian
from .graph import FactorGraph
from .metrics import MetricsRecord, rmse_are_array, rmse_ate_array

DEG = math.pi / 180.0


class MrClamParseError(ValueError):
    pass


@dataclass
class MrClamDataset:
    """Keyframed streams. Arrays are indexed [robot, keyframe]."""
    robots: list                      # subject ids, in array order
    times: np.ndarray                 # [K] keyframe timestamps
    odometry: np.ndarray              # [R, K-1, 3] SE(2) increments between keyframes
    groundtruth: np.ndarray           # [R, K, 3]
    observations: list                # (k, robot index, subject, range, bearing)
    landmarks: dict = field(default_factory=dict)   # subject -> (x, y)
    barcodes: dict = field(default_factory=dict)    # barcode -> subject
    skipped_measurements: int = 0

    @property
    def n_keyframes(self):
        return self.times.shape[0]


def _read_table(path, ncols):
    """Rows of floats from a text table; errors carry file and line number."""
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MrClamParseError(f"{path}: cannot read ({exc.strerror})") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < ncols:
            raise MrClamParseError(f"{path}:{lineno}: expected {ncols} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts[:ncols]])
        except ValueError as exc:
            raise MrClamParseError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(rows, dtype=float).reshape(-1, ncols)


def _check_times(path, t, strict):
    d = np.diff(t)
    bad = np.flatnonzero(d <= 0 if strict else d < 0)
    if bad.size:
        raise MrClamParseError(f"{path}: timestamps not increasing at data row {bad[0] + 2}")


def _interp_pose(t_query, gt):
    th = np.unwrap(gt[:, 3])
    return np.stack([np.interp(t_query, gt[:, 0], gt[:, 1]),
                     np.interp(t_query, gt[:, 0], gt[:, 2]),
                     lie.wrap_angle(np.interp(t_query, gt[:, 0], th))], axis=-1)


def integrate_odometry(odo, key_times):
    """SE(2) increments between consecutive keyframes.

    Each (v, omega) record holds until the next one; segments are integrated
    exactly as constant-twist arcs. Before the first record the robot rests.
    """
    t_odo, v, w = odo[:, 0], odo[:, 1], odo[:, 2]
    lo, hi = key_times[0], key_times[-1]
    inner = t_odo[(t_odo > lo) & (t_odo < hi)]
    grid = np.union1d(key_times, inner)
    dt = np.diff(grid)
    rec = np.searchsorted(t_odo, grid[:-1], side="right") - 1
    moving = rec >= 0
    rec = np.maximum(rec, 0)
    tau = np.stack([np.where(moving, v[rec], 0.0) * dt, np.zeros_like(dt),
                    np.where(moving, w[rec], 0.0) * dt], axis=-1)
    step = lie.se2_exp(tau)
    # accumulate world poses along the grid, then difference at keyframes
    th = np.concatenate([[0.0], np.cumsum(tau[:, 2])])
    c, s = np.cos(th[:-1]), np.sin(th[:-1])
    dxy = np.stack([c * step[:, 0] - s * step[:, 1], s * step[:, 0] + c * step[:, 1]], axis=-1)
    xy = np.concatenate([[[0.0, 0.0]], np.cumsum(dxy, axis=0)])
    poses = np.column_stack([xy, lie.wrap_angle(th)])
    at = poses[np.searchsorted(grid, key_times)]
    return lie.se2_compose(lie.se2_inverse(at[:-1]), at[1:])


def load_mrclam(path, subsample_dt=1.0):
    """Parse a dataset directory and resample it onto a common keyframe clock.

    Keyframes run every ``subsample_dt`` seconds over [t0, t_end) where the
    interval is the overlap of all robots' ground-truth streams. Each
    measurement is attached to the nearest keyframe; repeated sightings of
    one subject within a keyframe keep the one closest in time.
    """
    if subsample_dt <= 0:
        raise ValueError("subsample_dt must be positive")
    root = Path(path)
    if not root.is_dir():
        raise MrClamParseError(f"{root}: not a directory")
    ids = sorted(int(m.group(1)) for p in root.iterdir()
                 if (m := re.fullmatch(r"Robot(\d+)_Odometry\.dat", p.name)))
    if not ids:
        raise MrClamParseError(f"{root}: no Robot*_Odometry.dat files")
    bc = _read_table(root / "Barcodes.dat", 2)
    barcodes = {int(b): int(s) for s, b in bc}
    lm_path = root / "Landmark_Groundtruth.dat"
    lm = _read_table(lm_path, 3) if lm_path.exists() else np.zeros((0, 3))
    landmarks = {int(r[0]): (float(r[1]), float(r[2])) for r in lm}

    streams = {}
    for i in ids:
        gt_p, od_p, ms_p = (root / f"Robot{i}_{n}.dat" for n in ("Groundtruth", "Odometry", "Measurement"))
        gt, od = _read_table(gt_p, 4), _read_table(od_p, 3)
        ms = _read_table(ms_p, 4)
        if gt.shape[0] < 2:
            raise MrClamParseError(f"{gt_p}: need at least two ground-truth rows")
        _check_times(gt_p, gt[:, 0], True)
        _check_times(od_p, od[:, 0], True)
        _check_times(ms_p, ms[:, 0], False)
        streams[i] = (gt, od, ms)

    t0 = max(s[0][0, 0] for s in streams.values())
    t_end = min(s[0][-1, 0] for s in streams.values())
    K = int(math.floor((t_end - t0) / subsample_dt + 1e-9))
    if K < 1:
        raise MrClamParseError(f"{root}: ground-truth streams do not overlap")
    times = t0 + subsample_dt * np.arange(K)

    gts, odos, obs = [], [], []
    skipped = 0
    for ri, i in enumerate(ids):
        gt, od, ms = streams[i]
        gts.append(_interp_pose(times, gt))
        odos.append(integrate_odometry(od, times) if K > 1 else np.zeros((0, 3)))
        best = {}
        for t, code, rng, brg in ms:
            subj = barcodes.get(int(code))
            k = int(round((t - t0) / subsample_dt))
            if subj is None or subj == i or not 0 <= k < K or rng <= 0:
                skipped += 1
                continue
            gap = abs(t - times[k])
            key = (k, subj)
            if key not in best or gap < best[key][0]:
                if key in best:
                    skipped += 1
                best[key] = (gap, rng, brg)
            else:
                skipped += 1
        obs.extend((k, ri, subj, float(rng), float(lie.wrap_angle(brg)))
                   for (k, subj), (_, rng, brg) in sorted(best.items()))
    obs.sort(key=lambda o: (o[0], o[1], o[2]))
    return MrClamDataset(ids, times, np.stack(odos), np.stack(gts), obs,
                         landmarks, barcodes, skipped)


# ---------------------------------------------------------------------------
# planar run

@dataclass(frozen=True)
class MrClamConfig:
    odom_sigma: tuple = (0.05, 0.01, 5.0)      # m, m, deg per keyframe
    rb_sigma: tuple = (0.08, 2.0)              # m, deg
    init_sigma: tuple = (0.01, 1.0)            # m, deg
    calib_prior_sigma: tuple = (0.5, 100.0)    # m, deg
    calib_factor_sigma: tuple = (0.01, 0.01)   # m, rad
    landmark_prior_sigma: float = 10.0
    iterations: int = 10
    dropout: float = 0.3
    seed: int = 0
    reg: AdaptiveReg = field(default_factory=AdaptiveReg)


def _info(*sigmas):
    return np.diag(1.0 / np.maximum(np.asarray(sigmas, float), 1e-4) ** 2)


def _calib_offsets(n, calib_noise, seed):
    if calib_noise is None:
        return np.zeros((n, 3))
    st, sr = calib_noise
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5ca1]))
    out = np.zeros((n, 3))
    out[:, :2] = rng.normal(0.0, st, (n, 2))
    out[:, 2] = rng.normal(0.0, sr * DEG, n)
    return out


class MrClamRun:
    """Incremental planar GBP with a sliding window of active keyframes."""

    def __init__(self, data, window=30, calib_noise=None, auto_calib=True, cfg=MrClamConfig()):
        if window is not None and window < 2:
            raise ValueError("window must be >= 2")
        self.data, self.window, self.cfg = data, window, cfg
        self.auto_calib = auto_calib
        self.g = FactorGraph()
        self.k = -1
        self.calib = _calib_offsets(len(data.robots), calib_noise, cfg.seed)
        self._by_k = {}
        for o in data.observations:
            self._by_k.setdefault(o[0], []).append(o)

    def _add(self, vid, init, owner, prior=None):
        self.g.add_variable(vid, init, owner=owner)
        if prior is not None:
            self.g.set_prior(vid, prior)

    def _setup(self):
        cfg, d = self.cfg, self.data
        cp_t, cp_r = cfg.calib_prior_sigma
        for ri, subj in enumerate(d.robots):
            self._add(f"BS{ri}", mf.se2(*self.calib[ri]), ri, _info(cp_t, cp_t, cp_r * DEG))
            self._add(f"BM{ri}", mf.rn([0.0, 0.0]), ri, _info(cp_t, cp_t))
            if not self.auto_calib:
                for vid, dim in ((f"BS{ri}", 3), (f"BM{ri}", 2)):
                    self.g.freeze(vid, CanonicalGaussian(np.zeros(dim), 1e6 * np.eye(dim)))

    def advance(self):
        cfg, d, g = self.cfg, self.data, self.g
        self.k += 1
        k = self.k
        if k == 0:
            self._setup()
        it, ir = cfg.init_sigma
        cf = _info(*[cfg.calib_factor_sigma[0]] * 2, cfg.calib_factor_sigma[1])
        events = self._by_k.get(k, [])
        for ri, subj in enumerate(d.robots):
            b = f"B{ri}_{k}"
            if k == 0:
                self._add(b, mf.se2(*d.groundtruth[ri, 0]), ri, _info(it, it, ir * DEG))
            else:
                z = d.odometry[ri, k - 1]
                init = mf.ManifoldPoint("SE2", lie.se2_compose(g.estimate(f"B{ri}_{k - 1}").data, z))
                self._add(b, init, ri)
                g.add_factor(f"O{ri}_{k}", "odometry_2d", (f"B{ri}_{k - 1}", b),
                             mf.ManifoldPoint("SE2", z), _info(*cfg.odom_sigma[:2], cfg.odom_sigma[2] * DEG),
                             owner=ri, reg=cfg.reg)
            T = g.estimate(b).data
            if any(e[1] == ri for e in events):
                s = f"S{ri}_{k}"
                self._add(s, mf.ManifoldPoint("SE2", lie.se2_compose(T, g.estimate(f"BS{ri}").data)), ri)
                g.add_factor(f"C{ri}_{k}", "calibration_2d", (s, b, f"BS{ri}"), None, cf,
                             owner=ri, reg=cfg.reg)
            if any(e[2] == subj for e in events):
                m = f"M{ri}_{k}"
                p = g.estimate(f"BM{ri}").data
                c, sn = math.cos(T[2]), math.sin(T[2])
                self._add(m, mf.rn([T[0] + c * p[0] - sn * p[1], T[1] + sn * p[0] + c * p[1]]), ri)
                g.add_factor(f"K{ri}_{k}", "marker_calibration_2d", (m, b, f"BM{ri}"), None,
                             cf[:2, :2].copy(), owner=ri, reg=cfg.reg)
        lam = _info(cfg.rb_sigma[0], cfg.rb_sigma[1] * DEG)
        index = {s: i for i, s in enumerate(d.robots)}
        for _, ri, subj, rng, brg in events:
            s = f"S{ri}_{k}"
            if subj in index:
                target = f"M{index[subj]}_{k}"
            else:
                target = f"L{subj}"
                if target not in g.variables:
                    S = g.estimate(s).data
                    a = S[2] + brg
                    self._add(target, mf.rn([S[0] + rng * math.cos(a), S[1] + rng * math.sin(a)]), ri,
                              _info(cfg.landmark_prior_sigma, cfg.landmark_prior_sigma))
            g.add_factor(f"Z{ri}_{subj}_{k}", "range_bearing_2d", (s, target),
                         range_bearing_point(rng, brg), lam, owner=ri, reg=cfg.reg)

    def retire(self):
        """Freeze the keyframe that just left the window at its current belief."""
        if self.window is None:
            return
        old = self.k - self.window
        if old < 0:
            return
        for ri in range(len(self.data.robots)):
            for pre in ("B", "S", "M"):
                vid = f"{pre}{ri}_{old}"
                if vid in self.g.variables:
                    self.g.freeze(vid)

    def iterate(self):
        cfg = self.cfg
        return self.g.iterate(dropout=cfg.dropout, seed=cfg.seed, energy=False)

    def poses(self):
        K = self.k + 1
        return np.stack([self.g.estimates_array([f"B{ri}_{k}" for k in range(K)])
                         for ri in range(len(self.data.robots))])

    def metrics(self, iteration=0):
        K = self.k + 1
        est, truth = self.poses(), self.data.groundtruth[:, :K]
        R = len(self.data.robots)
        bs = np.stack([self.g.estimate(f"BS{ri}").data for ri in range(R)])
        bm = np.stack([self.g.estimate(f"BM{ri}").data for ri in range(R)])
        return MetricsRecord(
            seed=self.cfg.seed, motion=self.k, iteration=iteration,
            ate_twb_m=rmse_ate_array(est, truth, "SE2"), are_twb_deg=rmse_are_array(est, truth, "SE2"),
            ate_tbs_m=rmse_ate_array(bs, np.zeros_like(bs), "SE2"),
            are_tbs_deg=rmse_are_array(bs, np.zeros_like(bs), "SE2"),
            ate_tbm_m=rmse_ate_array(bm, np.zeros_like(bm), "R2"))

    def run(self, max_keyframes=None):
        K = self.data.n_keyframes if max_keyframes is None else min(max_keyframes, self.data.n_keyframes)
        for _ in range(K):
            self.advance()
            for _ in range(self.cfg.iterations):
                self.iterate()
            self.retire()
        return self.metrics(self.cfg.iterations)


def run_mrclam(dataset, window=30, calib_noise=None, auto_calib=True, cfg=MrClamConfig(),
               max_keyframes=None):
    """Final metrics of one sliding-window run.

    ``calib_noise`` = (metres, degrees) perturbs every robot's assumed sensor
    extrinsic away from the true (identity) mounting.
    """
    return MrClamRun(dataset, window, calib_noise, auto_calib, cfg).run(max_keyframes)
