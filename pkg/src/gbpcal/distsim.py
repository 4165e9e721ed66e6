"""Multi-robot world, per-robot graph ownership and simulated channels.

Variable ids (robot r, step t):

    B{r}_{t}   T_WB at step t            SE3
    S{r}_{t}   T_WS at step t            SE3, only at steps where r observes
    M{r}_{t}   t_WM at step t            R3, only at steps where r is observed
    BS{r}      T_BS (sensor extrinsic)   SE3
    BM{r}      t_BM (marker position)    R3

The range-bearing factor ``Z{a}_{b}_{t}`` is owned by the observer ``a`` and
is the only factor touching another robot's variable (``M{b}_{t}``).

Two executors are provided. The centralised one keeps every node in one
graph and emulates the channel with owner-aware dropout masks; the
distributed one gives every robot its own graph, represents remote
endpoints with ghost nodes and moves cross-robot messages through
``exchange``. Both draw dropout from the same per-edge hash, so with the
same seeds they produce the same numbers.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import lie
from . import manifold as mf
from .factors import AdaptiveReg, DcsConfig, RangeBearing, range_bearing_point
from .gaussian import CanonicalGaussian
from .graph import F2V, FactorGraph, edge_uid, edge_uniform, total_energy
from .metrics import MetricsRecord, rmse_are_array, rmse_ate_array

DEG = math.pi / 180.0
SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class NoiseConfig:
    odom_trans_sigma: float = 0.01          # m per m travelled
    odom_rot_sigma: float = 1.0             # deg per 90 deg rotated
    rb_sigma: tuple = (0.05, 5.0)           # m, deg
    init_pose_sigma: tuple = (0.01, 1.0)    # m, deg
    calib_sigma: tuple = (0.05, 0.05, 5.0)  # sensor t (m), marker t (m), sensor R (deg)
    outlier_frac: float = 0.0

    def __post_init__(self):
        vals = [self.odom_trans_sigma, self.odom_rot_sigma, *self.rb_sigma,
                *self.init_pose_sigma, *self.calib_sigma]
        if any(v < 0 for v in vals):
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.outlier_frac <= 1.0:
            raise ValueError("outlier_frac must be in [0, 1]")

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, (0.0, 0.0), (0.0, 0.0), (0.0, 0.0, 0.0), 0.0)


@dataclass(frozen=True)
class ChannelModel:
    drop_prob: float = 0.3
    comm_range: float = math.inf
    rng_seed: int = None

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0, 1]")
        if self.comm_range < 0:
            raise ValueError("comm_range must be non-negative")


@dataclass(frozen=True)
class SimConfig:
    n_robots: int = 16
    n_motions: int = 50
    iterations: int = 30
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    channel: ChannelModel = field(default_factory=ChannelModel)
    internal_dropout: float = 0.3
    dcs_phi: float = 10.0                   # None disables the robust kernel
    auto_calib: bool = True
    incremental: bool = True                # False: whole graph up front
    batch_iterations: int = 200             # sweeps when not incremental
    reg: AdaptiveReg = field(default_factory=AdaptiveReg)
    fov_deg: float = 60.0
    max_observed: int = 3
    world_size: float = 20.0
    outlier_max_range: float = 30.0
    calib_factor_sigma: tuple = (0.01, 0.01)   # m, rad
    calib_prior_scale: float = 10.0
    truth_calib_trans: float = 0.2
    truth_calib_rot_deg: float = 30.0


@dataclass(frozen=True)
class ObservationEvent:
    t: int
    observer: int
    observed: int
    z: mf.ManifoldPoint
    is_outlier: bool = False

    def __post_init__(self):
        if self.observer == self.observed:
            raise ValueError("a robot cannot observe itself")


@dataclass
class World:
    """Ground truth plus the measurement stream."""
    T_WB: np.ndarray         # [R, T+1, 7]
    T_BS: np.ndarray         # [R, 7]
    t_BM: np.ndarray         # [R, 3]
    odom: np.ndarray         # [R, T, 7] measured relative motions
    odom_sigma: np.ndarray   # [R, T, 6] nominal sigmas (for the factor information)
    init_T_WB0: np.ndarray   # [R, 7]
    init_T_BS: np.ndarray
    init_t_BM: np.ndarray
    events: list             # events[t] -> [ObservationEvent]

    @property
    def n_robots(self):
        return self.T_WB.shape[0]

    @property
    def n_steps(self):
        return self.T_WB.shape[1] - 1

    def T_WS(self, r, t):
        return lie.se3_compose(self.T_WB[r, t], self.T_BS[r])

    def t_WM(self, r, t):
        return lie.se3_act(self.T_WB[r, t], self.t_BM[r])


def _quat_wxyz(rot):
    q = rot.as_quat()
    return np.concatenate([q[..., 3:], q[..., :3]], axis=-1)



def generate_world(n_robots, n_steps, noise=NoiseConfig(), seed=0, fov_deg=60.0,
                   max_observed=3, world_size=20.0, outlier_max_range=30.0,
                   truth_calib_trans=0.2, truth_calib_rot_deg=30.0):
    """Random trajectories, noisy odometry and range-bearing observations.

    Independent random streams are used for trajectories, odometry noise,
    observation noise and outliers, so changing one noise setting leaves the
    other draws of a seed untouched.
    """
    if n_robots < 2:
        raise ValueError("need at least two robots")
    streams = np.random.SeedSequence(seed).spawn(6)
    r_traj, r_cal, r_odo, r_obs, r_out, r_init = (np.random.default_rng(s) for s in streams)
    R, T = n_robots, n_steps

    # ground truth
    T_WB = np.zeros((R, T + 1, 7))
    T_WB[:, 0, :3] = r_traj.uniform(0.0, world_size, (R, 3))
    T_WB[:, 0, 3:] = _quat_wxyz(Rotation.random(R, random_state=r_traj))
    steps = np.zeros((R, T, 7))
    steps[..., :3] = r_traj.uniform(0.0, 1.0, (R, T, 3))
    eul = r_traj.uniform(-math.pi, math.pi, (R, T, 3))
    rots = Rotation.from_euler("xyz", eul.reshape(-1, 3))
    steps[..., 3:] = _quat_wxyz(rots).reshape(R, T, 4)
    angles = rots.magnitude().reshape(R, T)
    for t in range(T):
        T_WB[:, t + 1] = lie.se3_compose(T_WB[:, t], steps[:, t])

    T_BS = np.zeros((R, 7))
    T_BS[:, :3] = r_cal.uniform(-truth_calib_trans, truth_calib_trans, (R, 3))
    T_BS[:, 3:] = lie.so3_exp(r_cal.uniform(-1, 1, (R, 3)) * truth_calib_rot_deg * DEG)
    t_BM = r_cal.uniform(-truth_calib_trans, truth_calib_trans, (R, 3))

    # odometry: sigma scales with distance travelled / angle rotated; the
    # rotational sigma is the total angle, shared evenly over three axes
    dist = np.linalg.norm(steps[..., :3], axis=-1)
    sig_t = noise.odom_trans_sigma * dist
    sig_r = noise.odom_rot_sigma * DEG * angles / (math.pi / 2) / math.sqrt(3.0)
    odom_sigma = np.concatenate([np.repeat(sig_t[..., None], 3, -1),
                                 np.repeat(sig_r[..., None], 3, -1)], axis=-1)
    delta = r_odo.normal(size=(R, T, 6)) * odom_sigma
    odom = lie.se3_oplus(steps, delta)

    # initial guesses
    st, sr = noise.init_pose_sigma
    init_T_WB0 = lie.se3_oplus(T_WB[:, 0], np.concatenate(
        [r_init.normal(0, st, (R, 3)), r_init.normal(0, sr * DEG, (R, 3))], axis=-1))
    cs_t, cm_t, cs_r = noise.calib_sigma
    init_T_BS = lie.se3_oplus(T_BS, np.concatenate(
        [r_init.normal(0, cs_t, (R, 3)), r_init.normal(0, cs_r * DEG, (R, 3))], axis=-1))
    init_t_BM = t_BM + r_init.normal(0, cm_t, (R, 3))

    # observations
    fov = fov_deg * DEG
    rs, rb = noise.rb_sigma
    events = []
    for t in range(T + 1):
        ev = []
        T_WS = lie.se3_compose(T_WB[:, t], T_BS)
        t_WM = lie.se3_act(T_WB[:, t], t_BM)
        for a in range(R):
            h, _, valid = RangeBearing.predict(np.repeat(T_WS[a][None], R, 0), t_WM)
            ok = valid & (np.abs(h[:, 1]) < fov) & (np.abs(h[:, 2]) < fov)
            ok[a] = False
            cand = np.flatnonzero(ok)
            cand = cand[np.argsort(h[cand, 0], kind="stable")][:max_observed]
            for b in cand:
                n = r_obs.normal(size=3) * np.array([rs, rb * DEG, rb * DEG])
                z = h[b] + n
                outlier = bool(r_out.uniform() < noise.outlier_frac)
                draw = r_out.uniform(size=3)
                if outlier:
                    z = np.array([draw[0] * outlier_max_range,
                                  (2 * draw[1] - 1) * fov, (2 * draw[2] - 1) * fov])
                z[0] = max(z[0], 1e-3)
                ev.append(ObservationEvent(t, a, int(b), range_bearing_point(*z), outlier))
        events.append(ev)
    return World(T_WB, T_BS, t_BM, odom, odom_sigma, init_T_WB0, init_T_BS, init_t_BM, events)


# ---------------------------------------------------------------------------
# graph increments

@dataclass
class VarSpec:
    id: str
    owner: int
    init: mf.ManifoldPoint
    prior_lam: np.ndarray = None


@dataclass
class FactorSpec:
    id: str
    kind: str
    adjacency: tuple
    measurement: object
    noise_lambda: np.ndarray
    owner: int
    dcs: DcsConfig = None


@dataclass
class GraphDelta:
    variables: list = field(default_factory=list)
    factors: list = field(default_factory=list)


def bid(r, t):
    return f"B{r}_{t}"


def sid(r, t):
    return f"S{r}_{t}"


def mid(r, t):
    return f"M{r}_{t}"


def _diag_info(*sigmas):
    s = np.maximum(np.asarray(sigmas, dtype=float), SIGMA_FLOOR)
    return np.diag(1.0 / s ** 2)


def rb_information(noise):
    rs, rb = noise.rb_sigma
    return _diag_info(rs, rb * DEG, rb * DEG)


def initial_delta(world, cfg):
    """Calibration variables and the anchored first pose of every robot."""
    d = GraphDelta()
    st, sr = cfg.noise.init_pose_sigma
    cs_t, cm_t, cs_r = cfg.noise.calib_sigma
    k = cfg.calib_prior_scale
    for r in range(world.n_robots):
        d.variables.append(VarSpec(f"BS{r}", r, mf.ManifoldPoint("SE3", world.init_T_BS[r]),
                                   _diag_info(*[k * cs_t] * 3, *[k * cs_r * DEG] * 3)))
        d.variables.append(VarSpec(f"BM{r}", r, mf.rn(world.init_t_BM[r]),
                                   _diag_info(*[k * cm_t] * 3)))
        d.variables.append(VarSpec(bid(r, 0), r, mf.ManifoldPoint("SE3", world.init_T_WB0[r]),
                                   _diag_info(*[st] * 3, *[sr * DEG] * 3)))
    return d


def build_increment(robot, t, world, cfg, estimate):
    """Nodes robot ``robot`` adds at step t.

    ``estimate(vid)`` returns the current estimate of one of the robot's own
    variables (or of a variable already in this delta); new variables are
    initialised by composing those estimates.
    """
    d = GraphDelta()
    r = robot
    local = {}

    def est(vid):
        return local[vid] if vid in local else estimate(vid)

    if t > 0:
        z = mf.ManifoldPoint("SE3", world.odom[r, t - 1])
        init = mf.compose(est(bid(r, t - 1)), z)
        local[bid(r, t)] = init
        d.variables.append(VarSpec(bid(r, t), r, init))
        d.factors.append(FactorSpec(f"O{r}_{t}", "odometry", (bid(r, t - 1), bid(r, t)), z,
                                    _diag_info(*world.odom_sigma[r, t - 1]), r))
    events = world.events[t]
    observes = [e for e in events if e.observer == r]
    observed = any(e.observed == r for e in events)
    cs = _diag_info(*[cfg.calib_factor_sigma[0]] * 3, *[cfg.calib_factor_sigma[1]] * 3)
    if observes:
        init = mf.compose(est(bid(r, t)), est(f"BS{r}"))
        local[sid(r, t)] = init
        d.variables.append(VarSpec(sid(r, t), r, init))
        d.factors.append(FactorSpec(f"C{r}_{t}", "calibration", (sid(r, t), bid(r, t), f"BS{r}"),
                                    None, cs, r))
    if observed:
        T = est(bid(r, t))
        init = mf.rn(lie.se3_act(T.data, est(f"BM{r}").data))
        local[mid(r, t)] = init
        d.variables.append(VarSpec(mid(r, t), r, init))
        d.factors.append(FactorSpec(f"K{r}_{t}", "marker_calibration", (mid(r, t), bid(r, t), f"BM{r}"),
                                    None, cs[:3, :3].copy(), r))
    dcs = None if cfg.dcs_phi is None else DcsConfig(cfg.dcs_phi)
    lam = rb_information(cfg.noise)
    for e in observes:
        d.factors.append(FactorSpec(f"Z{r}_{e.observed}_{t}", "range_bearing",
                                    (sid(r, t), mid(e.observed, t)), e.z, lam, r, dcs))
    return d


def _owner_of(vid):
    body = vid[2:] if vid[:2] in ("BS", "BM") else vid[1:]
    return int(body.split("_")[0])


def is_calibration_id(vid):
    return vid.startswith("BS") or vid.startswith("BM")


# ---------------------------------------------------------------------------
# robots, channel and the two executors

@dataclass
class Robot:
    id: int
    true_T_WB: np.ndarray
    true_T_BS: np.ndarray
    true_t_BM: np.ndarray
    local_graph: FactorGraph


def comm_matrix(world, t, comm_range):
    """comm[a, b]: robots a and b are within radio range at step t (true positions)."""
    if math.isinf(comm_range):
        return None
    p = world.T_WB[:, t, :3]
    dist = np.linalg.norm(p[:, None] - p[None], axis=-1)
    return dist <= comm_range


def exchange(robots, channel, t, messages, iteration, comm=None, seed=0, trace=None):
    """Deliver cross-robot messages; returns (delivered, dropped).

    A message survives if the per-edge draw clears ``drop_prob`` and the two
    robots are within ``comm_range`` (``comm`` is the matrix for step t).
    Undelivered messages are discarded; the receiver keeps stale state.
    """
    cross_seed = seed if channel.rng_seed is None else channel.rng_seed
    delivered = dropped = 0
    for msg in messages:
        fid, vid = msg.factor_id, msg.variable_id
        fown, vown = _factor_owner(fid), _owner_of(vid)
        u = edge_uniform(cross_seed, iteration, np.uint64(edge_uid(fid, vid)), msg.direction)
        ok = float(u) >= channel.drop_prob
        if comm is not None:
            ok = ok and bool(comm[fown, vown])
        if not ok:
            dropped += 1
            continue
        receiver = vown if msg.direction == F2V else fown
        robots[receiver].local_graph.deliver(msg)
        delivered += 1
        if trace is not None:
            trace.append((iteration, msg.sender, msg.receiver))
    return delivered, dropped


def _factor_owner(fid):
    return int(fid[1:].split("_")[0])


class Simulation:
    """One seeded scenario run on either executor."""

    def __init__(self, cfg, world=None, distributed=False, trace=False):
        self.cfg = cfg
        self.world = world if world is not None else generate_world(
            cfg.n_robots, cfg.n_motions, cfg.noise, cfg.seed, cfg.fov_deg, cfg.max_observed,
            cfg.world_size, cfg.outlier_max_range, cfg.truth_calib_trans, cfg.truth_calib_rot_deg)
        self.distributed = distributed
        R = self.world.n_robots
        if distributed:
            graphs = [FactorGraph() for _ in range(R)]
        else:
            g = FactorGraph()
            graphs = [g] * R
        w = self.world
        self.robots = [Robot(r, w.T_WB[r], w.T_BS[r], w.t_BM[r], graphs[r]) for r in range(R)]
        self.t = -1
        self.iteration = 0
        self.trace = [] if trace else None
        self._brows = [[] for _ in range(R)]

    def _graph(self, r):
        return self.robots[r].local_graph

    @property
    def central_graph(self):
        if self.distributed:
            raise RuntimeError("the distributed executor has one graph per robot")
        return self.robots[0].local_graph

    def _unique_graphs(self):
        if self.distributed:
            return [rb.local_graph for rb in self.robots]
        return [self.robots[0].local_graph]

    def estimate(self, vid):
        return self._graph(_owner_of(vid)).estimate(vid)

    # -- construction ------------------------------------------------------

    def _apply(self, deltas):
        cfg = self.cfg
        inits = {}
        for d in deltas:
            for v in d.variables:
                g = self._graph(v.owner)
                node = g.add_variable(v.id, v.init, owner=v.owner)
                inits[v.id] = v.init
                if v.prior_lam is not None:
                    g.set_prior(v.id, v.prior_lam)
                if v.id[0] == "B" and v.id[1].isdigit():
                    self._brows[v.owner].append(node.row)
                if is_calibration_id(v.id) and not cfg.auto_calib:
                    d_ = node.dim
                    g.freeze(v.id, CanonicalGaussian(np.zeros(d_), 1e6 * np.eye(d_)))
        for d in deltas:
            for f in d.factors:
                g = self._graph(f.owner)
                if self.distributed and f.kind == "range_bearing":
                    s_id, m_id = f.adjacency
                    b = _owner_of(m_id)
                    gb = self._graph(b)
                    if m_id not in g.variables:
                        g.add_variable(m_id, gb.estimate(m_id), owner=b, ghost=True)
                    if s_id not in gb.variables:
                        gb.add_variable(s_id, g.estimate(s_id), owner=f.owner, ghost=True)
                    gb.add_factor(f.id, f.kind, f.adjacency, f.measurement, f.noise_lambda,
                                  owner=f.owner, reg=cfg.reg, dcs=f.dcs, ghost=True)
                g.add_factor(f.id, f.kind, f.adjacency, f.measurement, f.noise_lambda,
                             owner=f.owner, reg=cfg.reg, dcs=f.dcs)

    def advance(self):
        """Add the next step's nodes (step 0 also adds calibration variables)."""
        self.t += 1
        t = self.t
        deltas = [initial_delta(self.world, self.cfg)] if t == 0 else []
        if t == 0:
            self._apply(deltas)
            deltas = []
        for r in range(self.world.n_robots):
            deltas.append(build_increment(r, t, self.world, self.cfg, self.estimate))
        self._apply(deltas)

    def build_all(self):
        while self.t < self.world.n_steps:
            self.advance()

    # -- inference ---------------------------------------------------------

    def iterate(self):
        cfg = self.cfg
        ch = cfg.channel
        comm = comm_matrix(self.world, max(self.t, 0), ch.comm_range)
        cross_seed = cfg.seed if ch.rng_seed is None else ch.rng_seed
        kw = dict(dropout=cfg.internal_dropout, seed=cfg.seed, cross_dropout=ch.drop_prob,
                  comm=comm, cross_seed=cross_seed)
        if not self.distributed:
            g = self._graph(0)
            rep = g.iterate(energy=False, **kw)
            self.iteration += 1
            return rep.msgs_sent, rep.msgs_dropped
        graphs = self._unique_graphs()
        sent = dropped = 0
        out = []
        for g in graphs:
            s, d, _, msgs = g.factor_phase(**kw)
            sent, dropped, out = sent + s, dropped + d, out + msgs
        s, d = exchange(self.robots, ch, self.t, out, self.iteration, comm, cfg.seed, self.trace)
        sent, dropped, out = sent + s, dropped + d, []
        for g in graphs:
            s, d, msgs = g.variable_phase(**kw)
            sent, dropped, out = sent + s, dropped + d, out + msgs
        s, d = exchange(self.robots, ch, self.t, out, self.iteration, comm, cfg.seed, self.trace)
        sent, dropped = sent + s, dropped + d
        for g in graphs:
            g.iteration += 1
        self.iteration += 1
        return sent, dropped

    # -- read-out ----------------------------------------------------------

    def body_estimates(self):
        """[R, t+1, 7] current T_WB estimates."""
        out = []
        for r in range(self.world.n_robots):
            st = self._graph(r).vars["SE3"]
            out.append(st.a["est"][np.asarray(self._brows[r])])
        return np.stack(out)

    def calib_estimates(self):
        R = self.world.n_robots
        tbs = np.stack([mf.to_params(self.estimate(f"BS{r}")) for r in range(R)])
        tbm = np.stack([mf.to_params(self.estimate(f"BM{r}")) for r in range(R)])
        return tbs, tbm

    def energy(self):
        return float(sum(total_energy(g) for g in self._unique_graphs()))

    def metrics(self, motion=None, iteration=0, sent=0, dropped=0, energy=True):
        w = self.world
        est = self.body_estimates()
        truth = w.T_WB[:, :est.shape[1]]
        tbs, tbm = self.calib_estimates()
        return MetricsRecord(
            seed=self.cfg.seed, motion=self.t if motion is None else motion, iteration=iteration,
            ate_twb_m=rmse_ate_array(est, truth), are_twb_deg=rmse_are_array(est, truth),
            ate_tbs_m=rmse_ate_array(tbs, w.T_BS), are_tbs_deg=rmse_are_array(tbs, w.T_BS),
            ate_tbm_m=rmse_ate_array(tbm, w.t_BM, kind="R3"),
            energy=self.energy() if energy else float("nan"),
            msgs_sent=sent, msgs_dropped=dropped)

    def run(self, energy=True):
        """Yield a MetricsRecord after every GBP iteration."""
        cfg = self.cfg
        if cfg.incremental:
            self.advance()
            for motion in range(1, self.world.n_steps + 1):
                self.advance()
                for it in range(1, cfg.iterations + 1):
                    s, d = self.iterate()
                    yield self.metrics(motion, it, s, d, energy)
        else:
            self.build_all()
            for it in range(1, cfg.batch_iterations + 1):
                s, d = self.iterate()
                yield self.metrics(self.world.n_steps, it, s, d, energy)


def run_scenario(cfg, distributed=False, energy=True):
    """All per-iteration metrics of one seeded run."""
    return list(Simulation(cfg, distributed=distributed).run(energy=energy))


def initial_metrics(cfg, world=None):
    """Metrics of the dead-reckoned initial guess (no inference)."""
    sim = Simulation(cfg, world)
    sim.build_all()
    return sim.metrics(sim.world.n_steps, 0, energy=False)
