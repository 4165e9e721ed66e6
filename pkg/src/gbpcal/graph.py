"""Factor graph storage and the synchronous Gaussian belief propagation engine.

State lives in per-kind arrays (one store per variable space, one per factor
kind) so a sweep is a handful of batched numpy/numba calls; ``VariableNode``
and ``FactorNode`` are thin views onto a row of those arrays.

Every message is a Gaussian over the tangent space at a linearisation point
and is stored together with that point. Before messages are combined at a
variable they are re-expressed at the variable's current estimate with the
first-order shift ``eta - lam (x_now (-) x_lin)``.

Edges whose other endpoint is a *ghost* (a stand-in for a node owned by
another robot) are not stored locally: the messages are returned so a
channel can carry them to the owner.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from . import _kernels, lie
from . import manifold as mf
from .factors import MODELS, AdaptiveReg, DcsConfig, measurement_params, measurement_point
from .gaussian import CanonicalGaussian, SingularMarginalization, marginalize

F2V, V2F = 0, 1
_MASK64 = (1 << 64) - 1


def edge_uid(factor_id, var_id):
    h = hashlib.blake2b(f"{factor_id}|{var_id}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


def edge_uniform(seed, iteration, uid, direction):
    """Counter-based uniform draw in [0, 1) per (seed, iteration, edge, direction).

    Keyed on the edge rather than on draw order, so every executor that
    handles an edge sees the same dropout decision.
    """
    uid = np.asarray(uid, dtype=np.uint64)
    key = (int(seed) * 0x94D049BB133111EB + int(iteration) * 0xBF58476D1CE4E5B9
           + int(direction) * 0x9E3779B97F4A7C15) & _MASK64
    with np.errstate(over="ignore"):
        z = uid ^ np.uint64(key)
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


@dataclass(frozen=True, eq=False)
class GbpMessage:
    """A directed message. ``lin_point`` is the point whose tangent space the
    Gaussian is expressed in; it is always set for variable-to-factor
    messages and is also carried by factor-to-variable messages so the
    receiver can re-express them."""
    sender: str
    receiver: str
    gaussian: CanonicalGaussian
    lin_point: mf.ManifoldPoint = None
    iteration: int = 0
    direction: int = F2V

    @property
    def factor_id(self):
        return self.sender if self.direction == F2V else self.receiver

    @property
    def variable_id(self):
        return self.receiver if self.direction == F2V else self.sender


@dataclass
class IterationReport:
    iteration: int
    energy: float
    msgs_sent: int
    msgs_dropped: int
    skipped: int = 0


# ---------------------------------------------------------------------------
# array stores

class _Store:
    def __init__(self, specs, cap=16):
        self.n = 0
        self.cap = cap
        self._specs = specs
        self.a = {name: np.full((cap,) + shape, fill, dtype=dtype)
                  for name, (shape, dtype, fill) in specs.items()}
        self.nodes = []

    def _append(self):
        if self.n == self.cap:
            new = 2 * self.cap
            for name, (shape, dtype, fill) in self._specs.items():
                arr = np.full((new,) + shape, fill, dtype=dtype)
                arr[:self.n] = self.a[name][:self.n]
                self.a[name] = arr
            self.cap = new
        self.n += 1
        return self.n - 1


class _VarStore(_Store):
    def __init__(self, space):
        sp = lie.SPACES[space]
        self.space = sp
        d, p = sp.dim, sp.param_size
        super().__init__({
            "est": ((p,), float, 0.0),
            "prior_lam": ((d, d), float, 0.0),
            "prior_pt": ((p,), float, 0.0),
            "has_prior": ((), bool, False),
            "frozen": ((), bool, False),
            "frozen_eta": ((d,), float, 0.0),
            "frozen_lam": ((d, d), float, 0.0),
            "ghost": ((), bool, False),
            "owner": ((), np.int64, 0),
            "belief_eta": ((d,), float, 0.0),
            "belief_lam": ((d, d), float, 0.0),
        })


class _FactorStore(_Store):
    def __init__(self, kind):
        model = MODELS[kind]
        self.model = model
        self.k = len(model.slots)
        self.dims = [lie.SPACES[s].dim for s in model.slots]
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(int)
        self.D = int(self.offsets[-1])
        m = model.res_dim
        specs = {
            "rows": ((self.k,), np.int64, 0),
            "meas": ((model.meas_size,), float, 0.0),
            "noise": ((m, m), float, 0.0),
            "reg": ((), float, np.nan),
            "reg_up": ((), float, 11.0),
            "reg_down": ((), float, 9.0),
            "reg_eps": ((), float, 1e-4),
            "e_prev": ((), float, np.nan),
            "phi": ((), float, np.nan),
            "ghost": ((), bool, False),
            "owner": ((), np.int64, 0),
            "euid": ((self.k,), np.uint64, 0),
            "vowner": ((self.k,), np.int64, 0),
        }
        for s, space in enumerate(model.slots):
            d, p = self.dims[s], lie.SPACES[space].param_size
            for tag in ("v2f", "f2v"):
                specs[f"{tag}_eta{s}"] = ((d,), float, 0.0)
                specs[f"{tag}_lam{s}"] = ((d, d), float, 0.0)
                specs[f"{tag}_lin{s}"] = ((p,), float, 0.0)
        super().__init__(specs)


# ---------------------------------------------------------------------------
# node views

class VariableNode:
    def __init__(self, graph, vid, space, row):
        self.graph = graph
        self.id = vid
        self.space = space
        self.row = row

    @property
    def _st(self):
        return self.graph.vars[self.space]

    @property
    def owner(self):
        return int(self._st.a["owner"][self.row])

    @property
    def ghost(self):
        return bool(self._st.a["ghost"][self.row])

    @property
    def frozen(self):
        return bool(self._st.a["frozen"][self.row])

    @property
    def estimate(self):
        return mf.from_params(self.space, self._st.a["est"][self.row])

    @estimate.setter
    def estimate(self, point):
        self._st.a["est"][self.row] = mf.to_params(point)

    @property
    def dim(self):
        return self._st.space.dim

    @property
    def belief(self):
        """Belief as of the last variable update (tangent space at the estimate)."""
        a = self._st.a
        return CanonicalGaussian(a["belief_eta"][self.row], a["belief_lam"][self.row])

    @property
    def prior(self):
        """The prior re-expressed at the current estimate, or None."""
        a = self._st.a
        if not a["has_prior"][self.row]:
            return None
        lam = a["prior_lam"][self.row]
        delta = self._st.space.ominus(a["est"][self.row][None], a["prior_pt"][self.row][None])[0]
        return CanonicalGaussian(-lam @ delta, lam)

    @property
    def inbox(self):
        """Latest stored factor-to-variable message per adjacent factor."""
        out = {}
        for fid, kind, frow, s in self.graph._edges[self.id]:
            st = self.graph.stores[kind]
            a = st.a
            g = CanonicalGaussian(a[f"f2v_eta{s}"][frow], a[f"f2v_lam{s}"][frow])
            lin = mf.from_params(self.space, a[f"f2v_lin{s}"][frow])
            out[fid] = GbpMessage(fid, self.id, g, lin, self.graph.iteration, F2V)
        return out

    def __repr__(self):
        return f"VariableNode({self.id!r}, {self.space}, owner={self.owner})"


class FactorNode:
    def __init__(self, graph, fid, kind, row, adjacency):
        self.graph = graph
        self.id = fid
        self.kind = kind
        self.row = row
        self.adjacency = tuple(adjacency)

    @property
    def _st(self):
        return self.graph.stores[self.kind]

    @property
    def owner(self):
        return int(self._st.a["owner"][self.row])

    @property
    def ghost(self):
        return bool(self._st.a["ghost"][self.row])

    @property
    def measurement(self):
        return measurement_point(self.kind, self._st.a["meas"][self.row])

    @property
    def noise_lambda(self):
        return self._st.a["noise"][self.row].copy()

    @property
    def reg_state(self):
        a, r = self._st.a, self.row
        if np.isnan(a["reg"][r]):
            return None
        return AdaptiveReg(float(a["reg"][r]), float(a["reg_up"][r]),
                           float(a["reg_down"][r]), float(a["reg_eps"][r]))

    @property
    def dcs(self):
        phi = self._st.a["phi"][self.row]
        return None if np.isnan(phi) else DcsConfig(float(phi))

    @property
    def energy_prev(self):
        e = self._st.a["e_prev"][self.row]
        return None if np.isnan(e) else float(e)

    def slot(self, var_id):
        return self.adjacency.index(var_id)

    def lin_points(self):
        a, st = self._st.a, self._st
        return [mf.from_params(sp, a[f"v2f_lin{s}"][self.row]) for s, sp in enumerate(st.model.slots)]

    def incoming(self, s):
        a = self._st.a
        return CanonicalGaussian(a[f"v2f_eta{s}"][self.row], a[f"v2f_lam{s}"][self.row])

    def __repr__(self):
        return f"FactorNode({self.id!r}, {self.kind}, {self.adjacency})"


# ---------------------------------------------------------------------------

class FactorGraph:
    """A (possibly partial) factor graph plus all GBP message state."""

    def __init__(self):
        self.vars = {s: _VarStore(s) for s in lie.SPACES}
        self.stores = {}
        self.variables = {}
        self.factors = {}
        self._edges = {}
        self._scatter_cache = {}
        self.iteration = 0

    # -- construction ------------------------------------------------------

    def add_variable(self, vid, estimate, owner=0, ghost=False):
        if vid in self.variables:
            raise KeyError(f"duplicate variable {vid!r}")
        space = mf.space_of(estimate)
        st = self.vars[space]
        row = st._append()
        st.a["est"][row] = mf.to_params(estimate)
        st.a["owner"][row] = owner
        st.a["ghost"][row] = ghost
        node = VariableNode(self, vid, space, row)
        st.nodes.append(node)
        self.variables[vid] = node
        self._edges[vid] = []
        return node

    def set_prior(self, vid, lam, anchor=None):
        """Anchor the variable with N(anchor, lam^-1) (anchor defaults to the estimate)."""
        v = self.variables[vid]
        a = v._st.a
        a["prior_lam"][v.row] = lam
        a["prior_pt"][v.row] = a["est"][v.row] if anchor is None else mf.to_params(anchor)
        a["has_prior"][v.row] = True

    def freeze(self, vid, gaussian=None):
        """Stop updating a variable; it keeps sending ``gaussian`` (default:
        its current belief) to every adjacent factor."""
        v = self.variables[vid]
        if gaussian is None:
            gaussian = compute_belief(v)
        a = v._st.a
        a["frozen"][v.row] = True
        a["frozen_eta"][v.row] = gaussian.eta
        a["frozen_lam"][v.row] = gaussian.lam
        a["belief_eta"][v.row] = gaussian.eta
        a["belief_lam"][v.row] = gaussian.lam
        for fid, kind, frow, s in self._edges[vid]:
            fa = self.stores[kind].a
            fa[f"v2f_eta{s}"][frow] = gaussian.eta
            fa[f"v2f_lam{s}"][frow] = gaussian.lam
            fa[f"v2f_lin{s}"][frow] = a["est"][v.row]

    def add_factor(self, fid, kind, adjacency, measurement=None, noise_lambda=None,
                   owner=0, reg=AdaptiveReg(), dcs=None, ghost=False):
        if fid in self.factors:
            raise KeyError(f"duplicate factor {fid!r}")
        model = MODELS[kind]
        adjacency = tuple(adjacency)
        if len(adjacency) != len(model.slots):
            raise ValueError(f"{kind} takes {len(model.slots)} variables, got {len(adjacency)}")
        vs = [self.variables[v] for v in adjacency]
        for v, sp in zip(vs, model.slots):
            if v.space != sp:
                raise ValueError(f"{kind} expects {sp} for {v.id!r}, got {v.space}")
        if noise_lambda is None:
            noise_lambda = np.eye(model.res_dim)
        noise_lambda = np.asarray(noise_lambda, dtype=float)
        if not np.allclose(noise_lambda, noise_lambda.T) or np.min(np.linalg.eigvalsh(noise_lambda)) <= 0:
            raise ValueError("noise_lambda must be symmetric positive definite")
        st = self.stores.get(kind)
        if st is None:
            st = self.stores[kind] = _FactorStore(kind)
        row = st._append()
        a = st.a
        a["meas"][row] = measurement_params(kind, measurement) if model.meas_size else 0.0
        a["noise"][row] = noise_lambda
        a["owner"][row] = owner
        a["ghost"][row] = ghost
        if reg is not None:
            a["reg"][row] = reg.lambda_reg
            a["reg_up"][row] = reg.lambda_up
            a["reg_down"][row] = reg.lambda_down
            a["reg_eps"][row] = reg.eps_lambda
        if dcs is not None:
            a["phi"][row] = dcs.phi
        for s, v in enumerate(vs):
            a["rows"][row, s] = v.row
            a["euid"][row, s] = edge_uid(fid, v.id)
            a["vowner"][row, s] = v.owner
            est = v._st.a["est"][v.row]
            a[f"v2f_lin{s}"][row] = est
            a[f"f2v_lin{s}"][row] = est
            if v.frozen:
                a[f"v2f_eta{s}"][row] = v._st.a["frozen_eta"][v.row]
                a[f"v2f_lam{s}"][row] = v._st.a["frozen_lam"][v.row]
            self._edges[v.id].append((fid, kind, row, s))
        node = FactorNode(self, fid, kind, row, adjacency)
        st.nodes.append(node)
        self.factors[fid] = node
        return node

    # -- accessors ---------------------------------------------------------

    def estimate(self, vid):
        return self.variables[vid].estimate

    def estimates_array(self, ids):
        """Stacked parameter rows for variables of one space."""
        if not ids:
            return np.zeros((0, 0))
        v0 = self.variables[ids[0]]
        st = v0._st
        rows = np.fromiter((self.variables[i].row for i in ids), dtype=np.int64, count=len(ids))
        return st.a["est"][rows].copy()

    def neighbours(self, vid):
        return [self.factors[fid] for fid, *_ in self._edges[vid]]

    # -- GBP sweep ---------------------------------------------------------

    def _keep(self, a, idx, s, direction, dropout, cross_dropout, seed, cross_seed, comm):
        """Delivery mask for edges idx of slot s in one direction."""
        n = idx.size
        if n == 0:
            return np.zeros(0, bool)
        fown = a["owner"][idx]
        vown = a["vowner"][idx, s]
        cross = fown != vown
        p = np.where(cross, cross_dropout, dropout)
        if np.all(p <= 0.0) and comm is None:
            return np.ones(n, bool)
        uid = a["euid"][idx, s]
        u = edge_uniform(seed, self.iteration, uid, direction)
        if cross_seed != seed and cross.any():
            u = np.where(cross, edge_uniform(cross_seed, self.iteration, uid, direction), u)
        keep = u >= p
        if comm is not None:
            keep &= ~cross | comm[fown, vown]
        return keep

    def factor_phase(self, dropout=0.0, seed=0, cross_dropout=None, comm=None, cross_seed=None):
        """Every (non-ghost) factor linearises at its stored lin points and
        emits messages. Returns (sent, dropped, skipped, outgoing)."""
        cross_dropout = dropout if cross_dropout is None else cross_dropout
        cross_seed = seed if cross_seed is None else cross_seed
        sent = dropped = skipped = 0
        out = []
        for kind, st in self.stores.items():
            n = st.n
            if n == 0:
                continue
            a = st.a
            # a factor whose neighbours are all frozen has nobody to talk to
            live = ~a["ghost"][:n]
            retired = np.ones(n, bool)
            for s, sp in enumerate(st.model.slots):
                retired &= self.vars[sp].a["frozen"][a["rows"][:n, s]]
            idx = np.flatnonzero(live & ~retired)
            if idx.size == 0:
                continue
            pot_eta, pot_lam, valid = _linearize_rows(st, idx)
            full_eta = pot_eta.copy()
            full_lam = pot_lam.copy()
            for s in range(st.k):
                o, d = st.offsets[s], st.dims[s]
                full_eta[:, o:o + d] += a[f"v2f_eta{s}"][idx]
                full_lam[:, o:o + d, o:o + d] += a[f"v2f_lam{s}"][idx]
            for s in range(st.k):
                o, d = int(st.offsets[s]), st.dims[s]
                if st.k == 1:
                    eta, lam, ok = pot_eta, pot_lam, valid.copy()
                else:
                    eta, lam, ok = _kernels.schur_slot(pot_lam, pot_eta, full_lam, full_eta, o, d)
                    ok &= valid
                skipped += int(np.count_nonzero(~ok))
                vst = self.vars[st.model.slots[s]]
                vrows = a["rows"][idx, s]
                vghost = vst.a["ghost"][vrows]
                loc = ok & ~vghost
                li = idx[loc]
                keep = self._keep(a, li, s, F2V, dropout, cross_dropout, seed, cross_seed, comm)
                ki = li[keep]
                a[f"f2v_eta{s}"][ki] = eta[loc][keep]
                a[f"f2v_lam{s}"][ki] = lam[loc][keep]
                a[f"f2v_lin{s}"][ki] = a[f"v2f_lin{s}"][ki]
                sent += int(keep.sum())
                dropped += int(keep.size - keep.sum())
                if np.any(ok & vghost):
                    for j in np.flatnonzero(ok & vghost):
                        r = idx[j]
                        fnode = st.nodes[r]
                        out.append(GbpMessage(
                            fnode.id, fnode.adjacency[s], CanonicalGaussian(eta[j], lam[j]),
                            mf.from_params(st.model.slots[s], a[f"v2f_lin{s}"][r]),
                            self.iteration, F2V))
        return sent, dropped, skipped, out

    def _accumulate(self, vst, est):
        """Prior plus all inbox messages re-expressed at ``est``."""
        n = vst.n
        a = vst.a
        sp = vst.space
        eta = np.zeros((n, sp.dim))
        lam = np.zeros((n, sp.dim, sp.dim))
        hp = np.flatnonzero(a["has_prior"][:n])
        if hp.size:
            delta = sp.ominus(est[hp], a["prior_pt"][hp])
            eta[hp] -= (a["prior_lam"][hp] @ delta[..., None])[..., 0]
            lam[hp] += a["prior_lam"][hp]
        edges = []
        for st, s in self._incidence(sp.name):
            nf = st.n
            fa = st.a
            rows = fa["rows"][:nf, s]
            flam = fa[f"f2v_lam{s}"][:nf]
            delta = sp.ominus(est[rows], fa[f"f2v_lin{s}"][:nf])
            teta = fa[f"f2v_eta{s}"][:nf] - (flam @ delta[..., None])[..., 0]
            P = self._scatter(st, s, n)
            eta += P @ teta
            lam += (P @ flam.reshape(nf, -1)).reshape(lam.shape)
            edges.append((st, s, rows, teta, flam))
        return eta, lam, edges

    def _scatter(self, st, s, n):
        """Sparse (variables x edges) incidence used to sum messages per variable."""
        key = (id(st), s)
        hit = self._scatter_cache.get(key)
        if hit is not None and hit.shape == (n, st.n):
            return hit
        nf = st.n
        P = scipy.sparse.csr_matrix((np.ones(nf), (st.a["rows"][:nf, s], np.arange(nf))), shape=(n, nf))
        self._scatter_cache[key] = P
        return P

    def _incidence(self, space):
        return [(st, s) for st in self.stores.values() for s, sp in enumerate(st.model.slots)
                if sp == space and st.n]

    def variable_phase(self, dropout=0.0, seed=0, cross_dropout=None, comm=None, cross_seed=None):
        """Beliefs, estimate updates and variable-to-factor messages.
        Returns (sent, dropped, outgoing)."""
        cross_dropout = dropout if cross_dropout is None else cross_dropout
        cross_seed = seed if cross_seed is None else cross_seed
        sent = dropped = 0
        out = []
        for space, vst in self.vars.items():
            n = vst.n
            if n == 0:
                continue
            a = vst.a
            est = a["est"][:n]
            eta, lam, edges = self._accumulate(vst, est)
            act = np.flatnonzero(~a["frozen"][:n] & ~a["ghost"][:n])
            if act.size:
                mu, ok = _kernels.solve_pd(np.ascontiguousarray(lam[act]), np.ascontiguousarray(eta[act]))
                upd = act[ok]
                if upd.size:
                    est[upd] = vst.space.oplus(est[upd], mu[ok])
                    # re-express everything at the moved estimate; exact on
                    # vector spaces, first order on poses (x' (-) x_l ~ x (-) x_l + mu)
                    step = np.zeros_like(eta)
                    step[upd] = mu[ok]
                    eta -= (lam @ step[..., None])[..., 0]
                    edges = [(st, s, rows, teta - (flam @ step[rows][..., None])[..., 0], flam)
                             for st, s, rows, teta, flam in edges]
            fz = np.flatnonzero(a["frozen"][:n])
            eta[fz] = a["frozen_eta"][fz]
            lam[fz] = a["frozen_lam"][fz]
            a["belief_eta"][:n] = eta
            a["belief_lam"][:n] = lam
            frozen = a["frozen"][:n]
            vghost = a["ghost"][:n]
            for st, s, rows, teta, flam in edges:
                fa = st.a
                nf = st.n
                m_eta = eta[rows] - np.where(frozen[rows, None], 0.0, teta)
                m_lam = lam[rows] - np.where(frozen[rows, None, None], 0.0, flam)
                live = ~vghost[rows]
                fghost = fa["ghost"][:nf]
                loc = np.flatnonzero(live & ~fghost)
                keep = self._keep(fa, loc, s, V2F, dropout, cross_dropout, seed, cross_seed, comm)
                ki = loc[keep]
                fa[f"v2f_eta{s}"][ki] = m_eta[ki]
                fa[f"v2f_lam{s}"][ki] = m_lam[ki]
                fa[f"v2f_lin{s}"][ki] = est[rows[ki]]
                sent += int(keep.sum())
                dropped += int(keep.size - keep.sum())
                for j in np.flatnonzero(live & fghost):
                    fnode = st.nodes[j]
                    vid = fnode.adjacency[s]
                    out.append(GbpMessage(
                        vid, fnode.id, CanonicalGaussian(m_eta[j], m_lam[j]),
                        mf.from_params(space, est[rows[j]]), self.iteration, V2F))
        return sent, dropped, out

    def iterate(self, dropout=0.0, seed=0, cross_dropout=None, comm=None, cross_seed=None,
                energy=True):
        """One synchronous sweep: factor messages, then variable updates.

        ``dropout`` applies to messages between nodes of the same owner,
        ``cross_dropout`` (default: ``dropout``) to messages between owners,
        drawn with ``cross_seed`` (default: ``seed``). ``comm[a, b]``
        (optional boolean matrix) gates cross-owner delivery.
        """
        for p in (dropout, cross_dropout):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValueError("dropout must be in [0, 1]")
        s1, d1, skipped, _ = self.factor_phase(dropout, seed, cross_dropout, comm, cross_seed)
        s2, d2, _ = self.variable_phase(dropout, seed, cross_dropout, comm, cross_seed)
        self.iteration += 1
        e = total_energy(self) if energy else float("nan")
        return IterationReport(self.iteration, e, s1 + s2, d1 + d2, skipped)

    # -- delivery of remote messages ----------------------------------------

    def deliver(self, msg):
        """Store a message that arrived from another executor."""
        f = self.factors[msg.factor_id]
        s = f.slot(msg.variable_id)
        a = f._st.a
        tag = "f2v" if msg.direction == F2V else "v2f"
        a[f"{tag}_eta{s}"][f.row] = msg.gaussian.eta
        a[f"{tag}_lam{s}"][f.row] = msg.gaussian.lam
        a[f"{tag}_lin{s}"][f.row] = mf.to_params(msg.lin_point)
        if msg.direction == V2F:
            v = self.variables[msg.variable_id]
            if v.ghost:
                v._st.a["est"][v.row] = mf.to_params(msg.lin_point)

    # -- serialisation -----------------------------------------------------

    def snapshot(self):
        return _snapshot(self)

    def to_json(self, path=None):
        text = json.dumps(self.snapshot(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_snapshot(cls, snap):
        return _restore(cls(), snap)

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_snapshot(json.loads(text))


# ---------------------------------------------------------------------------
# batched linearisation shared by the engine and the baselines

def _linearize_rows(st, idx, lins=None, update_reg=True):
    """Factor potentials N^-1(eta, lam) over the stacked tangent space for rows idx.

    Applies DCS scaling and the adaptive regulariser (updating its state
    when ``update_reg``). Returns (eta [n,D], lam [n,D,D], valid [n]).
    """
    a = st.a
    if lins is None:
        lins = [a[f"v2f_lin{s}"][idx] for s in range(st.k)]
    res, J, valid = st.model.evaluate(lins, a["meas"][idx])
    res = np.where(valid[:, None], res, 0.0)
    J = np.where(valid[:, None, None], J, 0.0)
    noise = a["noise"][idx]
    E = (res[:, None, :] @ noise @ res[:, :, None])[:, 0, 0]
    phi = a["phi"][idx]
    rob = ~np.isnan(phi)
    if rob.any():
        scale = np.where(rob, np.minimum(1.0, 2.0 * phi / (np.where(rob, phi, 1.0) + E)), 1.0)
        noise = noise * (scale ** 2)[:, None, None]
    lamr = a["reg"][idx]
    if update_reg:
        ep = a["e_prev"][idx]
        upd = ~np.isnan(lamr) & ~np.isnan(ep) & valid
        rise = E - ep > a["reg_eps"][idx]
        lamr = np.where(upd, np.where(rise, lamr * a["reg_up"][idx], lamr / a["reg_down"][idx]), lamr)
        a["reg"][idx] = lamr
        a["e_prev"][idx[valid]] = E[valid]
    Jt = np.swapaxes(J, -1, -2)
    JtL = Jt @ noise
    lam = JtL @ J
    eta = -(JtL @ res[..., None])[..., 0]
    lam += np.nan_to_num(lamr)[:, None, None] * np.eye(st.D)
    return eta, lam, valid


def _factor_residuals(st, idx, lins):
    res, _, valid = st.model.evaluate(lins, st.a["meas"][idx], jac=False)
    return res, valid


# ---------------------------------------------------------------------------
# per-node API

def compute_belief(v):
    """Prior times every stored incoming message, at the current estimate."""
    g = v.graph
    st = v._st
    a = st.a
    if a["frozen"][v.row]:
        return CanonicalGaussian(a["frozen_eta"][v.row], a["frozen_lam"][v.row])
    est = a["est"][v.row]
    d = st.space.dim
    eta, lam = np.zeros(d), np.zeros((d, d))
    prior = v.prior
    if prior is not None:
        eta, lam = eta + prior.eta, lam + prior.lam
    for fid, kind, frow, s in g._edges[v.id]:
        fa = g.stores[kind].a
        flam = fa[f"f2v_lam{s}"][frow]
        delta = st.space.ominus(est[None], fa[f"f2v_lin{s}"][frow][None])[0]
        eta = eta + fa[f"f2v_eta{s}"][frow] - flam @ delta
        lam = lam + flam
    return CanonicalGaussian(eta, lam)


def _inbox_at_estimate(v, f):
    s = f.slot(v.id)
    fa = f._st.a
    flam = fa[f"f2v_lam{s}"][f.row]
    est = v._st.a["est"][v.row]
    delta = v._st.space.ominus(est[None], fa[f"f2v_lin{s}"][f.row][None])[0]
    return CanonicalGaussian(fa[f"f2v_eta{s}"][f.row] - flam @ delta, flam)


def variable_to_factor(v, f):
    """Belief divided by the factor's own last message; carries the estimate."""
    b = compute_belief(v)
    if not v.frozen:
        m = _inbox_at_estimate(v, f)
        b = CanonicalGaussian(b.eta - m.eta, b.lam - m.lam)
    return GbpMessage(v.id, f.id, b, v.estimate, v.graph.iteration, V2F)


def linearize_factor(f, lin_points=None):
    """Potential of f over the stacked tangent space at ``lin_points``.

    DCS and the regulariser are applied with the factor's current state
    (nothing is updated). Returns None when the model is singular there.
    """
    st = f._st
    if lin_points is None:
        lin_points = f.lin_points()
    lins = [mf.to_params(p)[None] for p in lin_points]
    eta, lam, valid = _linearize_rows(st, np.array([f.row]), lins, update_reg=False)
    if not valid[0]:
        return None
    return CanonicalGaussian(eta[0], lam[0])


def factor_to_variable(f, target):
    """Marginal of potential x incoming messages onto ``target``; None if skipped."""
    st = f._st
    pot = linearize_factor(f)
    if pot is None:
        return None
    s_t = f.slot(target)
    eta, lam = pot.eta.copy(), pot.lam.copy()
    for s in range(st.k):
        if s == s_t:
            continue
        o, d = st.offsets[s], st.dims[s]
        inc = f.incoming(s)
        eta[o:o + d] += inc.eta
        lam[o:o + d, o:o + d] += inc.lam
    o, d = st.offsets[s_t], st.dims[s_t]
    try:
        msg = marginalize(CanonicalGaussian(eta, lam), np.arange(o, o + d))
    except SingularMarginalization:
        return None
    lin = mf.from_params(st.model.slots[s_t], st.a[f"v2f_lin{s_t}"][f.row])
    return GbpMessage(f.id, target, msg, lin, f.graph.iteration, F2V)


def factor_energy(f, points=None):
    """Raw (unscaled) energy r^T Lambda r of one factor."""
    st = f._st
    if points is None:
        points = [f.graph.estimate(v) for v in f.adjacency]
    lins = [mf.to_params(p)[None] for p in points]
    res, valid = _factor_residuals(st, np.array([f.row]), lins)
    r = res[0]
    return float(r @ st.a["noise"][f.row] @ r)


def total_energy(graph, include_ghosts=False):
    """Sum of raw factor energies at the current estimates."""
    total = 0.0
    for st in graph.stores.values():
        n = st.n
        if n == 0:
            continue
        a = st.a
        idx = np.arange(n) if include_ghosts else np.flatnonzero(~a["ghost"][:n])
        if idx.size == 0:
            continue
        lins = []
        for s, sp in enumerate(st.model.slots):
            lins.append(graph.vars[sp].a["est"][a["rows"][idx, s]])
        res, valid = _factor_residuals(st, idx, lins)
        res = res[valid]
        noise = a["noise"][idx[valid]]
        total += float(np.sum((res[:, None, :] @ noise @ res[:, :, None])))
    return total


def iterate(graph, schedule="synchronous", dropout=0.0, rng_seed=0, **kw):
    if schedule != "synchronous":
        raise ValueError("only the synchronous schedule is implemented")
    return graph.iterate(dropout=dropout, seed=rng_seed, **kw)


# ---------------------------------------------------------------------------
# JSON snapshot
#
# {"iteration": int,
#  "variables": [{"id", "space", "owner", "ghost", "estimate": [...],
#                 "prior": {"lam", "anchor"} | null,
#                 "frozen": {"eta", "lam"} | null,
#                 "belief": {"eta", "lam"}}],
#  "factors":   [{"id", "kind", "owner", "ghost", "adjacency": [...],
#                 "measurement": [...], "noise_lambda": [[...]],
#                 "reg": {"lambda_reg", "lambda_up", "lambda_down", "eps_lambda"} | null,
#                 "dcs_phi": float | null, "energy_prev": float | null,
#                 "edges": [{"v2f": {"eta", "lam", "lin"}, "f2v": {...}}]}]}
#
# Variables appear in creation order, so a restored graph has the same rows.

def _f(x):
    return None if x is None or (isinstance(x, float) and np.isnan(x)) else x


def _snapshot(g):
    order = sorted(g.variables.values(), key=lambda v: (list(g.vars).index(v.space), v.row))
    variables = []
    for v in order:
        a = v._st.a
        r = v.row
        variables.append({
            "id": v.id, "space": v.space, "owner": v.owner, "ghost": v.ghost,
            "estimate": a["est"][r].tolist(),
            "prior": {"lam": a["prior_lam"][r].tolist(), "anchor": a["prior_pt"][r].tolist()}
            if a["has_prior"][r] else None,
            "frozen": {"eta": a["frozen_eta"][r].tolist(), "lam": a["frozen_lam"][r].tolist()}
            if a["frozen"][r] else None,
            "belief": {"eta": a["belief_eta"][r].tolist(), "lam": a["belief_lam"][r].tolist()},
        })
    factors = []
    for kind, st in g.stores.items():
        a = st.a
        for f in st.nodes:
            r = f.row
            reg = f.reg_state
            edges = []
            for s in range(st.k):
                edges.append({tag: {"eta": a[f"{tag}_eta{s}"][r].tolist(),
                                    "lam": a[f"{tag}_lam{s}"][r].tolist(),
                                    "lin": a[f"{tag}_lin{s}"][r].tolist()}
                              for tag in ("v2f", "f2v")})
            factors.append({
                "id": f.id, "kind": kind, "owner": f.owner, "ghost": f.ghost,
                "adjacency": list(f.adjacency),
                "measurement": a["meas"][r].tolist(),
                "noise_lambda": a["noise"][r].tolist(),
                "reg": None if reg is None else {
                    "lambda_reg": reg.lambda_reg, "lambda_up": reg.lambda_up,
                    "lambda_down": reg.lambda_down, "eps_lambda": reg.eps_lambda},
                "dcs_phi": _f(float(a["phi"][r])),
                "energy_prev": f.energy_prev,
                "edges": edges,
            })
    return {"iteration": g.iteration, "variables": variables, "factors": factors}


def _restore(g, snap):
    g.iteration = snap["iteration"]
    for v in snap["variables"]:
        node = g.add_variable(v["id"], mf.from_params(v["space"], v["estimate"]),
                              owner=v["owner"], ghost=v["ghost"])
        a = node._st.a
        if v["prior"] is not None:
            g.set_prior(v["id"], np.array(v["prior"]["lam"]), mf.from_params(v["space"], v["prior"]["anchor"]))
        if v["frozen"] is not None:
            a["frozen"][node.row] = True
            a["frozen_eta"][node.row] = v["frozen"]["eta"]
            a["frozen_lam"][node.row] = v["frozen"]["lam"]
        a["belief_eta"][node.row] = v["belief"]["eta"]
        a["belief_lam"][node.row] = v["belief"]["lam"]
    for f in snap["factors"]:
        kind = f["kind"]
        model = MODELS[kind]
        meas = measurement_point(kind, np.array(f["measurement"])) if model.meas_size else None
        reg = None if f["reg"] is None else AdaptiveReg(**f["reg"])
        dcs = None if f["dcs_phi"] is None else DcsConfig(f["dcs_phi"])
        node = g.add_factor(f["id"], kind, f["adjacency"], meas, np.array(f["noise_lambda"]),
                            owner=f["owner"], reg=reg, dcs=dcs, ghost=f["ghost"])
        a = node._st.a
        a["meas"][node.row] = f["measurement"]
        if f["energy_prev"] is not None:
            a["e_prev"][node.row] = f["energy_prev"]
        for s, e in enumerate(f["edges"]):
            for tag in ("v2f", "f2v"):
                a[f"{tag}_eta{s}"][node.row] = e[tag]["eta"]
                a[f"{tag}_lam{s}"][node.row] = e[tag]["lam"]
                a[f"{tag}_lin{s}"][node.row] = e[tag]["lin"]
    return g
