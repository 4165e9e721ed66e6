"""Scenario execution shared by the CLI and the acceptance suite."""

import itertools
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import solve_block_gs, solve_lm
from .distsim import SimConfig, Simulation, generate_world
from .metrics import CSV_COLUMNS
from .mrclam import MrClamConfig, load_mrclam, run_mrclam

SUMMARY_METRICS = ("ate_twb_m", "are_twb_deg", "ate_tbs_m", "are_tbs_deg", "ate_tbm_m")


def sim_config(exp, seed, axis=None, value=None):
    """SimConfig for one seed of an ExperimentConfig, with an optional sweep override."""
    noise, channel = exp.noise, exp.channel
    if axis == "dropout":
        channel = replace(channel, drop_prob=float(value))
    elif axis == "comm_range":
        channel = replace(channel, comm_range=float(value))
    elif axis == "outlier_frac":
        noise = replace(noise, outlier_frac=float(value))
    elif axis is not None:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return SimConfig(n_robots=exp.n_robots, n_motions=exp.n_motions,
                     iterations=exp.iterations_per_motion, seed=int(seed), noise=noise,
                     channel=channel, internal_dropout=exp.internal_dropout, dcs_phi=exp.dcs_phi,
                     incremental=exp.mode == "incremental", batch_iterations=exp.batch_iterations)


def world_for(cfg):
    return generate_world(cfg.n_robots, cfg.n_motions, cfg.noise, cfg.seed, cfg.fov_deg,
                          cfg.max_observed, cfg.world_size, cfg.outlier_max_range,
                          cfg.truth_calib_trans, cfg.truth_calib_rot_deg)


def solver_records(cfg, solver, world=None, energy=True, max_iters=None, sor_omega=1.5,
                   distributed=False):
    """Per-iteration MetricsRecords of one solver on one seeded scenario.

    GBP runs the configured schedule (incremental or whole graph). The
    reference solvers always get the whole graph from the dead-reckoned
    initial guess; their energy column is the solver objective, which
    includes variable priors.
    """
    if solver in ("gbp", "gbp_fixed"):
        c = cfg if solver == "gbp" else replace(cfg, auto_calib=False)
        return list(Simulation(c, world, distributed=distributed).run(energy=energy))
    sim = Simulation(cfg, world)
    sim.build_all()
    T = sim.world.n_steps
    counter = itertools.count(1)

    def cb(_):
        return sim.metrics(T, next(counter), energy=False)

    robust = cfg.dcs_phi is not None
    if solver == "lm":
        rep = solve_lm(sim.central_graph, max_iters=max_iters or 50, robust=robust, callback=cb)
    elif solver == "gs":
        rep = solve_block_gs(sim.central_graph, max_sweeps=max_iters or cfg.batch_iterations,
                             robust=robust, callback=cb)
    elif solver == "sor":
        rep = solve_block_gs(sim.central_graph, max_sweeps=max_iters or cfg.batch_iterations,
                             omega=sor_omega, robust=robust, callback=cb)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return [replace(r, energy=e if energy else float("nan")) for r, e in zip(rep.metrics, rep.energy)]


def summarize(groups):
    """{label: [final MetricsRecord per seed]} -> {label: {metric: {mean, std}}}."""
    out = {}
    for label, finals in groups.items():
        entry = {"n_seeds": len(finals)}
        for m in SUMMARY_METRICS:
            v = np.array([getattr(r, m) for r in finals], dtype=float)
            v = v[~np.isnan(v)]
            entry[m] = {"mean": float(v.mean()) if v.size else None,
                        "std": float(v.std()) if v.size else None}
        out[label] = entry
    return out


def _label(solver, axis, value):
    return solver if axis is None else f"{solver}@{axis}={_fmt_value(value)}"


def _fmt_value(v):
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isinf(v):
        return "inf"
    return repr(int(v)) if v.is_integer() else repr(v)


def run_experiment(exp, axis=None, values=None, progress=None):
    """Execute a simulated scenario.

    Returns (columns, rows, summary). Rows are dicts; sweep rows are prefixed
    with ``axis`` and ``value``. ``progress(label, seed, final)`` is called
    after every run.
    """
    if axis is None and exp.sweep_axis is not None:
        axis, values = exp.sweep_axis, exp.sweep_values
    points = [None] if axis is None else list(values)
    columns = (("axis", "value") if axis is not None else ()) + ("solver",) + CSV_COLUMNS
    rows, finals = [], {}
    for value in points:
        for seed in exp.seeds:
            cfg = sim_config(exp, seed, axis, value)
            world = world_for(cfg)
            for solver in exp.solvers:
                recs = solver_records(cfg, solver, world, exp.record_energy,
                                      exp.lm_iterations if solver == "lm" else None,
                                      exp.sor_omega, exp.distributed)
                prefix = {"axis": axis, "value": _fmt_value(value)} if axis is not None else {}
                rows.extend({**prefix, "solver": solver, **r.as_row()} for r in recs)
                label = _label(solver, axis, value)
                fin = recs[-1]
                finals.setdefault(label, []).append(fin)
                if progress is not None:
                    progress(label, seed, fin)
    return columns, rows, summarize(finals)


def run_mrclam_experiment(exp, progress=None):
    """Sliding-window runs over every configured MR.CLAM dataset directory."""
    m = exp.mrclam
    columns = ("axis", "value", "solver") + CSV_COLUMNS
    rows, finals = [], {}
    for name in m.datasets:
        data = load_mrclam(Path(m.path) / name, m.subsample_dt)
        for seed in exp.seeds:
            mc = MrClamConfig(iterations=m.iterations, dropout=exp.internal_dropout, seed=int(seed))
            for solver in exp.solvers:
                if solver not in ("gbp", "gbp_fixed"):
                    raise ValueError(f"solver {solver!r} is not available for MR.CLAM")
                rec = run_mrclam(data, m.window, m.calib_noise, solver == "gbp", mc)
                rows.append({"axis": "dataset", "value": name, "solver": solver, **rec.as_row()})
                for label in (f"{solver}@dataset={name}", solver):
                    finals.setdefault(label, []).append(rec)
                if progress is not None:
                    progress(f"{solver}@dataset={name}", seed, rec)
    return columns, rows, summarize(finals)
