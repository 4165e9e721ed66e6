"""Experiment configuration files.

A config is an INI file. Every key is optional; a missing key takes the
scenario's preset, so ``[experiment]\\nscenario = table1`` alone reproduces
the published protocol. ``dumps`` writes every resolved key, which makes
``loads(dumps(cfg)) == cfg``.

    [experiment]  scenario, seeds, n_robots, n_motions, iterations_per_motion,
                  batch_iterations, mode, solvers, distributed, dcs_phi,
                  internal_dropout, sor_omega, lm_iterations, record_energy, output
    [noise]       fields of NoiseConfig (angles in degrees)
    [channel]     drop_prob, comm_range, rng_seed
    [sweep]       axis, values
    [mrclam]      path, datasets, subsample_dt, window, calib_noise, iterations
"""

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace

from .distsim import ChannelModel, NoiseConfig

SCENARIOS = ("table1", "dsolver_compare", "dropout_sweep", "outlier_sweep", "range_sweep", "mrclam")
SOLVERS = ("gbp", "gbp_fixed", "lm", "gs", "sor")
AXES = ("dropout", "outlier_frac", "comm_range")
MODES = ("incremental", "batch")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, msg):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class MrClamSection:
    path: str = "data/mrclam"
    datasets: tuple = ("MRCLAM_Dataset1", "MRCLAM_Dataset2", "MRCLAM_Dataset3", "MRCLAM_Dataset4")
    subsample_dt: float = 1.0
    window: int = 30
    calib_noise: tuple = None          # (metres, degrees) or None
    iterations: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "table1"
    seeds: tuple = tuple(range(10))
    n_robots: int = 16
    n_motions: int = 50
    iterations_per_motion: int = 30
    batch_iterations: int = 200
    mode: str = "incremental"
    solvers: tuple = ("gbp",)
    distributed: bool = False
    dcs_phi: float = 10.0              # None disables the robust kernel
    internal_dropout: float = 0.3
    sor_omega: float = 1.5
    lm_iterations: int = 50
    record_energy: bool = True
    output: str = "results"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    channel: ChannelModel = field(default_factory=ChannelModel)
    sweep_axis: str = None
    sweep_values: tuple = ()
    mrclam: MrClamSection = field(default_factory=MrClamSection)


PRESETS = {
    "table1": dict(solvers=("gbp", "gbp_fixed", "lm"), dcs_phi=None),
    "dsolver_compare": dict(solvers=("gbp", "gs", "sor", "lm"), mode="batch", n_motions=10,
                            batch_iterations=100, dcs_phi=None),
    "dropout_sweep": dict(mode="batch", batch_iterations=300, dcs_phi=None,
                          sweep_axis="dropout", sweep_values=(0.0, 0.5, 0.8, 1.0)),
    "outlier_sweep": dict(sweep_axis="outlier_frac", sweep_values=(0.0, 0.1, 0.2, 0.3, 0.4)),
    "range_sweep": dict(sweep_axis="comm_range",
                        sweep_values=(0.0, 4.0, 6.0, 8.0, 10.0, 20.0, math.inf)),
    "mrclam": dict(solvers=("gbp", "gbp_fixed")),
}


# -- value codecs -------------------------------------------------------------

def _float(key, s):
    try:
        return float(s)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {s!r}") from None


def _int(key, s):
    try:
        return int(s)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {s!r}") from None


def _bool(key, s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {s!r}")


def _optional(parse):
    def f(key, s):
        return None if s.strip().lower() in ("none", "off", "") else parse(key, s)
    return f


def _list(parse):
    def f(key, s):
        items = [p for p in s.replace(",", " ").split() if p]
        return tuple(parse(key, p) for p in items)
    return f


def _str(key, s):
    return s.strip()


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


_EXPERIMENT_KEYS = {
    "scenario": _str, "seeds": _list(_int), "n_robots": _int, "n_motions": _int,
    "iterations_per_motion": _int, "batch_iterations": _int, "mode": _str,
    "solvers": _list(_str), "distributed": _bool, "dcs_phi": _optional(_float),
    "internal_dropout": _float, "sor_omega": _float, "lm_iterations": _int,
    "record_energy": _bool, "output": _str,
}
# [noise] keys map onto NoiseConfig; tuples are split into named scalars
_NOISE_KEYS = {
    "odom_trans_sigma": ("odom_trans_sigma", None),
    "odom_rot_sigma_deg": ("odom_rot_sigma", None),
    "rb_range_sigma": ("rb_sigma", 0), "rb_bearing_sigma_deg": ("rb_sigma", 1),
    "init_trans_sigma": ("init_pose_sigma", 0), "init_rot_sigma_deg": ("init_pose_sigma", 1),
    "calib_sensor_trans_sigma": ("calib_sigma", 0), "calib_marker_trans_sigma": ("calib_sigma", 1),
    "calib_sensor_rot_sigma_deg": ("calib_sigma", 2),
    "outlier_frac": ("outlier_frac", None),
}
_CHANNEL_KEYS = {"drop_prob": _float, "comm_range": _float, "rng_seed": _optional(_int)}
_MRCLAM_KEYS = {
    "path": _str, "datasets": _list(_str), "subsample_dt": _float, "window": _int,
    "calib_noise": _optional(lambda k, s: _list(_float)(k, s)), "iterations": _int,
}


def _validate(cfg):
    if cfg.scenario not in SCENARIOS:
        raise ConfigError("experiment.scenario", f"unknown scenario {cfg.scenario!r} (one of {', '.join(SCENARIOS)})")
    if not cfg.seeds:
        raise ConfigError("experiment.seeds", "at least one seed is required")
    if cfg.mode not in MODES:
        raise ConfigError("experiment.mode", f"expected one of {', '.join(MODES)}")
    for s in cfg.solvers:
        if s not in SOLVERS:
            raise ConfigError("experiment.solvers", f"unknown solver {s!r} (one of {', '.join(SOLVERS)})")
    if not cfg.solvers:
        raise ConfigError("experiment.solvers", "at least one solver is required")
    for key in ("n_robots", "n_motions", "iterations_per_motion", "batch_iterations", "lm_iterations"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"experiment.{key}", "must be >= 1")
    if not 0.0 <= cfg.internal_dropout < 1.0:
        raise ConfigError("experiment.internal_dropout", "must be in [0, 1)")
    if not 0.0 < cfg.sor_omega <= 2.0:
        raise ConfigError("experiment.sor_omega", "must be in (0, 2]")
    if cfg.dcs_phi is not None and cfg.dcs_phi <= 0:
        raise ConfigError("experiment.dcs_phi", "must be positive or none")
    if cfg.sweep_axis is not None and cfg.sweep_axis not in AXES:
        raise ConfigError("sweep.axis", f"unknown axis {cfg.sweep_axis!r} (one of {', '.join(AXES)})")
    if cfg.sweep_axis is not None and not cfg.sweep_values:
        raise ConfigError("sweep.values", "at least one value is required")
    if cfg.sweep_axis is not None and cfg.sweep_values:
        lo, hi = (0.0, math.inf) if cfg.sweep_axis == "comm_range" else (0.0, 1.0)
        bad = [v for v in cfg.sweep_values if not lo <= v <= hi]
        if bad:
            raise ConfigError("sweep.values", f"{cfg.sweep_axis} values must be in [{lo}, {hi}], got {bad[0]}")
    m = cfg.mrclam
    if m.window < 2:
        raise ConfigError("mrclam.window", "must be >= 2")
    if m.subsample_dt <= 0:
        raise ConfigError("mrclam.subsample_dt", "must be positive")
    if m.calib_noise is not None and len(m.calib_noise) != 2:
        raise ConfigError("mrclam.calib_noise", "expected 'metres, degrees' or none")
    return cfg


def _section(cp, name, known):
    if not cp.has_section(name):
        return {}
    items = dict(cp.items(name))
    for k in items:
        if k not in known:
            raise ConfigError(f"{name}.{k}", "unknown key")
    return items


def loads(text):
    """Parse INI text into a validated ExperimentConfig."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    for sec in cp.sections():
        if sec not in ("experiment", "noise", "channel", "sweep", "mrclam"):
            raise ConfigError(sec, "unknown section")
    exp = _section(cp, "experiment", _EXPERIMENT_KEYS)
    scenario = exp.get("scenario", ExperimentConfig.scenario).strip()
    if scenario not in SCENARIOS:
        raise ConfigError("experiment.scenario", f"unknown scenario {scenario!r} (one of {', '.join(SCENARIOS)})")
    kw = dict(PRESETS[scenario])
    for k, s in exp.items():
        kw[k] = _EXPERIMENT_KEYS[k](f"experiment.{k}", s)

    noise = NoiseConfig()
    vals = {f.name: getattr(noise, f.name) for f in fields(NoiseConfig)}
    for k, s in _section(cp, "noise", _NOISE_KEYS).items():
        target, slot = _NOISE_KEYS[k]
        v = _float(f"noise.{k}", s)
        if slot is None:
            vals[target] = v
        else:
            t = list(vals[target])
            t[slot] = v
            vals[target] = tuple(t)
    try:
        kw["noise"] = NoiseConfig(**vals)
    except ValueError as exc:
        raise ConfigError("noise", str(exc)) from None

    ch = {k: p(f"channel.{k}", s) for k, s in _section(cp, "channel", _CHANNEL_KEYS).items()
          for p in [_CHANNEL_KEYS[k]]}
    try:
        kw["channel"] = ChannelModel(**ch)
    except ValueError as exc:
        raise ConfigError("channel", str(exc)) from None

    sw = _section(cp, "sweep", {"axis": None, "values": None})
    if "axis" in sw:
        kw["sweep_axis"] = _optional(_str)("sweep.axis", sw["axis"])
    if "values" in sw:
        kw["sweep_values"] = _list(_float)("sweep.values", sw["values"])

    mr = {k: _MRCLAM_KEYS[k](f"mrclam.{k}", s) for k, s in _section(cp, "mrclam", _MRCLAM_KEYS).items()}
    kw["mrclam"] = MrClamSection(**mr)
    return _validate(ExperimentConfig(**kw))


def load(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("file", f"cannot read {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg):
    """Fully resolved INI text for ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["experiment"] = {k: _fmt(getattr(cfg, k)) for k in _EXPERIMENT_KEYS}
    cp["noise"] = {k: _fmt(getattr(cfg.noise, t) if s is None else getattr(cfg.noise, t)[s])
                   for k, (t, s) in _NOISE_KEYS.items()}
    cp["channel"] = {k: _fmt(getattr(cfg.channel, k)) for k in _CHANNEL_KEYS}
    cp["sweep"] = {"axis": _fmt(cfg.sweep_axis), "values": _fmt(tuple(float(v) for v in cfg.sweep_values))}
    cp["mrclam"] = {k: _fmt(getattr(cfg.mrclam, k)) for k in _MRCLAM_KEYS}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def with_sweep(cfg, axis, values):
    return _validate(replace(cfg, sweep_axis=axis, sweep_values=tuple(float(v) for v in values)))
