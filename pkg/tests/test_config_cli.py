import csv
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbpcal import cli
from gbpcal import config as cfgmod

TINY = """\
[experiment]
scenario = {scenario}
seeds = 0, 1
n_robots = 3
n_motions = 2
iterations_per_motion = 2
batch_iterations = 3
lm_iterations = 3
"""


def write_cfg(tmp_path, scenario="table1", extra=""):
    p = tmp_path / f"{scenario}.ini"
    p.write_text(TINY.format(scenario=scenario) + extra)
    return p


def test_preset_is_applied():
    c = cfgmod.loads("[experiment]\nscenario = dsolver_compare\n")
    assert c.solvers == ("gbp", "gs", "sor", "lm")
    assert c.mode == "batch" and c.dcs_phi is None
    assert cfgmod.loads("[experiment]\nscenario = outlier_sweep\n").dcs_phi == 10.0


@settings(max_examples=60, deadline=None)
@given(scenario=st.sampled_from(cfgmod.SCENARIOS),
       seeds=st.lists(st.integers(0, 999), min_size=1, max_size=4),
       drop=st.floats(0, 1), rng=st.floats(0, 50) | st.just(math.inf),
       phi=st.none() | st.floats(0.1, 100), outl=st.floats(0, 1),
       bearing=st.floats(0, 20), solvers=st.lists(st.sampled_from(cfgmod.SOLVERS), min_size=1, max_size=3))
def test_round_trip(scenario, seeds, drop, rng, phi, outl, bearing, solvers):
    text = (f"[experiment]\nscenario = {scenario}\nseeds = {', '.join(map(str, seeds))}\n"
            f"dcs_phi = {'none' if phi is None else repr(phi)}\nsolvers = {', '.join(solvers)}\n"
            f"[noise]\noutlier_frac = {outl!r}\nrb_bearing_sigma_deg = {bearing!r}\n"
            f"[channel]\ndrop_prob = {drop!r}\ncomm_range = {rng!r}\n")
    c = cfgmod.loads(text)
    assert c.noise.rb_sigma[1] == bearing and c.channel.comm_range == rng
    assert cfgmod.loads(cfgmod.dumps(c)) == c


@pytest.mark.parametrize("text, key", [
    ("[experiment]\nscenario = nope\n", "experiment.scenario"),
    ("[experiment]\nbogus = 1\n", "experiment.bogus"),
    ("[wat]\n", "wat"),
    ("[experiment]\nseeds = a\n", "experiment.seeds"),
    ("[channel]\ndrop_prob = 2\n", "channel"),
    ("[sweep]\naxis = speed\nvalues = 1\n", "sweep.axis"),
    ("[mrclam]\nwindow = 1\n", "mrclam.window"),
    ("[experiment]\nsolvers = gbp, magic\n", "experiment.solvers"),
])
def test_invalid_config_names_key(text, key):
    with pytest.raises(cfgmod.ConfigError) as ei:
        cfgmod.loads(text)
    assert ei.value.key == key


def test_cli_unknown_scenario_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[experiment]\nscenario = nope\n")
    assert cli.main(["run", str(p)]) == 2
    assert "experiment.scenario" in capsys.readouterr().err
    assert cli.main(["defaults", "nope"]) == 2
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == 2


def test_cli_defaults_prints_loadable_config(capsys):
    assert cli.main(["defaults", "range_sweep"]) == 0
    c = cfgmod.loads(capsys.readouterr().out)
    assert c.scenario == "range_sweep" and c.sweep_axis == "comm_range"


def test_run_is_byte_identical_on_rerun(tmp_path):
    p = write_cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(p), "--output", str(a)]) == 0
    assert cli.main(["run", str(p), "--output", str(b)]) == 0
    for name in ("table1.csv", "table1_summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = list(csv.DictReader(open(a / "table1.csv")))
    # gbp and gbp_fixed log every iteration of every motion; lm one row per iteration
    per_seed = {s: sum(r["seed"] == str(s) for r in rows) for s in (0, 1)}
    assert all(n >= 2 * 2 * 2 for n in per_seed.values())
    assert {r["solver"] for r in rows} == {"gbp", "gbp_fixed", "lm"}


def test_sweep_row_count_and_env_override(tmp_path, monkeypatch):
    p = write_cfg(tmp_path, "range_sweep")
    out = tmp_path / "env_out"
    monkeypatch.setenv(cli.OUTPUT_ENV, str(out))
    assert cli.main(["sweep", str(p), "--axis", "dropout", "--values", "0", "0.5", "1"]) == 0
    path = out / "range_sweep_sweep_dropout.csv"
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 * 3 * 2 * 2            # seeds x values x motions x iterations
    assert {r["value"] for r in rows} == {"0", "0.5", "1"}
    assert {r["axis"] for r in rows} == {"dropout"}


def test_sweep_rejects_bad_values(tmp_path):
    p = write_cfg(tmp_path, "range_sweep")
    assert cli.main(["sweep", str(p), "--axis", "dropout", "--values", "x",
                     "--output", str(tmp_path)]) == 2
    assert cli.main(["sweep", str(p), "--axis", "dropout", "--values", "1.5",
                     "--output", str(tmp_path)]) == 2
    assert cli.main(["sweep", str(p), "--axis", "comm_range", "--values", "-1",
                     "--output", str(tmp_path)]) == 2


def test_plot_output(tmp_path):
    pytest.importorskip("matplotlib")
    p = write_cfg(tmp_path, "dsolver_compare")
    assert cli.main(["run", str(p), "--output", str(tmp_path), "--plot"]) == 0
    png = tmp_path / "dsolver_compare.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_mrclam_verb_on_fixture(tmp_path):
    from conftest import write_mrclam
    write_mrclam(tmp_path / "data" / "D1", n_robots=2, duration=6.0)
    p = tmp_path / "m.ini"
    p.write_text("[experiment]\nscenario = mrclam\nseeds = 0\n"
                 f"[mrclam]\npath = {tmp_path / 'data'}\ndatasets = D1\niterations = 2\n")
    assert cli.main(["mrclam", str(p), "--output", str(tmp_path / "o")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "mrclam.csv")))
    assert [(r["value"], r["solver"]) for r in rows] == [("D1", "gbp"), ("D1", "gbp_fixed")]


def test_mrclam_missing_data_exits_2(tmp_path, capsys):
    p = tmp_path / "m.ini"
    p.write_text(f"[experiment]\nscenario = mrclam\n[mrclam]\npath = {tmp_path / 'none'}\n")
    assert cli.main(["mrclam", str(p)]) == 2
    assert "mrclam.path" in capsys.readouterr().err
