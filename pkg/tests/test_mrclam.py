import math

import numpy as np
import pytest
from conftest import write_mrclam

from gbpcal import lie
from gbpcal import mrclam as mc


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return mc.load_mrclam(write_mrclam(tmp_path_factory.mktemp("mrclam"), duration=40.0))


def write_tiny(root, measurements="# Time Barcode range bearing\n"):
    root.mkdir(parents=True, exist_ok=True)
    (root / "Barcodes.dat").write_text("1 13\n2 23\n3 33\n")
    (root / "Landmark_Groundtruth.dat").write_text("3 1.0 2.0 0.001 0.001\n")
    for i in (1, 2):
        (root / f"Robot{i}_Groundtruth.dat").write_text(
            "# Time x y theta\n0.0 0.0 0.0 0.0\n1.0 1.0 0.0 0.0\n2.0 2.0 0.5 1.0\n3.0 3.0 0.5 1.0\n")
        (root / f"Robot{i}_Odometry.dat").write_text("0.0 1.0 0.0\n1.0 1.0 0.0\n2.0 0.0 0.0\n")
        (root / f"Robot{i}_Measurement.dat").write_text(measurements)
    return root


def test_known_rows_parse_exactly(tmp_path):
    d = mc.load_mrclam(write_tiny(tmp_path / "d"))
    assert d.robots == [1, 2]
    assert d.n_keyframes == 3
    np.testing.assert_array_equal(d.times, [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(d.groundtruth[0], [[0, 0, 0], [1, 0, 0], [2, 0.5, 1.0]])
    assert d.landmarks == {3: (1.0, 2.0)}
    assert d.barcodes == {13: 1, 23: 2, 33: 3}
    np.testing.assert_allclose(d.odometry[0], [[1, 0, 0], [1, 0, 0]], atol=1e-12)
    assert d.observations == []


def test_measurements_snap_to_nearest_keyframe(tmp_path):
    rows = "0.9 33 2.0 0.1\n1.1 23 1.0 -0.1\n1.2 33 2.5 0.2\n1.3 99 1.0 0.0\n1.4 13 1.0 0.0\n"
    d = mc.load_mrclam(write_tiny(tmp_path / "d", rows))
    ob = [o for o in d.observations if o[1] == 0]
    # robot 1 sees landmark 3 twice near t=1 (closest kept) and robot 2 once;
    # an unknown barcode and a self-sighting are dropped
    assert [o[:3] for o in ob] == [(1, 0, 2), (1, 0, 3)]
    np.testing.assert_allclose([o[3:] for o in ob], [[1.0, -0.1], [2.0, 0.1]], atol=1e-12)
    assert d.skipped_measurements == 2 * 3


def test_fixture_keyframe_count(tmp_path):
    d = mc.load_mrclam(write_mrclam(tmp_path / "d", duration=10.0, n_robots=2))
    assert d.n_keyframes == 10
    assert d.odometry.shape == (2, 9, 3)


def test_parse_error_names_line(tmp_path):
    root = write_tiny(tmp_path / "d")
    (root / "Robot2_Odometry.dat").write_text("# header\n0.0 1.0 0.0\n1.0 oops 0.0\n")
    with pytest.raises(mc.MrClamParseError, match=r"Robot2_Odometry\.dat:3"):
        mc.load_mrclam(root)
    (root / "Robot2_Odometry.dat").write_text("0.0 1.0 0.0\n0.0 1.0 0.0\n")
    with pytest.raises(mc.MrClamParseError, match="not increasing"):
        mc.load_mrclam(root)
    with pytest.raises(mc.MrClamParseError):
        mc.load_mrclam(tmp_path / "missing")


def test_integrated_odometry_is_an_exact_arc():
    v, w = 0.5, 0.4
    odo = np.array([[0.0, v, w], [0.3, v, w], [0.7, v, w]])
    inc = mc.integrate_odometry(odo, np.array([0.0, 2.0]))
    np.testing.assert_allclose(inc[0], lie.se2_exp(np.array([[2 * v, 0.0, 2 * w]]))[0], atol=1e-12)


def test_run_is_deterministic(dataset):
    cfg = mc.MrClamConfig(iterations=3)
    a = mc.run_mrclam(dataset, 10, cfg=cfg, max_keyframes=12)
    b = mc.run_mrclam(dataset, 10, cfg=cfg, max_keyframes=12)
    assert a == b
    assert a.motion == 11


def test_window_longer_than_run_changes_nothing(dataset):
    cfg = mc.MrClamConfig(iterations=3)
    a = mc.MrClamRun(dataset, window=None, cfg=cfg)
    b = mc.MrClamRun(dataset, window=dataset.n_keyframes + 5, cfg=cfg)
    a.run(15)
    b.run(15)
    np.testing.assert_array_equal(a.poses(), b.poses())


def test_retired_keyframes_are_bit_stable(dataset):
    run = mc.MrClamRun(dataset, window=4, cfg=mc.MrClamConfig(iterations=3))
    for _ in range(8):
        run.advance()
        for _ in range(3):
            run.iterate()
        run.retire()
    frozen = run.poses()[:, :3].copy()
    for _ in range(6):
        run.advance()
        for _ in range(3):
            run.iterate()
        run.retire()
    np.testing.assert_array_equal(run.poses()[:, :3], frozen)
    with pytest.raises(ValueError):
        mc.MrClamRun(dataset, window=1)


def test_auto_calibration_helps_with_wrong_extrinsics(dataset):
    cfg = mc.MrClamConfig(iterations=10)
    noise = (0.2, 15.0)
    auto = mc.run_mrclam(dataset, 30, noise, True, cfg)
    fixed = mc.run_mrclam(dataset, 30, noise, False, cfg)
    assert auto.ate_twb_m <= fixed.ate_twb_m
    assert math.isfinite(auto.ate_tbs_m)
