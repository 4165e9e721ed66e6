import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbpcal import factors as fc
from gbpcal import manifold as mf
from gbpcal.gaussian import CanonicalGaussian, is_positive_definite

N_RANDOM = 100


def rand_se3(rng, t_scale=3.0, r_scale=1.0):
    return mf.exp("SE3", np.concatenate([rng.normal(size=3) * t_scale, rng.normal(size=3) * r_scale]))


def rand_se2(rng):
    return mf.se2(*rng.normal(size=2) * 3, rng.uniform(-3, 3))


def stacked_numeric_jacobian(kind, points, meas=None):
    """Central differences of the model residual w.r.t. each variable in turn."""
    blocks = []
    for i, x in enumerate(points):
        def f(xi, i=i):
            pts = list(points)
            pts[i] = xi
            return fc.evaluate(kind, pts, meas)[0]
        blocks.append(mf.numerical_jacobian(f, x, eps=1e-6))
    return np.concatenate(blocks, axis=1)


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1.0)


def rb_instance(rng):
    T = rand_se3(rng)
    # keep the marker a few metres away and off the poles
    d = rng.normal(size=3)
    d[2] *= 0.3
    m = mf.rn(T.data[:3] + T.rotation @ (d / np.linalg.norm(d) * rng.uniform(1, 8)))
    z = fc.range_bearing_point(rng.uniform(1, 8), rng.uniform(-3, 3), rng.uniform(-1, 1))
    return [T, m], z


def odo_instance(rng):
    return [rand_se3(rng), rand_se3(rng)], rand_se3(rng, 1.0, 0.5)


def calib_instance(rng):
    return [rand_se3(rng), rand_se3(rng), rand_se3(rng, 0.3, 0.5)], None


def marker_instance(rng):
    return [mf.rn(rng.normal(size=3)), rand_se3(rng), mf.rn(rng.normal(size=3) * 0.3)], None


def rb2_instance(rng):
    S = rand_se2(rng)
    a = rng.uniform(-3, 3)
    m = mf.rn(S.data[:2] + rng.uniform(1, 8) * np.array([np.cos(a), np.sin(a)]))
    return [S, m], fc.range_bearing_point(rng.uniform(1, 8), rng.uniform(-3, 3))


def odo2_instance(rng):
    return [rand_se2(rng), rand_se2(rng)], rand_se2(rng)


def calib2_instance(rng):
    return [rand_se2(rng), rand_se2(rng), rand_se2(rng)], None


def marker2_instance(rng):
    return [mf.rn(rng.normal(size=2)), rand_se2(rng), mf.rn(rng.normal(size=2))], None


INSTANCES = {
    "range_bearing": rb_instance, "odometry": odo_instance, "calibration": calib_instance,
    "marker_calibration": marker_instance, "range_bearing_2d": rb2_instance,
    "odometry_2d": odo2_instance, "calibration_2d": calib2_instance,
    "marker_calibration_2d": marker2_instance,
}


@pytest.mark.parametrize("kind", sorted(INSTANCES))
def test_jacobians_match_central_differences(kind):
    rng = np.random.default_rng(abs(hash(kind)) % 2 ** 32)
    worst = 0.0
    for _ in range(N_RANDOM):
        pts, z = INSTANCES[kind](rng)
        _, J, ok = fc.evaluate(kind, pts, z)
        assert ok
        worst = max(worst, rel_err(J, stacked_numeric_jacobian(kind, pts, z)))
    assert worst < 1e-5


# -- range-bearing -------------------------------------------------------------

def test_range_bearing_predictions():
    z = fc.predict_range_bearing(mf.se3(), mf.rn([1.0, 0, 0]))
    np.testing.assert_allclose(mf.log(z), [1, 0, 0], atol=1e-15)
    z = fc.predict_range_bearing(mf.se3(), mf.rn([0, 2.0, 0]))
    np.testing.assert_allclose(mf.log(z), [2, np.pi / 2, 0], atol=1e-15)


def test_range_bearing_azimuth_wrap():
    T = mf.se3()
    m = mf.rn([-np.cos(np.radians(1)), -np.sin(np.radians(1)), 0.0])   # azimuth -179 deg
    z = fc.range_bearing_point(1.0, np.radians(179), 0.0)
    r = fc.range_bearing_residual(z, T, m)
    np.testing.assert_allclose(r, [0, np.radians(-2), 0], atol=1e-12)
    res, _, _ = fc.evaluate("range_bearing", [T, m], z)
    np.testing.assert_allclose(res, r, atol=1e-12)


def test_range_bearing_residual_matches_composite_ominus():
    rng = np.random.default_rng(9)
    for _ in range(50):
        (T, m), z = rb_instance(rng)
        res, _, _ = fc.evaluate("range_bearing", [T, m], z)
        np.testing.assert_allclose(res, mf.ominus(z, fc.predict_range_bearing(T, m)), atol=1e-12)


def test_range_bearing_singularities():
    with pytest.raises(fc.DegenerateGeometry):
        fc.predict_range_bearing(mf.se3(), mf.rn([0, 0, 0]))
    with pytest.raises(fc.GimbalSingularity):
        fc.predict_range_bearing(mf.se3(), mf.rn([0, 0, 1.0]))
    _, _, ok = fc.evaluate("range_bearing", [mf.se3(), mf.rn([0, 0, 1.0])],
                           fc.range_bearing_point(1, 0, 0))
    assert not ok


def test_planar_range_bearing_is_3d_without_elevation():
    rng = np.random.default_rng(11)
    for _ in range(20):
        (S, m), z = rb2_instance(rng)
        res2, J2, _ = fc.evaluate("range_bearing_2d", [S, m], z)
        from gbpcal import lie
        S3 = mf.ManifoldPoint("SE3", lie.se2_to_se3(S.data))
        m3 = mf.rn(lie.r2_to_r3(m.data))
        z3 = fc.range_bearing_point(*mf.log(z), 0.0)
        res3, J3, _ = fc.evaluate("range_bearing", [S3, m3], z3)
        np.testing.assert_allclose(res2, res3[:2], atol=1e-12)
        # SE2 tangent (x, y, yaw) sits at SE3 columns (0, 1, 5); R2 at (6, 7)
        np.testing.assert_allclose(J2, J3[:2][:, [0, 1, 5, 6, 7]], atol=1e-12)


# -- odometry and calibration --------------------------------------------------

def test_odometry_residual_examples():
    rng = np.random.default_rng(12)
    A, B = rand_se3(rng), rand_se3(rng)
    z = mf.compose(mf.invert(A), B)
    np.testing.assert_allclose(fc.odometry_residual(A, B, z), 0, atol=1e-12)
    r = fc.odometry_residual(mf.se3(), mf.se3(), mf.se3([1, 0, 0]))
    np.testing.assert_allclose(r, [1, 0, 0, 0, 0, 0], atol=1e-15)
    res, _, _ = fc.evaluate("odometry", [A, B], z)
    np.testing.assert_allclose(res, 0, atol=1e-12)


def test_calibration_residual_examples():
    rng = np.random.default_rng(13)
    B, C = rand_se3(rng), rand_se3(rng)
    np.testing.assert_allclose(fc.calibration_residual(mf.compose(B, C), B, C), 0, atol=1e-12)
    r = fc.calibration_residual(mf.se3([0.1, 0, 0]), mf.se3(), mf.se3())
    np.testing.assert_allclose(r, [-0.1, 0, 0, 0, 0, 0], atol=1e-15)
    res, _, _ = fc.evaluate("calibration", [mf.se3([0.1, 0, 0]), mf.se3(), mf.se3()])
    np.testing.assert_allclose(res, r, atol=1e-15)


def test_marker_residual_zero_iff_consistent():
    rng = np.random.default_rng(14)
    B, b = rand_se3(rng), rng.normal(size=3)
    m = B.data[:3] + B.rotation @ b
    np.testing.assert_allclose(fc.marker_calibration_residual(mf.rn(m), B, mf.rn(b)), 0, atol=1e-12)
    assert np.linalg.norm(fc.marker_calibration_residual(mf.rn(m + 0.1), B, mf.rn(b))) > 0.1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_residual_zero_when_measurement_equals_prediction(seed):
    rng = np.random.default_rng(seed)
    (T, m), _ = rb_instance(rng)
    z = fc.predict_range_bearing(T, m)
    np.testing.assert_allclose(fc.evaluate("range_bearing", [T, m], z)[0], 0, atol=1e-10)
    A, B = rand_se3(rng), rand_se3(rng)
    z = mf.compose(mf.invert(A), B)
    np.testing.assert_allclose(fc.evaluate("odometry", [A, B], z)[0], 0, atol=1e-10)


def test_between_factor_is_linear():
    x, y = mf.rn([1.0, 2.0, 3.0]), mf.rn([2.0, 0.0, 5.0])
    res, J, ok = fc.evaluate("between_R3", [x, y], mf.rn([1.0, -2.0, 2.0]))
    np.testing.assert_array_equal(res, 0)
    np.testing.assert_array_equal(J, np.hstack([np.eye(3), -np.eye(3)]))


# -- regulariser and DCS -------------------------------------------------------

def test_adaptive_reg_update():
    reg = fc.AdaptiveReg()
    assert fc.update_adaptive_reg(reg, 2.0, 1.0).lambda_reg == pytest.approx(110.0)
    assert fc.update_adaptive_reg(reg, 1.0, 2.0).lambda_reg == pytest.approx(10.0 / 9.0)
    # a rise of exactly eps takes the "otherwise" branch
    eps = reg.eps_lambda
    assert fc.update_adaptive_reg(reg, 1.0 + eps, 1.0).lambda_reg == pytest.approx(10.0 / 9.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=30))
def test_adaptive_reg_stays_positive_and_deterministic(energies):
    a = b = fc.AdaptiveReg()
    for e0, e1 in zip(energies, energies[1:]):
        a = fc.update_adaptive_reg(a, e1, e0)
        b = fc.update_adaptive_reg(b, e1, e0)
        assert a.lambda_reg > 0
    assert a == b


def test_apply_regularizer():
    zero = CanonicalGaussian.zeros(3)
    g = fc.apply_regularizer(zero, fc.AdaptiveReg())
    np.testing.assert_array_equal(g.lam, 10 * np.eye(3))
    np.testing.assert_array_equal(g.eta, 0)
    p = CanonicalGaussian([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
    same = fc.apply_regularizer(p, None)
    np.testing.assert_array_equal(same.lam, p.lam)


def test_regularized_step_on_scalar_factor():
    # 1-D linear factor: residual r, Jacobian J, information L
    J, L, r, lam = 2.0, 3.0, 0.7, 10.0
    pot = CanonicalGaussian([-J * L * -r], [[J * L * J]])     # eta = J^T L (z - h) with r = z - h and J_h = -J
    reg = fc.apply_regularizer(pot, fc.AdaptiveReg(lambda_reg=lam))
    step = reg.eta[0] / reg.lam[0, 0]
    assert step == pytest.approx(J * L * r / (J * L * J + lam))


def test_dcs_scale_values():
    cfg = fc.DcsConfig(10.0)
    assert fc.dcs_scale(0.0, cfg) == 1.0
    assert fc.dcs_scale(10.0, cfg) == 1.0
    assert fc.dcs_scale(30.0, cfg) == pytest.approx(0.5)
    assert fc.dcs_scale(30.0, cfg) ** 2 == pytest.approx(0.25)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e8, allow_nan=False), st.floats(0, 1e8, allow_nan=False))
def test_dcs_scale_non_increasing(e1, e2):
    cfg = fc.DcsConfig(10.0)
    lo, hi = sorted((e1, e2))
    assert fc.dcs_scale(hi, cfg) <= fc.dcs_scale(lo, cfg)


def test_dcs_scale_is_continuous_at_phi():
    cfg = fc.DcsConfig(10.0)
    assert abs(fc.dcs_scale(10.0 + 1e-9, cfg) - fc.dcs_scale(10.0 - 1e-9, cfg)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-6, 100.0))
def test_regularized_potential_is_pd(seed, lam):
    from gbpcal.graph import FactorGraph, linearize_factor
    rng = np.random.default_rng(seed)
    (T, m), z = rb_instance(rng)
    g = FactorGraph()
    g.add_variable("S", T)
    g.add_variable("M", m)
    f = g.add_factor("Z", "range_bearing", ("S", "M"), z, np.diag([400.0, 130.0, 130.0]),
                     reg=fc.AdaptiveReg(lambda_reg=lam))
    pot = linearize_factor(f)
    assert is_positive_definite(pot.lam, rtol=0.0)
