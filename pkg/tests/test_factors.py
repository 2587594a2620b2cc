"""Factor residuals and analytic Jacobians against independent oracles."""

import numpy as np
import pytest

from twistgraph import manifold as M
from twistgraph.factors import (
    ConstantTwistSpec,
    RollPitchSpec,
    boundary_factors,
    ct_factor,
    ct_jacobians,
    ct_residual,
    prior_factor,
    relative_pose_factor,
    roll_pitch_factor,
    usbl_factor,
    yaw_of,
)
from twistgraph.fgraph import FactorGraph, Values, VariableKey, optimize
from twistgraph.manifold import (
    EuclidPoint,
    ManifoldMismatchError,
    NearSingularError,
    Pose3,
    Rotation3,
)
from twistgraph.simkit import finite_difference_jacobian

from conftest import random_pose, random_rotation


def se3_key(i, t=None):
    return VariableKey(id=i, kind=M.SE3, timestamp=float(i if t is None else t))


def r3_key(i, t=None):
    return VariableKey(id=i, kind=M.R3, timestamp=float(i if t is None else t))


def check_factor_jacobians(factor, values, atol=1e-6):
    Js = factor.jacobian_fn(values)
    for key, J in zip(factor.keys, Js):
        J_fd = finite_difference_jacobian(factor.residual_fn, values, key)
        np.testing.assert_allclose(J, J_fd, atol=atol)
    if factor.combined_fn is not None:
        r_c, Js_c = factor.combined_fn(values)
        np.testing.assert_allclose(r_c, factor.residual_fn(values), atol=1e-12)
        for J, J_c in zip(Js, Js_c):
            np.testing.assert_allclose(J, J_c, atol=1e-12)


class TestConstantTwistResidual:
    def test_exact_twist_gives_zero_se3(self, rng):
        for _ in range(50):
            xi = rng.normal(0.0, 0.4, 6)
            dt1, dt2 = rng.uniform(0.2, 3.0, 2)
            # keep each rotation increment well inside the log's pi radius
            w_step = np.linalg.norm(xi[3:]) * max(dt1, dt2)
            if w_step > 2.5:
                xi[3:] *= 2.5 / w_step
            T0 = random_pose(rng, max_angle=1.5)
            T1 = M.oplus(M.SE3, T0, xi * dt1)
            T2 = M.oplus(M.SE3, T1, xi * dt2)
            r = ct_residual(T0, T1, T2, dt1, dt2)
            assert np.max(np.abs(r)) < 1e-12

    def test_exact_twist_gives_zero_so3_and_r3(self, rng):
        w = np.array([0.1, -0.2, 0.3])
        R0 = random_rotation(rng, 1.0)
        R1 = M.oplus(M.SO3, R0, w)
        R2 = M.oplus(M.SO3, R1, 2.0 * w)
        assert np.max(np.abs(ct_residual(R0, R1, R2, 1.0, 2.0))) < 1e-12

        p0 = EuclidPoint(np.zeros(3))
        p1 = EuclidPoint(np.array([1.0, 0.0, 0.0]))
        p2 = EuclidPoint(np.array([2.0, 0.0, 0.0]))
        assert np.max(np.abs(ct_residual(p0, p1, p2, 1.0, 1.0))) < 1e-15

    def test_r3_overshoot_example(self):
        # (0,0,0) -> (1,0,0) predicts (2,0,0); the actual (3,0,0) leaves (1,0,0)
        p0 = EuclidPoint(np.zeros(3))
        p1 = EuclidPoint(np.array([1.0, 0.0, 0.0]))
        p2 = EuclidPoint(np.array([3.0, 0.0, 0.0]))
        np.testing.assert_allclose(
            ct_residual(p0, p1, p2, 1.0, 1.0), [1.0, 0.0, 0.0])

    def test_timing_scales_prediction(self):
        # same R^3 motion expressed over dt2 = 2 dt1 doubles the increment
        p0 = EuclidPoint(np.zeros(3))
        p1 = EuclidPoint(np.array([1.0, 0.0, 0.0]))
        p2 = EuclidPoint(np.array([3.0, 0.0, 0.0]))
        assert np.max(np.abs(ct_residual(p0, p1, p2, 1.0, 2.0))) < 1e-15

    def test_rejects_bad_dt(self, rng):
        T = random_pose(rng)
        with pytest.raises(ValueError):
            ct_residual(T, T, T, 0.0, 1.0)
        with pytest.raises(ValueError):
            ct_residual(T, T, T, 1.0, -1.0)

    def test_left_invariance(self, rng):
        # residual built from relative increments: invariant to a common
        # left transform of the triple
        for _ in range(20):
            xi = rng.normal(0.0, 0.3, 6)
            T0 = random_pose(rng, 1.0)
            T1 = M.oplus(M.SE3, T0, xi)
            T2 = M.oplus(M.SE3, T1, rng.normal(0.0, 0.3, 6))
            G = random_pose(rng, 1.0)
            r = ct_residual(T0, T1, T2, 1.0, 1.0)
            r_moved = ct_residual(M.compose(G, T0), M.compose(G, T1),
                                  M.compose(G, T2), 1.0, 1.0)
            np.testing.assert_allclose(r, r_moved, atol=1e-10)

    def test_near_pi_increment_raises_with_step_name(self, rng):
        T0 = Pose3.identity()
        T1 = Pose3(M.exp_so3(np.array([np.pi - 1e-9, 0.0, 0.0])), np.zeros(3))
        with pytest.raises(NearSingularError, match="relative increment"):
            ct_residual(T0, T1, T0, 1.0, 1.0)


class TestConstantTwistJacobians:
    def test_zero_increment_blocks_are_scaled_identities(self):
        T = Pose3.identity()
        for alpha in (0.5, 1.0, 2.0):
            J0, J1, J2 = ct_jacobians(T, T, T, 1.0, alpha)
            np.testing.assert_allclose(J0, alpha * np.eye(6), atol=1e-12)
            np.testing.assert_allclose(J1, -(1 + alpha) * np.eye(6),
                                       atol=1e-12)
            np.testing.assert_allclose(J2, np.eye(6), atol=1e-12)

    def test_matches_finite_differences(self, rng):
        keys = [se3_key(i) for i in range(3)]
        for _ in range(30):
            dt1 = rng.uniform(0.2, 2.0)
            dt2 = rng.uniform(0.2, 2.0)
            values = Values()
            T = random_pose(rng, 1.2)
            for k in keys:
                values.set(k, T)
                T = M.oplus(M.SE3, T, rng.normal(0.0, 0.3, 6))
            f = ct_factor(tuple(keys),
                          ConstantTwistSpec(dt1, dt2, np.eye(6)))
            check_factor_jacobians(f, values)

    def test_so3_matches_finite_differences(self, rng):
        keys = [VariableKey(i, M.SO3, float(i)) for i in range(3)]
        values = Values()
        R = random_rotation(rng, 1.0)
        for k in keys:
            values.set(k, R)
            R = M.oplus(M.SO3, R, rng.normal(0.0, 0.3, 3))
        f = ct_factor(tuple(keys), ConstantTwistSpec(0.7, 1.3, np.eye(3)))
        check_factor_jacobians(f, values)

    def test_interpolation_minimizer_is_geodesic_midpoint(self, rng):
        # anchors at T0 and T2, free middle: zero residual at the
        # constant-twist midpoint T0 * Exp(Log(T0^-1 T2) / 2)
        T0 = random_pose(rng, 1.0)
        T2 = M.oplus(M.SE3, T0, rng.normal(0.0, 0.5, 6))
        midpoint = M.oplus(M.SE3, T0, M.ominus(M.SE3, T2, T0) / 2.0)

        keys = [se3_key(i) for i in range(3)]
        graph = FactorGraph()
        graph.add(prior_factor(keys[0], T0, np.eye(6) * 1e-10))
        graph.add(prior_factor(keys[2], T2, np.eye(6) * 1e-10))
        graph.add(ct_factor(tuple(keys),
                            ConstantTwistSpec(1.0, 1.0, np.eye(6) * 0.01)))
        values = Values()
        values.set(keys[0], T0)
        values.set(keys[2], T2)
        values.set(keys[1], M.oplus(M.SE3, midpoint, rng.normal(0.0, 0.1, 6)))
        solution, report = optimize(graph, values)
        assert report.converged
        err = M.ominus(M.SE3, solution.get(keys[1]), midpoint)
        assert np.max(np.abs(err)) < 1e-7

    def test_factor_validation(self):
        with pytest.raises(ManifoldMismatchError):
            ct_factor((se3_key(0), r3_key(1), se3_key(2)),
                      ConstantTwistSpec(1.0, 1.0, np.eye(6)))
        with pytest.raises(ValueError):
            ct_factor((se3_key(0, 1.0), se3_key(1, 1.0), se3_key(2, 2.0)),
                      ConstantTwistSpec(1.0, 1.0, np.eye(6)))
        with pytest.raises(ValueError):
            ConstantTwistSpec(-1.0, 1.0, np.eye(6))

    def test_effective_covariance_scales_with_horizon(self):
        spec = ConstantTwistSpec(0.5, 2.0, np.eye(6) * 0.04)
        np.testing.assert_allclose(spec.effective_covariance(),
                                   np.eye(6) * 0.08)
        assert spec.alpha == pytest.approx(4.0)


class TestPriorAndRelativePose:
    def test_prior_zero_at_mean(self, rng):
        T = random_pose(rng)
        k = se3_key(0)
        f = prior_factor(k, T, np.eye(6))
        values = Values()
        values.set(k, T)
        assert np.max(np.abs(f.residual_fn(values))) < 1e-12

    def test_prior_jacobian_fd(self, rng):
        for kind, sampler in ((M.SE3, lambda: random_pose(rng, 1.0)),
                              (M.R3, lambda: EuclidPoint(rng.normal(size=3)))):
            k = VariableKey(0, kind, 0.0)
            f = prior_factor(k, sampler(), np.eye(kind.dim))
            values = Values()
            values.set(k, sampler())
            check_factor_jacobians(f, values)

    def test_relative_pose_zero_at_measurement(self, rng):
        A = random_pose(rng, 1.0)
        z = M.exp_se3(rng.normal(0.0, 0.4, 6))
        B = M.compose(A, z)
        ka, kb = se3_key(0), se3_key(1)
        f = relative_pose_factor(ka, kb, z, np.eye(6))
        values = Values()
        values.set(ka, A)
        values.set(kb, B)
        assert np.max(np.abs(f.residual_fn(values))) < 1e-12

    def test_relative_pose_jacobian_fd(self, rng):
        ka, kb = se3_key(0), se3_key(1)
        f = relative_pose_factor(ka, kb, random_pose(rng, 1.0), np.eye(6))
        values = Values()
        values.set(ka, random_pose(rng, 1.0))
        values.set(kb, random_pose(rng, 1.0))
        check_factor_jacobians(f, values)

    def test_relative_pose_needs_se3(self):
        with pytest.raises(ManifoldMismatchError):
            relative_pose_factor(se3_key(0), r3_key(1), Pose3.identity(),
                                 np.eye(6))


class TestUsblFactor:
    def test_identity_chaser_residual(self):
        kc, kt = se3_key(0), r3_key(1)
        z = np.array([1.0, 2.0, 3.0])
        f = usbl_factor(kc, kt, z, np.eye(3))
        values = Values()
        values.set(kc, Pose3.identity())
        values.set(kt, EuclidPoint(np.array([2.0, 2.0, 3.0])))
        np.testing.assert_allclose(f.residual_fn(values), [1.0, 0.0, 0.0])

    def test_yawed_chaser_rotates_offset(self):
        # chaser yawed +90 deg: target at world (0, 5, 0) appears at
        # body-frame (5, 0, 0)
        kc, kt = se3_key(0), r3_key(1)
        yaw90 = Pose3(M.exp_so3(np.array([0.0, 0.0, np.pi / 2])), np.zeros(3))
        f = usbl_factor(kc, kt, np.zeros(3), np.eye(3))
        values = Values()
        values.set(kc, yaw90)
        values.set(kt, EuclidPoint(np.array([0.0, 5.0, 0.0])))
        np.testing.assert_allclose(f.residual_fn(values), [5.0, 0.0, 0.0],
                                   atol=1e-12)

    @pytest.mark.parametrize("target_kind", ["SE3", "RN"])
    def test_jacobian_fd(self, rng, target_kind):
        kc = se3_key(0)
        kt = se3_key(1) if target_kind == "SE3" else r3_key(1)
        f = usbl_factor(kc, kt, rng.normal(size=3), np.eye(3))
        values = Values()
        values.set(kc, random_pose(rng, 1.0))
        values.set(kt, random_pose(rng, 1.0) if target_kind == "SE3"
                   else EuclidPoint(rng.normal(0.0, 3.0, 3)))
        check_factor_jacobians(f, values)

    def test_validation(self):
        with pytest.raises(ManifoldMismatchError):
            usbl_factor(r3_key(0), r3_key(1), np.zeros(3), np.eye(3))
        with pytest.raises(ManifoldMismatchError):
            usbl_factor(se3_key(0), VariableKey(1, M.SO3, 0.0), np.zeros(3),
                        np.eye(3))


class TestRollPitchFactor:
    def test_zero_for_any_yaw(self, rng):
        k = se3_key(0)
        f = roll_pitch_factor(k)
        for _ in range(20):
            yaw = rng.uniform(-np.pi, np.pi)
            T = Pose3(M.exp_so3(np.array([0.0, 0.0, yaw])),
                      rng.normal(size=3))
            values = Values()
            values.set(k, T)
            assert np.max(np.abs(f.residual_fn(values))) < 1e-12

    def test_pure_roll_magnitude(self):
        k = se3_key(0)
        f = roll_pitch_factor(k)
        T = Pose3(M.exp_so3(np.array([0.1, 0.0, 0.0])), np.zeros(3))
        values = Values()
        values.set(k, T)
        r = f.residual_fn(values)
        assert np.linalg.norm(r) == pytest.approx(0.1, abs=1e-9)

    def test_jacobian_fd(self, rng):
        k = se3_key(0)
        f = roll_pitch_factor(k)
        for _ in range(20):
            R = Rotation3(
                M.exp_so3(np.array([0.0, 0.0, rng.uniform(-np.pi, np.pi)]))
                .matrix @ M.exp_so3(rng.normal(0.0, 0.2, 3)).matrix)
            values = Values()
            values.set(k, Pose3(R, rng.normal(size=3)))
            check_factor_jacobians(f, values)

    def test_yaw_of_gimbal_guard(self):
        R = M.exp_so3(np.array([0.0, -np.pi / 2, 0.0])).matrix
        with pytest.raises(NearSingularError):
            yaw_of(R)

    def test_needs_se3(self):
        with pytest.raises(ManifoldMismatchError):
            roll_pitch_factor(r3_key(0))


class TestBoundaryFactors:
    def test_zero_when_translations_agree(self, rng):
        T = random_pose(rng, 1.0)
        kT, kp = se3_key(0, 5.0), r3_key(1, 5.0)
        (f,) = boundary_factors(kT, kp, "DOWN", np.eye(3) * 1e-4)
        values = Values()
        values.set(kT, T)
        values.set(kp, EuclidPoint(T.translation.copy()))
        assert np.max(np.abs(f.residual_fn(values))) < 1e-12

    def test_residual_is_translation_gap(self, rng):
        T = random_pose(rng, 1.0)
        kT, kp = se3_key(0), r3_key(1)
        (f,) = boundary_factors(kT, kp, "UP", np.eye(3) * 1e-4)
        gap = np.array([0.3, -0.1, 0.2])
        values = Values()
        values.set(kT, T)
        values.set(kp, EuclidPoint(T.translation + gap))
        np.testing.assert_allclose(f.residual_fn(values), gap, atol=1e-12)

    @pytest.mark.parametrize("direction", ["DOWN", "UP"])
    def test_jacobian_fd(self, rng, direction):
        kT, kp = se3_key(0), r3_key(1)
        (f,) = boundary_factors(kT, kp, direction, np.eye(3) * 1e-4)
        values = Values()
        values.set(kT, random_pose(rng, 1.0))
        values.set(kp, EuclidPoint(rng.normal(size=3)))
        check_factor_jacobians(f, values)

    def test_validation(self):
        with pytest.raises(ValueError):
            boundary_factors(se3_key(0), r3_key(1), "SIDEWAYS", np.eye(3))
        with pytest.raises(ManifoldMismatchError):
            boundary_factors(r3_key(0), r3_key(1), "DOWN", np.eye(3))
