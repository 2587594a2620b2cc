"""Solver-layer checks against dense linear-algebra oracles."""

import numpy as np
import pytest

from twistgraph import manifold as M
from twistgraph.fgraph import (
    Factor,
    FactorGraph,
    Linearizer,
    NoiseModel,
    SolverSettings,
    UnderconstrainedGraphError,
    Values,
    VariableKey,
    linearize,
    marginal_covariance,
    optimize,
    total_cost,
    variable_offsets,
)
from twistgraph.factors import ConstantTwistSpec, ct_factor, prior_factor

from conftest import random_pose


def r3_key(i, t=None):
    return VariableKey(id=i, kind=M.R3, timestamp=float(i if t is None else t))


def linear_factor(keys, A_blocks, b, cov):
    """Residual sum_i A_i x_i - b on R^n variables."""

    def residual(values):
        r = -np.asarray(b, dtype=float)
        for key, A in zip(keys, A_blocks):
            r = r + A @ values.get(key).coords
        return r

    def jacobian(values):
        return tuple(A_blocks)

    return Factor(keys=tuple(keys), residual_fn=residual,
                  jacobian_fn=jacobian, noise=NoiseModel(cov))


class TestNoiseModel:
    def test_whiten_matches_mahalanobis(self, rng):
        A = rng.normal(size=(3, 3))
        cov = A @ A.T + 3.0 * np.eye(3)
        nm = NoiseModel(cov)
        for _ in range(20):
            e = rng.normal(size=3)
            w = nm.whiten(e)
            assert np.isclose(w @ w, e @ np.linalg.solve(cov, e))

    def test_from_sigmas_and_isotropic(self):
        nm = NoiseModel.from_sigmas([1.0, 2.0, 4.0])
        np.testing.assert_allclose(np.diag(nm.covariance), [1.0, 4.0, 16.0])
        nm2 = NoiseModel.isotropic(6, 0.5)
        np.testing.assert_allclose(nm2.covariance, np.eye(6) * 0.25)
        assert nm2.dim == 6

    def test_rejects_non_spd(self):
        with pytest.raises(np.linalg.LinAlgError):
            NoiseModel(np.diag([1.0, -1.0]))
        with pytest.raises(ValueError):
            NoiseModel(np.array([[1.0, 0.5], [0.2, 1.0]]))


class TestLinearize:
    def _small_problem(self, rng):
        k0, k1 = r3_key(0), r3_key(1)
        graph = FactorGraph()
        graph.add(linear_factor([k0], [np.eye(3)], [1.0, 2.0, 3.0],
                                np.eye(3) * 4.0))
        graph.add(linear_factor([k0, k1], [-np.eye(3), np.eye(3)],
                                [0.5, 0.5, 0.5], np.eye(3) * 0.25))
        values = Values()
        values.set(k0, M.EuclidPoint(rng.normal(size=3)))
        values.set(k1, M.EuclidPoint(rng.normal(size=3)))
        return graph, values, (k0, k1)

    def test_matches_dense_assembly(self, rng):
        graph, values, (k0, k1) = self._small_problem(rng)
        J, r, offsets = linearize(graph, values)
        assert J.shape == (6, 6)
        x0 = values.get(k0).coords
        x1 = values.get(k1).coords
        J_dense = np.zeros((6, 6))
        J_dense[:3, offsets[k0]:offsets[k0] + 3] = np.eye(3) / 2.0
        J_dense[3:, offsets[k0]:offsets[k0] + 3] = -np.eye(3) / 0.5
        J_dense[3:, offsets[k1]:offsets[k1] + 3] = np.eye(3) / 0.5
        np.testing.assert_allclose(J.toarray(), J_dense, atol=1e-12)
        np.testing.assert_allclose(
            r[:3], (x0 - np.array([1.0, 2.0, 3.0])) / 2.0)
        np.testing.assert_allclose(
            r[3:], (x1 - x0 - 0.5) / 0.5)
        assert np.isclose(total_cost(graph, values), r @ r)

    def test_linearizer_reuse_tracks_values(self, rng):
        graph, values, (k0, _) = self._small_problem(rng)
        lin = Linearizer(graph)
        J1, r1 = lin(values)
        moved = values.retracted(k0, np.array([1.0, -1.0, 0.5]))
        J2, r2 = lin(moved)
        J_ref, r_ref, _ = linearize(graph, moved)
        np.testing.assert_allclose(J2.toarray(), J_ref.toarray())
        np.testing.assert_allclose(r2, r_ref)
        assert not np.allclose(r1, r2)

    def test_offsets_follow_timestamps(self):
        k_late = r3_key(0, t=9.0)
        k_early = r3_key(1, t=1.0)
        graph = FactorGraph()
        graph.add(linear_factor([k_late, k_early],
                                [np.eye(3), -np.eye(3)], np.zeros(3),
                                np.eye(3)))
        offsets, n = variable_offsets(graph)
        assert n == 6
        assert offsets[k_early] == 0 and offsets[k_late] == 3


class TestOptimize:
    def test_linear_problem_matches_lstsq(self, rng):
        keys = [r3_key(i) for i in range(4)]
        graph = FactorGraph()
        rows = []
        rhs = []
        for i, k in enumerate(keys):
            b = rng.normal(size=3)
            graph.add(linear_factor([k], [np.eye(3)], b, np.eye(3)))
            row = np.zeros((3, 12))
            row[:, 3 * i:3 * i + 3] = np.eye(3)
            rows.append(row)
            rhs.append(b)
        for a, bk in zip(keys, keys[1:]):
            d = rng.normal(size=3)
            graph.add(linear_factor([a, bk], [-np.eye(3), np.eye(3)], d,
                                    np.eye(3) * 0.01))
            row = np.zeros((3, 12))
            ia, ib = keys.index(a), keys.index(bk)
            row[:, 3 * ia:3 * ia + 3] = -np.eye(3) / 0.1
            row[:, 3 * ib:3 * ib + 3] = np.eye(3) / 0.1
            rows.append(row)
            rhs.append(d / 0.1)
        A = np.vstack(rows)
        b = np.concatenate([r if r.shape == (3,) else r for r in rhs])
        x_ref, *_ = np.linalg.lstsq(A, b, rcond=None)

        values = Values()
        for k in keys:
            values.set(k, M.EuclidPoint(np.zeros(3)))
        solution, report = optimize(graph, values)
        assert report.converged
        x = np.concatenate([solution.get(k).coords for k in keys])
        np.testing.assert_allclose(x, x_ref, atol=1e-8)

    def test_se3_chain_recovers_truth(self, rng):
        keys = [VariableKey(i, M.SE3, float(i)) for i in range(4)]
        truth = [random_pose(rng, max_angle=1.0) for _ in keys]
        graph = FactorGraph()
        graph.add(prior_factor(keys[0], truth[0], np.eye(6) * 1e-8))
        from twistgraph.factors import relative_pose_factor
        for a, b, Ta, Tb in zip(keys, keys[1:], truth, truth[1:]):
            z = M.compose(M.inverse(Ta), Tb)
            graph.add(relative_pose_factor(a, b, z, np.eye(6) * 1e-4))
        values = Values()
        for k, T in zip(keys, truth):
            values.set(k, M.oplus(M.SE3, T, rng.normal(0.0, 0.1, 6)))
        solution, report = optimize(graph, values)
        assert report.converged
        for k, T in zip(keys, truth):
            err = M.ominus(M.SE3, solution.get(k), T)
            assert np.max(np.abs(err)) < 1e-6

    def test_cost_trace_monotone(self, rng):
        keys = [VariableKey(i, M.SE3, float(i)) for i in range(3)]
        graph = FactorGraph()
        graph.add(prior_factor(keys[0], M.Pose3.identity(), np.eye(6) * 1e-4))
        graph.add(ct_factor(tuple(keys),
                            ConstantTwistSpec(1.0, 1.0, np.eye(6) * 0.01)))
        graph.add(prior_factor(keys[1], random_pose(rng, 0.5),
                               np.eye(6) * 0.01))
        values = Values()
        for k in keys:
            values.set(k, random_pose(rng, 0.5))
        _, report = optimize(graph, values)
        trace = np.array(report.cost_trace)
        assert np.all(np.diff(trace) <= 1e-12)
        assert report.final_cost == pytest.approx(trace[-1])

    def test_missing_initials_raise(self):
        k = r3_key(0)
        graph = FactorGraph()
        graph.add(linear_factor([k], [np.eye(3)], np.zeros(3), np.eye(3)))
        with pytest.raises(KeyError):
            optimize(graph, Values())

    def test_empty_graph_converges_trivially(self):
        values, report = optimize(FactorGraph(), Values())
        assert report.converged and report.iterations == 0


class TestGaugeDetection:
    def test_unanchored_chain_is_underconstrained(self, rng):
        keys = [r3_key(i) for i in range(3)]
        graph = FactorGraph()
        for a, b in zip(keys, keys[1:]):
            graph.add(linear_factor([a, b], [-np.eye(3), np.eye(3)],
                                    rng.normal(size=3), np.eye(3)))
        values = Values()
        for k in keys:
            values.set(k, M.EuclidPoint(rng.normal(size=3)))
        with pytest.raises(UnderconstrainedGraphError) as exc:
            optimize(graph, values)
        assert exc.value.suspect_keys

    def test_anchored_chain_is_fine(self, rng):
        keys = [r3_key(i) for i in range(3)]
        graph = FactorGraph()
        graph.add(linear_factor([keys[0]], [np.eye(3)], np.zeros(3),
                                np.eye(3)))
        for a, b in zip(keys, keys[1:]):
            graph.add(linear_factor([a, b], [-np.eye(3), np.eye(3)],
                                    rng.normal(size=3), np.eye(3)))
        values = Values()
        for k in keys:
            values.set(k, M.EuclidPoint(rng.normal(size=3)))
        _, report = optimize(graph, values)
        assert report.converged


class TestMarginals:
    def test_matches_dense_inverse(self, rng):
        keys = [r3_key(i) for i in range(3)]
        graph = FactorGraph()
        for k in keys:
            graph.add(linear_factor([k], [np.eye(3)], rng.normal(size=3),
                                    np.eye(3) * rng.uniform(0.5, 2.0)))
        for a, b in zip(keys, keys[1:]):
            graph.add(linear_factor([a, b], [-np.eye(3), np.eye(3)],
                                    rng.normal(size=3), np.eye(3) * 0.2))
        values = Values()
        for k in keys:
            values.set(k, M.EuclidPoint(rng.normal(size=3)))
        solution, _ = optimize(graph, values)
        J, _, offsets = linearize(graph, solution)
        info_dense = (J.T @ J).toarray()
        full_cov = np.linalg.inv(info_dense)
        for k in keys:
            c0 = offsets[k]
            ref = full_cov[c0:c0 + 3, c0:c0 + 3]
            np.testing.assert_allclose(
                marginal_covariance(graph, solution, k), ref, atol=1e-9)
