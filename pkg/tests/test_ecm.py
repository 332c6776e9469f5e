import numpy as np
import pytest

from podecm.ecm import (
    EcmRule,
    IntegrandMatrix,
    build_integrand,
    ecm_select,
    rule_errors,
    weighted_stress_field,
)
from podecm.exceptions import EcmError
from podecm.meshkit import structured_square
from podecm.morph import MorphField


def _uniform_morph(F, n):
    F = np.asarray(F, dtype=float)
    return MorphField(np.zeros(0), np.zeros((0, 2)), np.tile(np.linalg.inv(F), (n, 1, 1)),
                      np.full(n, np.linalg.det(F)))


@pytest.fixture(scope="module")
def square():
    return structured_square(3)


class TestWeightedStress:
    def test_identity(self):
        P = np.random.default_rng(0).normal(size=(5, 2, 2))
        W = weighted_stress_field(P, MorphField.identity(0, 5))
        assert np.array_equal(W, P)

    def test_zero_stress(self):
        assert not weighted_stress_field(np.zeros((3, 2, 2)), _uniform_morph(np.diag([1.2, 0.7]), 3)).any()

    def test_uniform_dilation(self):
        c = 1.7
        P = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        W = weighted_stress_field(P, _uniform_morph(np.sqrt(c) * np.eye(2), 1))
        # F^-T = c^(-1/2) I and det F = c, so W = c^(1/2) P
        assert np.allclose(W, np.sqrt(c) * P, rtol=1e-14)

    def test_stretch_by_hand(self):
        P = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        W = weighted_stress_field(P, _uniform_morph(np.diag([2.0, 0.25]), 1))
        # det = 0.5; columns of P scaled by 1/2 and 4
        assert np.allclose(W[0], 0.5 * np.array([[0.5, 8.0], [1.5, 16.0]]), rtol=1e-14)


class TestIntegrand:
    def test_constant_mode_and_stress(self, square):
        m = square
        phi = np.zeros((2 * m.n_nodes, 1))
        phi[0::2, 0] = 3.0 * m.nodes[:, 0]                 # gradient [[3, 0], [0, 0]]
        B = np.zeros((4 * m.n_points, 1))
        B[0::4, 0] = 2.0
        J = build_integrand(phi, B, m)
        assert J.n_rows == 2
        assert np.allclose(J.J[0], 6.0, rtol=1e-13)
        assert J.rhs[0] == pytest.approx(6.0 * m.area, rel=1e-13)
        assert J.rhs[1] == pytest.approx(m.area, rel=1e-13)

    def test_row_count(self, square):
        rng = np.random.default_rng(1)
        J = build_integrand(rng.normal(size=(2 * square.n_nodes, 3)),
                            rng.normal(size=(4 * square.n_points, 5)), square)
        assert J.n_rows == 16
        assert build_integrand(rng.normal(size=(2 * square.n_nodes, 3)),
                               rng.normal(size=(4 * square.n_points, 5)), square,
                               volume_row=False).n_rows == 15

    def test_stress_rows(self, square):
        rng = np.random.default_rng(3)
        Phi = rng.normal(size=(2 * square.n_nodes, 3))
        B = rng.normal(size=(4 * square.n_points, 5))
        J = build_integrand(Phi, B, square, stress_rows=True)
        assert J.n_rows == 16 + 20
        # row (l, c) samples component c of stress mode l
        assert np.array_equal(J.J[15 + 4 * 2 + 1], B[1::4, 2])
        assert np.array_equal(J.J[-1], np.ones(square.n_points))

    def test_rhs_is_full_rule(self, small_training):
        J = small_training.trained.integrand
        w = small_training.model.mesh.quadrature.weights.ravel()
        assert np.abs(J.J @ w - J.rhs).max() < 1e-12

    def test_row_order(self, square):
        rng = np.random.default_rng(2)
        Phi = rng.normal(size=(2 * square.n_nodes, 2))
        B = rng.normal(size=(4 * square.n_points, 3))
        J = build_integrand(Phi, B, square)
        single = build_integrand(Phi[:, 1:2], B[:, 2:3], square)
        assert np.allclose(J.J[1 * 3 + 2], single.J[0], rtol=1e-14)

    def test_dimension_mismatch(self, square):
        with pytest.raises(EcmError, match="stress modes"):
            build_integrand(np.ones((2 * square.n_nodes, 1)), np.ones((4, 1)), square)
        with pytest.raises(EcmError, match="displacement modes"):
            build_integrand(np.ones((3, 1)), np.ones((4 * square.n_points, 1)), square)


class TestSelection:
    def test_constant_rows_single_point(self, square):
        n = square.n_points
        J = IntegrandMatrix(np.vstack([2.5 * np.ones(n), np.ones(n)]), np.array([2.5, 1.0]), 1, 1)
        rule = ecm_select(J, 1e-10)
        assert rule.size == 1
        assert rule.weights[0] == pytest.approx(1.0, rel=1e-12)
        assert rule.point_ids[0] == 0                      # ties go to the lowest index
        # brute force: any single point with weight one is exact
        for q in range(n):
            err, _ = rule_errors(J, EcmRule([q], [1.0], 0.0))
            assert np.abs(err).max() < 1e-12

    def test_tight_tolerance(self, small_training):
        J = small_training.trained.integrand
        rule = ecm_select(J, 1e-16)
        err, rel = rule_errors(J, rule)
        assert rel < 1e-12
        assert rule.size <= J.n_rows
        assert rule.size > small_training.trained.rom.n_points

    def test_invariants(self, small_training):
        J = small_training.trained.integrand
        eps = 1e-3
        rule = ecm_select(J, eps)
        err, rel = rule_errors(J, rule)
        assert np.all(rule.weights > 0)
        assert len(np.unique(rule.point_ids)) == rule.size
        assert rel <= eps and rule.achieved_residual == pytest.approx(rel, rel=1e-10)
        assert np.abs(err).max() <= eps * np.sqrt(np.mean(J.rhs ** 2))
        area = small_training.model.mesh.area
        assert (1 - eps) * area <= rule.weights.sum() <= (1 + eps) * area
        h = np.array(rule.history)
        assert np.all(np.diff(h) <= 0)
        assert rule.size < small_training.model.mesh.n_points / 5

    def test_deterministic(self, small_training):
        J = small_training.trained.integrand
        a, b = ecm_select(J, 1e-3), ecm_select(J, 1e-3)
        assert np.array_equal(a.point_ids, b.point_ids)
        assert np.array_equal(a.weights, b.weights)

    def test_unreachable_target_raises(self):
        J = IntegrandMatrix(np.array([[1.0, 2.0]]), np.array([-1.0]), 1, 1, volume_row=False)
        with pytest.raises(EcmError, match="stalled"):
            ecm_select(J, 1e-6)

    @pytest.mark.parametrize("eps", [0.0, -1e-3])
    def test_bad_tolerance(self, eps, square):
        J = IntegrandMatrix(np.ones((1, 3)), np.ones(1), 1, 1)
        with pytest.raises(EcmError, match="positive"):
            ecm_select(J, eps)


class TestRule:
    def test_duplicate_ids(self):
        with pytest.raises(EcmError, match="duplicate"):
            EcmRule([1, 1], [0.5, 0.5], 0.0)

    def test_nonpositive_weight(self):
        with pytest.raises(EcmError, match="positive"):
            EcmRule([1, 2], [0.5, 0.0], 0.0)

    def test_full_rule_is_exact(self, small_training):
        J = small_training.trained.integrand
        _, rel = rule_errors(J, EcmRule.full(small_training.model.mesh))
        assert rel < 1e-13
