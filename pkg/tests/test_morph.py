import math

import numpy as np
import pytest

from podecm.exceptions import MorphError
from podecm.meshgen import composite_rve, porous_rve, rve_mesh
from podecm.meshkit import Mesh, structured_square
from podecm.morph import InclusionScaling, Morpher, PorousEllipses, parameterization_from_dict


@pytest.fixture(scope="module")
def composite():
    m = composite_rve(h=0.1)
    return m, Morpher(m, InclusionScaling())


@pytest.fixture(scope="module")
def porous():
    m = porous_rve(h=0.08)
    return m, Morpher(m, PorousEllipses())


class TestAuxOperator:
    def test_symmetric(self, composite):
        _, M = composite
        K = M.K
        assert abs(K - K.T).max() < 1e-12 * abs(K).max()

    def test_zero_data_gives_zero(self, composite):
        _, M = composite
        assert np.all(M.displacement(np.zeros((len(M.fixed_nodes), 2))) == 0)

    def test_affine_patch(self):
        m = structured_square(4)
        M = Morpher(m, InclusionScaling())
        G = np.array([[0.03, -0.02], [0.05, 0.01]])
        c = np.array([0.01, -0.02])
        d = M.displacement(m.nodes[M.fixed_nodes] @ G.T + c)
        assert np.abs(d - (m.nodes @ G.T + c)).max() < 1e-10

    def test_no_dirichlet_data_is_singular(self):
        m = structured_square(2)
        bare = Mesh(nodes=m.nodes, elements=m.elements, elem_kind="tri6", regions=m.regions)
        with pytest.raises(MorphError, match="singular"):
            Morpher(bare, InclusionScaling())


class TestSolveMorph:
    def test_parent_is_identity(self, composite, porous):
        for (m, M), mu in ((composite, [1.0]), (porous, [0.45, 1.25])):
            f = M.solve(mu)
            assert np.abs(f.det - 1).max() < 1e-12
            assert np.abs(f.F_inv - np.eye(2)).max() < 1e-12
            assert np.abs(f.d).max() < 1e-12

    def test_lower_bound_valid_and_volume_preserved(self, composite):
        m, M = composite
        f = M.solve([0.5])
        assert f.det.min() > 0
        assert math.isclose(np.sum(f.det * m.quadrature.weights.ravel()), 1.0, abs_tol=1e-6)

    def test_inclusion_volume_scales_with_zeta_squared(self, composite):
        m, M = composite
        f = M.solve([1.2])
        w = m.quadrature.weights.ravel() * f.det
        inc = m.point_regions == 2
        base = m.quadrature.weights.ravel()[inc].sum()
        assert math.isclose(w[inc].sum(), 1.44 * base, rel_tol=1e-10)

    def test_out_of_range_inverts(self, composite):
        _, M = composite
        with pytest.raises(MorphError, match="element inversion under morphing.*mu = \\[5.0\\]"):
            M.solve([5.0])

    def test_outer_boundary_fixed(self, porous):
        m, M = porous
        f = M.solve([0.5, 1.5])
        assert np.all(f.d[m.nodes_with_tag(1)] == 0)

    @pytest.mark.parametrize("mu", [(0.4, 1.01), (0.4, 1.5), (0.5, 1.01), (0.5, 1.5)])
    def test_porous_corners_admissible(self, porous, mu):
        m, M = porous
        f = M.solve(mu)
        assert f.det.min() > 0
        # morphed solid area equals the box minus the target holes (polygonal boundary)
        area = np.sum(f.det * m.quadrature.weights.ravel())
        assert math.isclose(area, 1 - mu[0], abs_tol=5e-5)

    def test_linear_in_boundary_data(self, composite):
        _, M = composite
        g = M.boundary_data([1.1])
        d1 = M.displacement(g)
        d3 = M.displacement(3.0 * g)
        assert np.abs(d3 - 3.0 * d1).max() <= 1e-12 * max(1.0, np.abs(d3).max())

    def test_selected_points_match_full(self, porous):
        _, M = porous
        ids = np.array([0, 7, 100, 301])
        full = M.solve([0.42, 1.4])
        part = M.solve([0.42, 1.4], point_ids=ids)
        assert np.allclose(part.F_inv, full.F_inv[ids], rtol=0, atol=1e-14)
        assert np.allclose(part.det, full.det[ids], rtol=0, atol=1e-14)

    def test_wrong_parameter_count(self, porous):
        with pytest.raises(MorphError, match="expects 2"):
            porous[1].solve([0.4])

    def test_hole_free_mesh_ignores_parameter(self):
        m = rve_mesh((), 0.25)
        f = Morpher(m, InclusionScaling()).solve([0.7])
        assert np.all(f.det == 1.0)

    def test_parameterization_roundtrip(self):
        for p in (InclusionScaling(), PorousEllipses()):
            q = parameterization_from_dict(p.to_dict())
            assert q.to_dict() == p.to_dict()


class TestFdDerivatives:
    def test_volume_derivative_zero_at_parent(self, composite):
        m, M = composite
        _, ddet = M.fd_derivatives([1.0], 1e-3)
        assert abs(np.sum(ddet[0] * m.quadrature.weights.ravel())) < 1e-10

    def test_central_difference_order(self, porous):
        _, M = porous
        mu = [0.45, 1.3]
        d1 = M.fd_derivatives(mu, 2e-3)[1]
        d2 = M.fd_derivatives(mu, 1e-3)[1]
        d3 = M.fd_derivatives(mu, 5e-4)[1]
        e12 = np.abs(d1 - d2).max()
        e23 = np.abs(d2 - d3).max()
        assert e23 < 0.3 * e12

    def test_one_sided_at_lower_bound(self, composite):
        _, M = composite
        dF, ddet = M.fd_derivatives([0.5], 1e-3)
        assert np.all(np.isfinite(ddet))
        fwd = (M.solve([0.501]).det - M.solve([0.5]).det) / 1e-3
        assert np.allclose(ddet[0], fwd, rtol=0, atol=1e-9)

    def test_bad_step(self, composite):
        with pytest.raises(MorphError):
            composite[1].fd_derivatives([1.0], 0.0)
