import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from podecm.exceptions import BasisError
from podecm.meshgen import composite_rve
from podecm.meshkit import periodic_pairs, structured_square
from podecm.morph import MorphField
from podecm.podkit import (
    SnapshotSet,
    full_basis,
    h1_gram,
    inner,
    l2_gram,
    mode_gradients,
    orthonormalize,
    pod,
    v_norm,
)


@pytest.fixture(scope="module")
def square():
    m = structured_square(2)
    return m, h1_gram(m)


def _g_svd(S, G):
    """Singular values of S in the G-inner product via a dense Cholesky factor."""
    L = np.linalg.cholesky(G.toarray() if hasattr(G, "toarray") else G)
    return np.linalg.svd(L.T @ S, compute_uv=False)


def _projection_error(basis, G, S):
    R = S - basis @ inner(G, basis, S)
    return float(np.sqrt(np.trace(inner(G, R, R))))


class TestGram:
    def test_h1_positive_definite(self, square):
        _, G = square
        assert np.linalg.eigvalsh(G.toarray()).min() > 0

    def test_h1_symmetric(self, square):
        _, G = square
        assert abs(G - G.T).max() < 1e-14

    def test_constant_field_has_no_gradient_energy(self, square):
        m, G = square
        u = np.tile([1.0, 2.0], m.n_nodes)
        assert u @ G @ u == pytest.approx(m.area * 5.0, rel=1e-12)

    def test_disjoint_support(self, square):
        m, G = square
        shared = {tuple(sorted((a, b))) for e in m.elements for a in e for b in e}
        a = 0
        b = next(n for n in range(m.n_nodes) if (min(a, n), max(a, n)) not in shared)
        u = np.zeros(2 * m.n_nodes)
        v = np.zeros(2 * m.n_nodes)
        u[2 * a] = v[2 * b + 1] = 1.0
        assert u @ G @ v == 0.0

    def test_l2_component_sum_is_area(self, square):
        m, _ = square
        d = l2_gram(m)
        assert d.reshape(-1, 4)[:, 2].sum() == pytest.approx(1.0, abs=1e-14)

    def test_l2_unit_stress_norm(self, square):
        m, _ = square
        ones = np.ones(4 * m.n_points)
        assert ones @ (l2_gram(m) * ones) == pytest.approx(4.0, abs=1e-13)

    def test_l2_matches_mass_block(self, square):
        m, _ = square
        M = h1_gram(m, include_gradient=False)
        rng = np.random.default_rng(3)
        u = rng.normal(size=2 * m.n_nodes)
        qd = m.quadrature
        at_q = np.einsum("qa,eai->eqi", qd.N, u.reshape(-1, 2)[m.elements]).reshape(-1, 2)
        field = np.zeros((m.n_points, 4))
        field[:, :2] = at_q
        assert u @ M @ u == pytest.approx(field.ravel() @ (l2_gram(m) * field.ravel()), rel=1e-12)

    def test_v_norm_identity_morph_is_parent_h1(self):
        m = composite_rve(h=0.15)
        G = h1_gram(m)
        u = np.random.default_rng(0).normal(size=(m.n_nodes, 2))
        ident = MorphField.identity(m.n_nodes, m.n_points)
        assert v_norm(m, ident, u) == pytest.approx(np.sqrt(u.ravel() @ G @ u.ravel()), rel=1e-12)

    def test_v_norm_uniform_dilation(self):
        m = structured_square(3)
        c = 1.3
        morph = MorphField(np.zeros(0), np.zeros((m.n_nodes, 2)),
                           np.tile(np.eye(2) / c, (m.n_points, 1, 1)), np.full(m.n_points, c * c))
        u = np.column_stack([m.nodes[:, 0], np.zeros(m.n_nodes)])
        # mass term scales with c^2, the gradient term is invariant under dilation in 2-D
        mass = np.sum(m.quadrature.weights.ravel() * np.einsum("qa,ea->eq", m.quadrature.N,
                                                                   u[m.elements, 0]).ravel() ** 2)
        assert v_norm(m, morph, u) ** 2 == pytest.approx(c * c * mass + 1.0, rel=1e-12)


class TestPod:
    def test_single_snapshot(self, square):
        m, G = square
        s = np.random.default_rng(1).normal(size=(2 * m.n_nodes, 1))
        b = pod(s, G, n_modes=1)
        assert np.allclose(b.modes[:, 0] * np.sign(b.modes[0, 0] * s[0, 0]),
                           s[:, 0] / np.sqrt(s[:, 0] @ G @ s[:, 0]), atol=1e-12)
        assert np.abs(b.reconstruct(b.project(G, s)) - s).max() < 1e-10

    def test_orthonormal_snapshots_span(self, square):
        m, G = square
        S = orthonormalize(np.random.default_rng(2).normal(size=(2 * m.n_nodes, 4)), G)
        b = pod(S, G, n_modes=4)
        P1 = S @ inner(G, S, np.eye(2 * m.n_nodes))
        P2 = b.modes @ inner(G, b.modes, np.eye(2 * m.n_nodes))
        assert np.abs(P1 - P2).max() < 1e-8

    def test_rank_three(self, square):
        m, G = square
        rng = np.random.default_rng(4)
        S = rng.normal(size=(2 * m.n_nodes, 3)) @ rng.normal(size=(3, 7))
        sv = _g_svd(S, G)
        b3 = pod(S, G, n_modes=3)
        assert np.abs(b3.reconstruct(b3.project(G, S)) - S).max() < 1e-8
        b2 = pod(S, G, n_modes=2)
        assert _projection_error(b2.modes, G, S) == pytest.approx(sv[2], rel=1e-8)
        assert np.allclose(b3.singular_values, sv[:3], rtol=1e-10)

    def test_more_modes_than_rank(self, square):
        m, G = square
        rng = np.random.default_rng(5)
        S = rng.normal(size=(2 * m.n_nodes, 3)) @ rng.normal(size=(3, 6))
        with pytest.raises(BasisError, match="rank 3"):
            pod(S, G, n_modes=4)

    def test_energy_tolerance(self, square):
        m, G = square
        rng = np.random.default_rng(6)
        Q = orthonormalize(rng.normal(size=(2 * m.n_nodes, 3)), G)
        S = Q * np.array([10.0, 1.0, 0.01])
        assert pod(S, G, tol=1e-2).n_modes == 1   # energy is sigma^2: 100 / 101
        assert pod(S, G, tol=1e-3).n_modes == 2
        assert pod(S, G, tol=1e-7).n_modes == 3

    def test_optimal_against_random_bases(self, square):
        m, G = square
        rng = np.random.default_rng(7)
        S = rng.normal(size=(2 * m.n_nodes, 12)) * np.linspace(3, 0.1, 12)
        best = _projection_error(pod(S, G, n_modes=4).modes, G, S)
        for _ in range(10):
            rand = orthonormalize(rng.normal(size=(2 * m.n_nodes, 4)), G)
            assert best <= _projection_error(rand, G, S) + 1e-12

    def test_error_decreases_with_n(self, square):
        m, G = square
        S = np.random.default_rng(8).normal(size=(2 * m.n_nodes, 8))
        errs = [_projection_error(pod(S, G, n_modes=n).modes, G, S) for n in range(1, 9)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))

    @settings(max_examples=25, deadline=None)
    @given(n_rows=st.integers(8, 40), n_cols=st.integers(1, 8), seed=st.integers(0, 10_000),
           diag=st.booleans())
    def test_orthonormal_and_sorted(self, n_rows, n_cols, seed, diag):
        rng = np.random.default_rng(seed)
        S = rng.normal(size=(n_rows, n_cols))
        if diag:
            G = rng.uniform(0.1, 2.0, size=n_rows)
        else:
            X = rng.normal(size=(n_rows, n_rows))
            G = X @ X.T + n_rows * np.eye(n_rows)
        n = min(n_rows, n_cols)
        b = pod(S, G, n_modes=n)
        assert np.abs(inner(G, b.modes, b.modes) - np.eye(n)).max() < 1e-8
        assert np.all(np.diff(b.singular_values) <= 1e-12 * b.singular_values[0])

    def test_l2_kind_from_snapshot_set(self):
        m = structured_square(2)
        S = np.random.default_rng(9).normal(size=(4 * m.n_points, 5))
        snaps = SnapshotSet(S, np.zeros(5), np.arange(5), "weighted_stress")
        b = pod(snaps, l2_gram(m), n_modes=5)
        assert b.gram_kind == "L2"
        assert np.abs(inner(l2_gram(m), b.modes, b.modes) - np.eye(5)).max() < 1e-8

    def test_requires_one_truncation_rule(self, square):
        with pytest.raises(BasisError):
            pod(np.ones((2 * square[0].n_nodes, 2)), square[1])


class TestSnapshotSet:
    def test_rejects_non_finite(self):
        with pytest.raises(BasisError, match="non-finite"):
            SnapshotSet(np.array([[1.0, np.nan]]), [0, 0], [1, 2], "displacement")

    def test_provenance_length(self):
        with pytest.raises(BasisError, match="provenance"):
            SnapshotSet(np.ones((3, 2)), [0], [1, 2], "displacement")

    def test_concatenate_kinds(self):
        a = SnapshotSet(np.ones((3, 1)), [0], [1], "displacement")
        b = SnapshotSet(np.ones((3, 1)), [1], [1], "weighted_stress")
        with pytest.raises(BasisError, match="mix"):
            SnapshotSet.concatenate([a, b])
        c = SnapshotSet.concatenate([a, a])
        assert c.n_snapshots == 2


class TestFullBasis:
    def test_spans_periodic_space(self):
        m = composite_rve(h=0.15)
        pairing = periodic_pairs(m)
        G = h1_gram(m)
        b = full_basis(pairing, G)
        assert b.n_modes == pairing.n_free
        assert np.abs(inner(G, b.modes, b.modes) - np.eye(b.n_modes)).max() < 1e-8
        # every mode is a periodic field: restrict then expand is the identity
        col = b.modes[:, 5]
        assert np.allclose(pairing.expand(pairing.restrict(col)), col, atol=1e-14)

    def test_mode_gradients_subset(self):
        m = structured_square(2)
        modes = np.random.default_rng(1).normal(size=(2 * m.n_nodes, 3))
        full = mode_gradients(m, modes)
        ids = np.array([0, 5, 11])
        assert np.array_equal(mode_gradients(m, modes, ids), full[:, ids])
