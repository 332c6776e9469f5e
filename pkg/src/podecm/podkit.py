"""Snapshot sets and proper orthogonal decomposition.

Displacement snapshots are full nodal fluctuation vectors (DOF ``2a+i``) and
are compressed in the parent-domain H1 product.  Weighted-stress snapshots
hold the four tensor components at every quadrature point (row ``4q+2i+j``)
and are compressed in the quadrature-weighted L2 product.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import BasisError

DISPLACEMENT = "displacement"
WEIGHTED_STRESS = "weighted_stress"


@dataclass(frozen=True)
class SnapshotSet:
    """Column snapshots with (sample, step) provenance per column."""

    matrix: np.ndarray
    sample: np.ndarray
    step: np.ndarray
    kind: str

    def __post_init__(self):
        S = np.asarray(self.matrix, dtype=float)
        if S.ndim != 2:
            raise BasisError(f"snapshot matrix must be 2-D, got shape {S.shape}")
        if not np.all(np.isfinite(S)):
            raise BasisError("snapshot matrix has non-finite entries")
        if self.kind not in (DISPLACEMENT, WEIGHTED_STRESS):
            raise BasisError(f"unknown snapshot kind {self.kind!r}")
        sample = np.asarray(self.sample, dtype=np.int64)
        step = np.asarray(self.step, dtype=np.int64)
        if sample.shape != (S.shape[1],) or step.shape != (S.shape[1],):
            raise BasisError("provenance tags must have one entry per column")
        object.__setattr__(self, "matrix", S)
        object.__setattr__(self, "sample", sample)
        object.__setattr__(self, "step", step)

    @property
    def n_snapshots(self):
        return self.matrix.shape[1]

    @classmethod
    def empty(cls, n_rows, kind):
        return cls(np.zeros((n_rows, 0)), np.zeros(0), np.zeros(0), kind)

    @classmethod
    def concatenate(cls, sets):
        sets = list(sets)
        if not sets:
            raise BasisError("nothing to concatenate")
        kinds = {s.kind for s in sets}
        if len(kinds) != 1:
            raise BasisError(f"cannot mix snapshot kinds {sorted(kinds)}")
        return cls(np.hstack([s.matrix for s in sets]), np.concatenate([s.sample for s in sets]),
                   np.concatenate([s.step for s in sets]), kinds.pop())


def displacement_snapshots(w_history, sample, steps):
    """Columns ``w[k].ravel()`` for the given load steps."""
    steps = np.asarray(steps, dtype=np.int64)
    cols = np.asarray(w_history)[steps].reshape(len(steps), -1).T
    return SnapshotSet(cols, np.full(len(steps), sample), steps, DISPLACEMENT)


def stress_snapshots(W_history, sample, steps):
    """Columns of weighted stresses ``(K+1, Qhat, 2, 2)`` flattened to ``4q+2i+j``."""
    steps = np.asarray(steps, dtype=np.int64)
    cols = np.asarray(W_history)[steps].reshape(len(steps), -1).T
    return SnapshotSet(cols, np.full(len(steps), sample), steps, WEIGHTED_STRESS)


# ---------------------------------------------------------------------------
# Inner products
# ---------------------------------------------------------------------------

def h1_gram(mesh, include_gradient=True):
    """Parent-domain ``int u.v + grad u : grad v`` on all nodal DOFs (CSR)."""
    qd = mesh.quadrature
    N = np.broadcast_to(qd.N, qd.dNdX.shape[:-1])                # (ne, nq, nen)
    Me = np.einsum("eq,eqa,eqb->eab", qd.weights, N, N)
    if include_gradient:
        Me = Me + np.einsum("eq,eqak,eqbk->eab", qd.weights, qd.dNdX, qd.dNdX)
    el = mesh.elements
    nen = el.shape[1]
    rows = np.repeat(el, nen, axis=1).ravel()
    cols = np.tile(el, (1, nen)).ravel()
    scalar = sp.csr_matrix((Me.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return sp.kron(scalar, sp.identity(2), format="csr")


def l2_gram(mesh):
    """Diagonal of the weighted-stress product: weights repeated per component."""
    return np.repeat(mesh.quadrature.weights.ravel(), 4)


def _apply(gram, X):
    if sp.issparse(gram):
        return gram @ X
    g = np.asarray(gram)
    return g[:, None] * X if g.ndim == 1 else g @ X


def inner(gram, X, Y):
    """``X^T G Y`` for a sparse, dense or diagonal Gram matrix."""
    return np.asarray(X).T @ _apply(gram, np.asarray(Y))


def v_norm(mesh, morph, w):
    """H1 norm of a nodal field over the morphed domain, evaluated on the parent mesh.

    ``w`` has shape (n_nodes, 2); gradients are pushed forward with
    ``F_mu^-1`` and the measure is ``w_hat |det F_mu|``.
    """
    qd = mesh.quadrature
    ne, nq = qd.detJ.shape
    we = np.asarray(w)[mesh.elements]                           # (ne, nen, 2)
    N = np.broadcast_to(qd.N, qd.dNdX.shape[:-1])
    u = np.einsum("eqa,eai->eqi", N, we)
    g = np.einsum("eai,eqaj,eqjk->eqik", we, qd.dNdX, morph.F_inv.reshape(ne, nq, 2, 2))
    wt = qd.weights * np.abs(morph.det.reshape(ne, nq))
    val = np.einsum("eq,eqi->", wt, u * u) + np.einsum("eq,eqik->", wt, g * g)
    return float(np.sqrt(max(val, 0.0)))


# ---------------------------------------------------------------------------
# POD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReducedBasis:
    """G-orthonormal modes (columns) with the singular values of the snapshot set."""

    modes: np.ndarray
    gram_kind: str
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_modes(self):
        return self.modes.shape[1]

    def truncate(self, n):
        if n > self.n_modes:
            raise BasisError(f"requested {n} modes but the basis holds {self.n_modes}")
        return ReducedBasis(self.modes[:, :n], self.gram_kind, self.singular_values)

    def project(self, gram, X):
        """Coefficients of the G-orthogonal projection of the columns of ``X``."""
        return inner(gram, self.modes, X)

    def reconstruct(self, coeffs):
        return self.modes @ coeffs


def orthonormalize(X, gram, passes=2):
    """G-orthonormalize the columns of ``X`` (Cholesky QR repeated ``passes`` times)."""
    Q = np.array(X, dtype=float)
    for _ in range(passes):
        M = inner(gram, Q, Q)
        M = 0.5 * (M + M.T)
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise BasisError("columns are numerically dependent in the given inner product") from exc
        Q = np.linalg.solve(L, Q.T).T
    return Q


def pod(snapshots, gram, n_modes=None, tol=None, rank_tol=1e-12, gram_kind=None):
    """Method-of-snapshots POD.

    Parameters
    ----------
    snapshots : SnapshotSet or ndarray
    gram : sparse matrix, dense matrix or 1-D diagonal
    n_modes : int, optional
        Explicit mode count.
    tol : float, optional
        Energy tolerance; keeps the fewest modes with captured energy ``>= 1 - tol``.
    rank_tol : float
        Eigenvalues below ``rank_tol * lambda_max`` count as zero.

    Raises
    ------
    BasisError
        When ``n_modes`` exceeds the numerical rank of the snapshots.
    """
    if (n_modes is None) == (tol is None):
        raise BasisError("give exactly one of n_modes or tol")
    if isinstance(snapshots, SnapshotSet):
        S = snapshots.matrix
        kind = gram_kind or ("H1" if snapshots.kind == DISPLACEMENT else "L2")
    else:
        S = np.asarray(snapshots, dtype=float)
        kind = gram_kind or "H1"
    if S.shape[1] == 0:
        raise BasisError("no snapshots")
    C = inner(gram, S, S)
    lam, V = np.linalg.eigh(0.5 * (C + C.T))
    order = np.argsort(lam)[::-1]
    lam, V = np.clip(lam[order], 0.0, None), V[:, order]
    rank = int(np.sum(lam > rank_tol * lam[0])) if lam[0] > 0 else 0
    if n_modes is None:
        energy = np.cumsum(lam) / lam.sum() if lam.sum() > 0 else np.ones(1)
        n_modes = int(np.searchsorted(energy, 1.0 - tol) + 1)
        n_modes = min(n_modes, rank)
    if n_modes > rank:
        raise BasisError(f"requested {n_modes} modes but the snapshots have numerical rank {rank}")
    sigma = np.sqrt(lam)
    modes = S @ (V[:, :n_modes] / sigma[:n_modes])
    modes = orthonormalize(modes, gram)
    return ReducedBasis(modes, kind, sigma[:rank])


def full_basis(pairing, gram):
    """G-orthonormal basis of the whole periodic fluctuation space."""
    n_full = 2 * pairing.n_nodes
    T = np.zeros((n_full, pairing.n_free))
    dm = pairing.dof_map
    rows = np.flatnonzero(dm >= 0)
    T[rows, dm[rows]] = 1.0
    return ReducedBasis(orthonormalize(T, gram), "H1", np.zeros(0))


def mode_gradients(mesh, modes, point_ids=None):
    """Parent gradients ``d phi_n / dX^p`` at quadrature points, shape (n, Q, 2, 2)."""
    qd = mesh.quadrature
    nq = qd.dNdX.shape[1]
    nodal = np.asarray(modes).T.reshape(modes.shape[1], mesh.n_nodes, 2)
    if point_ids is None:
        g = np.einsum("neai,eqaj->neqij", nodal[:, mesh.elements], qd.dNdX)
        return g.reshape(modes.shape[1], -1, 2, 2)
    point_ids = np.asarray(point_ids, dtype=np.int64)
    e, q = np.divmod(point_ids, nq)
    return np.einsum("npai,paj->npij", nodal[:, mesh.elements[e]], qd.dNdX[e, q])
