"""Mesh morphing from the parent RVE to parameterized geometries.

The transformation ``Phi(X) = X + d(X)`` is the solution of a linear-elastic
problem on the parent mesh with ``d = 0`` on the outer cell boundary and ``d``
prescribed on the ellipse boundaries: a parent ellipse point at parametric
angle ``t`` is sent to the target ellipse at the same angle.  The operator is
factorized once per parent mesh and reused for every parameter value.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .exceptions import MorphError
from .material import inv2
from .meshgen import porous_axes
from .meshkit import quadrature_for


# ---------------------------------------------------------------------------
# Parameterizations
# ---------------------------------------------------------------------------

class Parameterization:
    """Maps a parameter vector to target semi-axes of every parent ellipse."""

    kind = ""
    names: tuple = ()
    bounds: tuple = ()
    parent: tuple = ()

    def target_axes(self, ellipse, mu):
        raise NotImplementedError

    def check(self, mu):
        mu = np.asarray(mu, dtype=float).reshape(-1)
        if mu.shape != (len(self.names),):
            raise MorphError(f"{self.kind} expects {len(self.names)} parameter(s) {self.names}, got {mu.tolist()}")
        return mu

    def in_bounds(self, mu, slack=0.0):
        mu = self.check(mu)
        lo, hi = np.array(self.bounds).T
        return bool(np.all(mu >= lo - slack) and np.all(mu <= hi + slack))

    def to_dict(self):
        return {"kind": self.kind, "names": list(self.names),
                "bounds": [list(b) for b in self.bounds], "parent": list(self.parent)}


class InclusionScaling(Parameterization):
    """All ellipses scaled uniformly by ``zeta`` about their centers."""

    kind = "inclusion_scaling"
    names = ("zeta",)

    def __init__(self, bounds=(0.5, 1.2)):
        self.bounds = (tuple(bounds),)
        self.parent = (1.0,)

    def target_axes(self, ellipse, mu):
        return mu[0] * ellipse.a, mu[0] * ellipse.b


class PorousEllipses(Parameterization):
    """Holes with void fraction ``v_void = 4 pi a b`` and aspect ``kappa = b / a``."""

    kind = "porous_ellipses"
    names = ("v_void", "kappa")

    def __init__(self, bounds=((0.4, 0.5), (1.01, 1.5)), parent=(0.45, 1.25)):
        self.bounds = tuple(tuple(b) for b in bounds)
        self.parent = tuple(parent)

    def target_axes(self, ellipse, mu):
        # the parent geometry fixes a/b ordering; exact parent mu gives zero data
        a, b = porous_axes(mu[0], mu[1])
        return a, b


def parameterization_from_dict(data):
    kind = data["kind"]
    if kind == InclusionScaling.kind:
        return InclusionScaling(bounds=data["bounds"][0])
    if kind == PorousEllipses.kind:
        return PorousEllipses(bounds=data["bounds"], parent=data["parent"])
    raise MorphError(f"unknown parameterization kind {kind!r}")


# ---------------------------------------------------------------------------
# Linear elasticity in Voigt form
# ---------------------------------------------------------------------------

def _voigt_b(dNdX):
    """Strain-displacement matrices ``(..., 3, 2*nen)`` for engineering shear."""
    shape = dNdX.shape[:-2]
    nen = dNdX.shape[-2]
    B = np.zeros(shape + (3, 2 * nen))
    B[..., 0, 0::2] = dNdX[..., 0]
    B[..., 1, 1::2] = dNdX[..., 1]
    B[..., 2, 0::2] = dNdX[..., 1]
    B[..., 2, 1::2] = dNdX[..., 0]
    return B


def element_dofs(elements):
    return np.stack([2 * elements, 2 * elements + 1], axis=-1).reshape(len(elements), -1)


def linear_elastic_stiffness(mesh, lam, mu):
    """Small-strain plane-strain stiffness on all nodal DOFs (CSR).

    ``lam`` and ``mu`` may be scalars or per-element arrays.
    """
    qd = mesh.quadrature
    ne = mesh.n_elements
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (ne,))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (ne,))
    D = np.zeros((ne, 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = lam + 2 * mu
    D[:, 0, 1] = D[:, 1, 0] = lam
    D[:, 2, 2] = mu
    B = _voigt_b(qd.dNdX)                                   # (ne, nq, 3, 2nen)
    Ke = np.einsum("eq,eqri,ers,eqsj->eij", qd.weights, B, D, B)
    dofs = element_dofs(mesh.elements)
    rows = np.repeat(dofs, dofs.shape[1], axis=1).ravel()
    cols = np.tile(dofs, (1, dofs.shape[1])).ravel()
    n = 2 * mesh.n_nodes
    return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))


# ---------------------------------------------------------------------------
# Morph fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MorphField:
    """Transformation data for one parameter value.

    ``F_inv`` and ``det`` are given at the quadrature points ``point_ids``
    (flattened element-major ids) or at all points when ``point_ids`` is None.
    """

    mu: np.ndarray
    d: np.ndarray              # (n_nodes, 2)
    F_inv: np.ndarray          # (nq, 2, 2)
    det: np.ndarray            # (nq,)
    point_ids: Optional[np.ndarray] = None

    @classmethod
    def identity(cls, n_nodes, n_points, mu=()):
        return cls(np.asarray(mu, float), np.zeros((n_nodes, 2)),
                   np.tile(np.eye(2), (n_points, 1, 1)), np.ones(n_points))

    def take(self, idx):
        ids = np.asarray(idx) if self.point_ids is None else self.point_ids[idx]
        return MorphField(self.mu, self.d, self.F_inv[idx], self.det[idx], ids)


class Morpher:
    """Factorized auxiliary elasticity problem on a parent mesh.

    Parameters
    ----------
    mesh : Mesh
        Parent mesh; its tagged boundary nodes carry the Dirichlet data.
    parameterization : Parameterization
    E, nu : float
        Auxiliary elastic constants.
    """

    def __init__(self, mesh, parameterization, E=1.0, nu=0.25):
        self.mesh = mesh
        self.param = parameterization
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        self.K = linear_elastic_stiffness(mesh, lam, mu)
        fixed_nodes = np.unique(mesh.boundary_nodes)
        if len(fixed_nodes) == 0:
            raise MorphError("auxiliary problem is singular: the parent mesh has no tagged boundary nodes")
        self.fixed_nodes = fixed_nodes
        fixed = np.zeros(2 * mesh.n_nodes, dtype=bool)
        fixed[2 * fixed_nodes] = fixed[2 * fixed_nodes + 1] = True
        self._fixed = fixed
        self._free = np.flatnonzero(~fixed)
        K = self.K.tocsc()
        self._K_ff = K[self._free][:, self._free].tocsc()
        self._K_fd = K[self._free][:, np.flatnonzero(fixed)].tocsr()
        self._lu = splu(self._K_ff) if len(self._free) else None

        tag_of = dict(zip(mesh.boundary_nodes.tolist(), mesh.boundary_tags.tolist()))
        ellipse_by_tag = {e.tag: e for e in mesh.ellipses}
        self._ellipse_nodes = []
        for e in mesh.ellipses:
            ids = np.array([n for n in fixed_nodes if tag_of[n] == e.tag], dtype=np.int64)
            self._ellipse_nodes.append((e, ids, e.parametric_angle(mesh.nodes[ids])))
        unknown = set(tag_of.values()) - {1} - set(ellipse_by_tag)
        if unknown:
            raise MorphError(f"boundary tags {sorted(unknown)} have no ellipse description")

    def boundary_data(self, mu):
        """Prescribed displacement ``(n_fixed, 2)`` on ``fixed_nodes``."""
        mu = self.param.check(mu)
        out = np.zeros((self.mesh.n_nodes, 2))
        for e, ids, t in self._ellipse_nodes:
            a, b = self.param.target_axes(e, mu)
            out[ids] = e.point(t, a, b) - e.point(t)
        return out[self.fixed_nodes]

    def displacement(self, values):
        """Solve for ``d`` given Dirichlet values on ``fixed_nodes``."""
        d = np.zeros(2 * self.mesh.n_nodes)
        d[self._fixed] = np.asarray(values, dtype=float).reshape(-1)
        if self._lu is not None:
            d[self._free] = self._lu.solve(-(self._K_fd @ d[self._fixed]))
        return d.reshape(-1, 2)

    def gradient_at(self, d, point_ids=None):
        """``F = I + grad d`` at the selected (or all) quadrature points."""
        qd = self.mesh.quadrature
        nq = qd.dNdX.shape[1]
        if point_ids is None:
            grad = np.einsum("eai,eqaj->eqij", d[self.mesh.elements], qd.dNdX).reshape(-1, 2, 2)
        else:
            point_ids = np.asarray(point_ids, dtype=np.int64)
            e, q = np.divmod(point_ids, nq)
            grad = np.einsum("pai,paj->pij", d[self.mesh.elements[e]], qd.dNdX[e, q])
        return np.eye(2) + grad

    def solve(self, mu, point_ids=None):
        """Morph field for ``mu``.

        Raises
        ------
        MorphError
            If ``det F_mu <= 0`` at any evaluated quadrature point.
        """
        mu = self.param.check(mu)
        d = self.displacement(self.boundary_data(mu))
        F = self.gradient_at(d, point_ids)
        F_inv, det = inv2(F)
        if np.any(~(det > 0)):
            k = int(np.argmin(np.where(np.isnan(det), -np.inf, det)))
            pid = k if point_ids is None else int(point_ids[k])
            nq = quadrature_for(self.mesh.elem_kind).size
            raise MorphError(f"element inversion under morphing: det F = {det[k]:.3e} at quadrature "
                             f"point {pid} (element {pid // nq}) for mu = {mu.tolist()}")
        ids = None if point_ids is None else np.asarray(point_ids, dtype=np.int64)
        return MorphField(mu, d, F_inv, det, ids)

    def fd_derivatives(self, mu, h, point_ids=None):
        """Finite-difference derivatives of ``F_mu^-1`` and ``det F_mu``.

        Central differences, switching to one-sided at the parameter bounds.

        Returns
        -------
        dF_inv : ndarray, shape (n_params, nq, 2, 2)
        ddet : ndarray, shape (n_params, nq)
        """
        if not h > 0:
            raise MorphError(f"difference step must be positive, got {h}")
        mu = self.param.check(mu)
        dF, dd = [], []
        for k, (lo, hi) in enumerate(self.param.bounds):
            up, dn = mu.copy(), mu.copy()
            up[k] = min(mu[k] + h, max(hi, mu[k]))
            dn[k] = max(mu[k] - h, min(lo, mu[k]))
            if up[k] == dn[k]:
                raise MorphError(f"parameter interval for {self.param.names[k]} is degenerate")
            a, b = self.solve(up, point_ids), self.solve(dn, point_ids)
            step = up[k] - dn[k]
            dF.append((a.F_inv - b.F_inv) / step)
            dd.append((a.det - b.det) / step)
        return np.stack(dF), np.stack(dd)
