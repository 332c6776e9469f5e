"""Empirical cubature over the parent quadrature set.

The integrand matrix has one row per (displacement mode, stress mode) pair
holding ``d phi_i / dX^p : B_l`` at every parent quadrature point, plus a
row of ones so that the selected rule also reproduces the cell volume.
Optionally the four components of every stress mode are added as rows so
that the effective stress of fields in the stress span is integrated too.
Points are picked greedily by correlation with the current residual and the
weights on the selected set are refitted by non-negative least squares.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .exceptions import EcmError
from .podkit import mode_gradients

# relative residuals below this are treated as exact integration
RESIDUAL_FLOOR = 1e-13


def weighted_stress_field(P, morph):
    """``W = P F_mu^-T |det F_mu|`` at every point of ``morph``."""
    P = np.asarray(P, dtype=float)
    return np.einsum("...ik,...jk->...ij", P, morph.F_inv) * np.abs(morph.det)[..., None, None]


@dataclass(frozen=True)
class IntegrandMatrix:
    """Rows ``(i, l)`` ordered ``i * L + l``, then ``4 L`` stress rows ``(l, c)`` if
    requested; the last row is the volume row."""

    J: np.ndarray
    rhs: np.ndarray
    n_disp: int
    n_stress: int
    volume_row: bool = True
    stress_rows: bool = False

    @property
    def n_rows(self):
        return self.J.shape[0]


def build_integrand(disp_basis, stress_basis, mesh, volume_row=True, stress_rows=False):
    """Integrand samples and their exact full-quadrature integrals.

    Raises
    ------
    EcmError
        If the bases do not live on ``mesh``.
    """
    Phi = disp_basis.modes if hasattr(disp_basis, "modes") else np.asarray(disp_basis)
    B = stress_basis.modes if hasattr(stress_basis, "modes") else np.asarray(stress_basis)
    if Phi.shape[0] != 2 * mesh.n_nodes:
        raise EcmError(f"displacement modes have {Phi.shape[0]} rows, mesh has {2 * mesh.n_nodes} DOFs")
    if B.shape[0] != 4 * mesh.n_points:
        raise EcmError(f"stress modes have {B.shape[0]} rows, mesh has {4 * mesh.n_points} components")
    g = mode_gradients(mesh, Phi).reshape(Phi.shape[1], mesh.n_points, 4)    # (N, Q, 4)
    b = B.T.reshape(B.shape[1], mesh.n_points, 4)                             # (L, Q, 4)
    J = np.einsum("nqc,lqc->nlq", g, b).reshape(-1, mesh.n_points)
    if stress_rows:
        J = np.vstack([J, b.transpose(0, 2, 1).reshape(-1, mesh.n_points)])
    if volume_row:
        J = np.vstack([J, np.ones((1, mesh.n_points))])
    w = mesh.quadrature.weights.ravel()
    return IntegrandMatrix(J, J @ w, Phi.shape[1], B.shape[1], volume_row, stress_rows)


@dataclass(frozen=True)
class EcmRule:
    """Selected parent quadrature points with positive weights."""

    point_ids: np.ndarray
    weights: np.ndarray
    achieved_residual: float
    history: tuple = ()

    def __post_init__(self):
        ids = np.asarray(self.point_ids, dtype=np.int64)
        w = np.asarray(self.weights, dtype=float)
        if ids.shape != w.shape or ids.ndim != 1:
            raise EcmError("point ids and weights must be matching 1-D arrays")
        if len(np.unique(ids)) != len(ids):
            raise EcmError("duplicate point ids in cubature rule")
        if np.any(w <= 0):
            raise EcmError("cubature weights must be positive")
        object.__setattr__(self, "point_ids", ids)
        object.__setattr__(self, "weights", w)

    @property
    def size(self):
        return len(self.point_ids)

    @classmethod
    def full(cls, mesh):
        """Every parent quadrature point with its full weight."""
        return cls(np.arange(mesh.n_points), mesh.quadrature.weights.ravel().copy(), 0.0)


def rule_errors(integrand, rule):
    """Row-wise integration error of ``rule`` and its relative RMS."""
    approx = integrand.J[:, rule.point_ids] @ rule.weights
    err = approx - integrand.rhs
    return err, float(np.linalg.norm(err) / np.linalg.norm(integrand.rhs))


def _converged(err, rhs, eps, volume_row):
    scale = np.linalg.norm(rhs)
    rms = np.sqrt(np.mean(rhs ** 2))
    ok = np.linalg.norm(err) <= eps * scale and np.max(np.abs(err)) <= eps * rms
    if volume_row:
        ok = ok and abs(err[-1]) <= eps * abs(rhs[-1])
    return ok


def ecm_select(integrand, eps, max_points=None):
    """Greedy sparse positive cubature.

    Stops when the relative RMS residual over all rows, every single row
    relative to the RMS of the right-hand side, and the volume row are all
    within ``eps`` (``eps`` is clamped from below by :data:`RESIDUAL_FLOOR`).

    Raises
    ------
    EcmError
        If the greedy loop stalls above the tolerance.
    """
    if not eps > 0:
        raise EcmError(f"cubature tolerance must be positive, got {eps}")
    J, b = integrand.J, integrand.rhs
    n_rows, n_pts = J.shape
    if not np.linalg.norm(b) > 0:
        raise EcmError("integrand has zero exact integrals; nothing to fit")
    tol = max(eps, RESIDUAL_FLOOR)
    max_points = n_pts if max_points is None else int(max_points)
    norms = np.linalg.norm(J, axis=0)
    usable = norms > 0
    inv_norms = np.where(usable, 1.0 / np.where(usable, norms, 1.0), 0.0)

    selected = np.zeros(0, dtype=np.int64)
    weights = np.zeros(0)
    residual = b.copy()
    tried = np.zeros(n_pts, dtype=bool)
    history = [1.0]
    bnorm = np.linalg.norm(b)
    while not _converged(-residual, b, tol, integrand.volume_row):
        score = (J.T @ residual) * inv_norms
        score[selected] = -np.inf
        score[tried | ~usable] = -np.inf
        cand = int(np.argmax(score))
        if not score[cand] > 0 or len(selected) >= max_points:
            rel = float(np.linalg.norm(residual) / bnorm)
            raise EcmError(f"cubature stalled at relative residual {rel:.3e} with {len(selected)} "
                           f"points (tolerance {tol:.3e})")
        trial = np.append(selected, cand)
        w, _ = nnls(J[:, trial], b, maxiter=50 * len(trial) + 100)
        new_res = b - J[:, trial] @ w
        if np.linalg.norm(new_res) >= np.linalg.norm(residual) * (1 - 1e-14) and len(selected):
            tried[cand] = True
            continue
        keep = w > 0
        selected, weights, residual = trial[keep], w[keep], new_res
        tried[:] = False
        history.append(float(np.linalg.norm(residual) / bnorm))
    return EcmRule(selected, weights, history[-1], tuple(history))
