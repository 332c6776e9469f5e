"""Full-order periodic RVE solver on the parent mesh.

The microscopic deformation gradient at a quadrature point is
``F = Fbar + grad_x w`` with ``grad_x w = (dw/dX^p) F_mu^-1``; integrals over
the morphed domain are evaluated on the parent mesh with the measure
``w_hat |det F_mu|``.  Periodicity is imposed by master/slave elimination.
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .exceptions import ConvergenceError, MaterialError, PodecmError
from .material import MaterialState, PointParams, large_strain_update
from .meshkit import periodic_pairs
from .morph import MorphField, Morpher, element_dofs


# ---------------------------------------------------------------------------
# Load schedules
# ---------------------------------------------------------------------------

def stretch_matrix(uxx, uyy, uxy):
    return np.array([[uxx, uxy], [uxy, uyy]], dtype=float)


@dataclass(frozen=True)
class MacroLoad:
    """Macroscopic deformation gradients per load step; step 0 is identity."""

    F: np.ndarray      # (K + 1, 2, 2)

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        if F.ndim != 3 or F.shape[1:] != (2, 2):
            raise PodecmError(f"load must be (K+1, 2, 2), got {F.shape}")
        if not np.allclose(F[0], np.eye(2), atol=0):
            raise PodecmError("load step 0 must be the identity deformation")
        det = np.linalg.det(F)
        if np.any(det <= 0):
            raise PodecmError(f"det Fbar <= 0 at load step {int(np.argmin(det))}")
        object.__setattr__(self, "F", F)

    @property
    def n_steps(self):
        """Number of load increments ``K``."""
        return len(self.F) - 1

    @classmethod
    def from_scale(cls, U, scale):
        """``Fbar_k = I + s_k (U - I)``."""
        U = np.asarray(U, dtype=float)
        s = np.asarray(scale, dtype=float)
        return cls(np.eye(2) + s[:, None, None] * (U - np.eye(2)))

    @classmethod
    def triangle_wave(cls, U, K=40):
        """0 -> U over K/4 steps, U -> reflected U over K/2, back to 0 over K/4."""
        if K % 4:
            raise PodecmError(f"triangle wave needs K divisible by 4, got {K}")
        k = np.arange(K + 1)
        q = K // 4
        s = np.where(k <= q, k / q, np.where(k <= 3 * q, 1 - (k - q) / q, -1 + (k - 3 * q) / q))
        return cls.from_scale(U, s)

    @classmethod
    def load_unload(cls, U, n_up=25, n_down=25):
        """0 -> U over ``n_up`` steps, back to 0 over ``n_down`` steps."""
        s = np.concatenate([np.arange(n_up + 1) / n_up, 1 - np.arange(1, n_down + 1) / n_down])
        return cls.from_scale(U, s)

    @classmethod
    def monotonic(cls, U, K):
        return cls.from_scale(U, np.arange(K + 1) / K)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def factorize(K):
    """Sparse LU with a symmetric-pattern ordering (K is structurally symmetric)."""
    return splu(K, permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True))


def gradient_operator(G):
    """``B`` with ``grad w (flattened ij -> 2i+j) = B @ w_e`` for element DOFs ``2a+i``."""
    lead = G.shape[:-2]
    nen = G.shape[-2]
    B = np.zeros(lead + (4, 2 * nen))
    for i in range(2):
        for j in range(2):
            B[..., 2 * i + j, i::2] = G[..., :, j]
    return B


class ReducedAssembler:
    """Scatter element contributions into the periodic (reduced) system."""

    def __init__(self, elements, dof_map, n_free):
        edofs = dof_map[element_dofs(elements)]                       # (ne, nd)
        nd = edofs.shape[1]
        self.edofs = edofs
        self.n_free = n_free
        rows = np.repeat(edofs, nd, axis=1).ravel()
        cols = np.tile(edofs, (1, nd)).ravel()
        self._kmask = (rows >= 0) & (cols >= 0)
        self._rows, self._cols = rows[self._kmask], cols[self._kmask]
        self._vmask = edofs.ravel() >= 0
        self._vidx = edofs.ravel()[self._vmask]

    def vector(self, fe):
        """``fe`` of shape (ne, nd) or (ne, nd, m)."""
        flat = fe.reshape(fe.shape[0] * fe.shape[1], -1)[self._vmask]
        out = np.zeros((self.n_free, flat.shape[1]))
        np.add.at(out, self._vidx, flat)
        return out[:, 0] if fe.ndim == 2 else out

    def matrix(self, Ke):
        K = sp.csc_matrix((Ke.ravel()[self._kmask], (self._rows, self._cols)),
                          shape=(self.n_free, self.n_free))
        K.sum_duplicates()
        return K


@dataclass
class PointResponse:
    """Material response at all quadrature points for one iterate."""

    F: np.ndarray
    P: np.ndarray
    A: Optional[np.ndarray]
    state: MaterialState
    mises: np.ndarray
    dgamma: np.ndarray


@dataclass
class StepResult:
    """Converged increment of an RVE solve."""

    w: np.ndarray                 # (n_nodes, 2) full periodic fluctuation
    P_bar: np.ndarray             # (2, 2)
    state: MaterialState
    response: PointResponse
    iterations: int
    history: list
    K: sp.csc_matrix = field(repr=False)
    _lu: object = field(default=None, repr=False)

    def factor(self):
        if self._lu is None:
            self._lu = factorize(self.K)
        return self._lu


class RveProblem:
    """RVE problem for one parameter value (morph fixed).

    Parameters
    ----------
    mesh : Mesh
    pairing : PeriodicPairing
    morph : MorphField
        Morph data at all quadrature points.
    params : PointParams
        Per-quadrature-point material parameters.
    """

    def __init__(self, mesh, pairing, morph, params, assembler=None):
        self.mesh = mesh
        self.pairing = pairing
        self.morph = morph
        self.params = params
        qd = mesh.quadrature
        ne, nq = qd.detJ.shape
        if morph.F_inv.shape[0] != ne * nq or len(params) != ne * nq:
            raise PodecmError("morph field and parameters must cover all quadrature points")
        Finv = morph.F_inv.reshape(ne, nq, 2, 2)
        self.G = np.einsum("eqaj,eqji->eqai", qd.dNdX, Finv)          # spatial gradients
        self.B = gradient_operator(self.G)                             # (ne, nq, 4, 2 nen)
        self.wt = qd.weights * np.abs(morph.det.reshape(ne, nq))
        self.volume = mesh.box_area
        self.asm = assembler or ReducedAssembler(mesh.elements, pairing.dof_map, pairing.n_free)
        self.n_points = ne * nq

    # -- kinematics ---------------------------------------------------------
    def deformation(self, Fbar, w):
        grad = np.einsum("eai,eqaj->eqij", w[self.mesh.elements], self.G)
        return (np.asarray(Fbar) + grad).reshape(-1, 2, 2)

    def respond(self, Fbar, w, state, tangent=True):
        F = self.deformation(Fbar, w)
        u = large_strain_update(F, state, self.params, tangent=tangent)
        return PointResponse(F, u.P, u.A, u.state, u.mises, u.dgamma)

    # -- assembly -----------------------------------------------------------
    def _shape(self, arr):
        ne, nq = self.wt.shape
        return arr.reshape((ne, nq) + arr.shape[1:])

    def element_forces(self, P):
        BtP = np.matmul(np.swapaxes(self.B, -1, -2), self._shape(P).reshape(*self.wt.shape, 4, 1))
        return np.einsum("eq,eqd->ed", self.wt, BtP[..., 0])

    def element_stiffness(self, A):
        A4 = self._shape(A).reshape(*self.wt.shape, 4, 4)
        BtAB = np.swapaxes(self.B, -1, -2) @ (A4 @ self.B)
        return np.einsum("eq,eqij->eij", self.wt, BtAB)

    def assemble(self, Fbar, w, state, tangent=True):
        """Reduced residual ``f`` and stiffness ``K`` (None if not requested)."""
        resp = self.respond(Fbar, w, state, tangent)
        f = self.asm.vector(self.element_forces(resp.P))
        K = self.asm.matrix(self.element_stiffness(resp.A)) if tangent else None
        return f, K, resp

    def effective_stress(self, P):
        return np.einsum("eq,eqij->ij", self.wt, self._shape(P)) / self.volume

    # -- Newton ---------------------------------------------------------------
    def solve_increment(self, Fbar, state, w0=None, rtol=1e-8, atol=1e-12, max_iter=25):
        """Newton solve for one load increment from the committed ``state``.

        Raises
        ------
        ConvergenceError
            After ``max_iter`` iterations without reaching the tolerance.
        """
        w = np.zeros((self.mesh.n_nodes, 2)) if w0 is None else np.array(w0, dtype=float)
        f, K, resp = self.assemble(Fbar, w, state)
        norm = float(np.linalg.norm(f))
        history = [norm]
        tol = max(rtol * norm, atol)
        for it in range(max_iter + 1):
            if norm <= tol:
                return StepResult(w, self.effective_stress(resp.P), resp.state, resp, it, history, K)
            if it == max_iter:
                break
            dw = self.pairing.expand(factorize(K).solve(-f)).reshape(-1, 2)
            w, f, K, resp = self._line_search(Fbar, w, dw, state, norm)
            norm = float(np.linalg.norm(f))
            history.append(norm)
        raise ConvergenceError(f"Newton did not converge in {max_iter} iterations "
                               f"(residual {history[-1]:.3e}, tolerance {tol:.3e})", history=history)

    def _line_search(self, Fbar, w, dw, state, norm, max_halvings=8):
        # halve the step while it inverts a material point or fails to reduce the residual;
        # the reduction test breaks elastic/plastic switching cycles
        best = None
        alpha = 1.0
        for _ in range(max_halvings):
            trial = w + alpha * dw
            F = self.deformation(Fbar, trial)
            det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
            if np.all(det > 0):
                f, K, resp = self.assemble(Fbar, trial, state)
                n = float(np.linalg.norm(f))
                if n <= (1.0 - 1e-4 * alpha) * norm:
                    return trial, f, K, resp
                if best is None or n < best[0]:
                    best = (n, trial, f, K, resp)
            alpha *= 0.5
        if best is None:
            raise MaterialError("Newton update inverts material points even after backtracking")
        return best[1:]

    # -- effective stiffness --------------------------------------------------
    def effective_stiffness(self, step):
        """``Abar = dPbar/dFbar`` from the converged ``step`` via tangent solves."""
        A = self._shape(step.response.A)                                # (ne,nq,2,2,2,2)
        # rhs_kl = -df/dFbar_kl ; df_{a i}/dFbar_kl = sum_q wt A_ijkl G_aj
        BtA = np.swapaxes(self.B, -1, -2) @ A.reshape(*self.wt.shape, 4, 4)
        dfe = np.einsum("eq,eqdk->edk", self.wt, BtA)
        rhs = -self.asm.vector(dfe)
        q = self.pairing.expand(step.factor().solve(rhs)).reshape(-1, 2, 2, 2)   # (n, m, k, l)
        gq = np.einsum("eamkl,eqan->eqmnkl", q[self.mesh.elements], self.G)
        eye = np.einsum("mk,nl->mnkl", np.eye(2), np.eye(2))
        return np.einsum("eq,eqijmn,eqmnkl->ijkl", self.wt, A, eye + gq) / self.volume


# ---------------------------------------------------------------------------
# Whole-history solves
# ---------------------------------------------------------------------------

@dataclass
class RveSolution:
    """Per-step results of a load history."""

    mu: np.ndarray
    w: np.ndarray             # (K+1, n_nodes, 2)
    P_bar: np.ndarray         # (K+1, 2, 2)
    iterations: np.ndarray    # (K+1,)
    mises_avg: np.ndarray     # (K+1,) volume average of the point von Mises norm
    A_bar: dict               # step -> (2,2,2,2)
    point_stress: Optional[np.ndarray] = None   # (K+1, Qhat, 2, 2)
    state: Optional[MaterialState] = None
    wall_time: float = 0.0


def run_history(problem, load, rtol=1e-8, atol=1e-12, max_iter=25, stiffness_steps=(),
                keep_point_stress=False, mu=()):
    """Drive an :class:`RveProblem` through a :class:`MacroLoad`."""
    t0 = time.perf_counter()
    n = problem.mesh.n_nodes
    K = load.n_steps
    state = MaterialState.initial(problem.n_points)
    w = np.zeros((n, 2))
    W = np.zeros((K + 1, n, 2))
    Pb = np.zeros((K + 1, 2, 2))
    iters = np.zeros(K + 1, dtype=int)
    mises = np.zeros(K + 1)
    Ab = {}
    pstress = np.zeros((K + 1, problem.n_points, 2, 2)) if keep_point_stress else None
    stiff = set(int(s) for s in stiffness_steps)
    for k in range(K + 1):
        try:
            step = problem.solve_increment(load.F[k], state, w, rtol, atol, max_iter)
        except ConvergenceError as exc:
            raise ConvergenceError(f"load step {k}: {exc}", step=k, history=exc.history) from exc
        except MaterialError as exc:
            raise MaterialError(f"load step {k}: {exc}") from exc
        w, state = step.w, step.state
        W[k], Pb[k], iters[k] = w, step.P_bar, step.iterations
        mises[k] = np.sum(problem.wt.ravel() * step.response.mises) / problem.wt.sum()
        if pstress is not None:
            pstress[k] = step.response.P
        if k in stiff:
            Ab[k] = problem.effective_stiffness(step)
    return RveSolution(np.asarray(mu, float), W, Pb, iters, mises, Ab, pstress, state,
                       time.perf_counter() - t0)


class RveModel:
    """Parent mesh, pairing, morpher and materials: builds problems per ``mu``.

    Parameters
    ----------
    mesh : Mesh
    parameterization : Parameterization
    materials : dict
        ``{region_tag: PlasticityParams}``.
    """

    def __init__(self, mesh, parameterization, materials):
        self.mesh = mesh
        self.materials = dict(materials)
        self.pairing = periodic_pairs(mesh)
        self.morpher = Morpher(mesh, parameterization)
        self.params = PointParams.from_regions(self.materials, mesh.point_regions)
        self.assembler = ReducedAssembler(mesh.elements, self.pairing.dof_map, self.pairing.n_free)

    @property
    def parameterization(self):
        return self.morpher.param

    def problem(self, mu, morph=None, params=None):
        morph = morph if morph is not None else self.morpher.solve(mu)
        return RveProblem(self.mesh, self.pairing, morph, params or self.params, self.assembler)

    def identity_problem(self, params=None):
        m = MorphField.identity(self.mesh.n_nodes, self.mesh.n_points)
        return RveProblem(self.mesh, self.pairing, m, params or self.params, self.assembler)

    def solve(self, mu, load, **kw):
        return run_history(self.problem(mu), load, mu=mu, **kw)

    def sensitivity(self, mu, load, h, **kw):
        """Central-difference ``dPbar/dmu`` per step, shape (K+1, n_params, 2, 2)."""
        return fd_sensitivity(lambda m: self.solve(m, load, **kw).P_bar, self.parameterization, mu, h)


def fd_sensitivity(solve_pbar, parameterization, mu, h):
    """Central (one-sided at bounds) differences of a ``mu -> Pbar history`` map."""
    if not h > 0:
        raise PodecmError(f"difference step must be positive, got {h}")
    mu = parameterization.check(mu)
    out = []
    for k, (lo, hi) in enumerate(parameterization.bounds):
        up, dn = mu.copy(), mu.copy()
        up[k] = min(mu[k] + h, max(hi, mu[k]))
        dn[k] = max(mu[k] - h, min(lo, mu[k]))
        out.append((solve_pbar(up) - solve_pbar(dn)) / (up[k] - dn[k]))
    return np.stack(out, axis=1)
