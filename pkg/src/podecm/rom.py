"""Hyper-reduced RVE solver: POD Galerkin projection with an empirical cubature rule.

The fluctuation field is ``w = sum_n a_n phi_n``.  Forces, stiffness and the
effective quantities are evaluated only at the cubature points, where the
material history is also stored.
"""

import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .ecm import EcmRule
from .exceptions import ConvergenceError, MaterialError, PodecmError
from .material import MaterialState, PlasticityParams, PointParams, large_strain_update
from .meshkit import Ellipse, Mesh
from .microfem import fd_sensitivity
from .morph import Morpher, parameterization_from_dict
from .podkit import mode_gradients, v_norm
from .store import read_container, write_container

FORMAT = "podecm-rom"


@dataclass(frozen=True, eq=False)
class RomModel:
    """Sealed reduced model.

    Attributes
    ----------
    modes : ndarray, shape (2 n_nodes, N)
        Displacement modes on the parent mesh.
    gradients : ndarray, shape (N, Q, 2, 2)
        Parent gradients of the modes at the cubature points.
    rule : EcmRule
    params : PointParams
        Material parameters at the cubature points.
    """

    mesh: Mesh
    parameterization: object
    materials: dict
    modes: np.ndarray
    gradients: np.ndarray
    rule: EcmRule
    params: PointParams
    volume: float
    metadata: dict = field(default_factory=dict)

    @property
    def n_modes(self):
        return self.modes.shape[1]

    @property
    def n_points(self):
        return self.rule.size

    @property
    def fingerprint(self):
        return self.mesh.fingerprint

    @cached_property
    def morpher(self):
        return Morpher(self.mesh, self.parameterization)

    def morph(self, mu, full=False):
        """Morph data at the cubature points (or all points with ``full``)."""
        return self.morpher.solve(mu, None if full else self.rule.point_ids)

    def reconstruct(self, a):
        """Nodal fluctuation fields ``(..., n_nodes, 2)`` from coefficients ``(..., N)``."""
        a = np.asarray(a)
        return (a @ self.modes.T).reshape(a.shape[:-1] + (self.mesh.n_nodes, 2))


def build_rom(disp_basis, rule, mesh, parameterization, materials, metadata=None):
    """Assemble a :class:`RomModel` from a basis and a cubature rule.

    Raises
    ------
    PodecmError
        If the basis or the rule does not fit ``mesh``.
    """
    modes = np.ascontiguousarray(getattr(disp_basis, "modes", disp_basis), dtype=float)
    if modes.ndim != 2 or modes.shape[0] != 2 * mesh.n_nodes:
        raise PodecmError(f"basis has shape {modes.shape}; mesh needs {2 * mesh.n_nodes} rows")
    ids = rule.point_ids
    if len(ids) and (ids.min() < 0 or ids.max() >= mesh.n_points):
        raise PodecmError(f"cubature rule references point {int(ids.max())} but the mesh has "
                          f"{mesh.n_points} quadrature points")
    params = PointParams.from_regions(materials, mesh.point_regions).take(ids)
    grads = mode_gradients(mesh, modes, ids)
    return RomModel(mesh, parameterization, dict(materials), modes, grads, rule, params,
                    float(mesh.box_area), dict(metadata or {}))


# ---------------------------------------------------------------------------
# Online solve
# ---------------------------------------------------------------------------

@dataclass
class RomStep:
    a: np.ndarray
    P_bar: np.ndarray
    state: MaterialState
    P: np.ndarray
    A: np.ndarray
    mises: np.ndarray
    K: np.ndarray
    iterations: int
    history: list


@dataclass
class RomSolution:
    mu: np.ndarray
    a: np.ndarray               # (K+1, N)
    P_bar: np.ndarray           # (K+1, 2, 2)
    iterations: np.ndarray
    mises_avg: np.ndarray
    A_bar: dict
    state: Optional[MaterialState] = None
    wall_time: float = 0.0


class RomProblem:
    """Reduced problem for one parameter value."""

    def __init__(self, model, mu, morph=None):
        self.model = model
        self.mu = model.parameterization.check(mu)
        morph = morph if morph is not None else model.morph(self.mu)
        if len(morph.det) != model.n_points:
            raise PodecmError("morph data must be given at the cubature points")
        g = np.einsum("nqij,qjk->nqik", model.gradients, morph.F_inv)
        self.G = np.ascontiguousarray(g.reshape(model.n_modes, model.n_points, 4))
        self.wt = model.rule.weights * np.abs(morph.det)
        self.volume = model.volume

    def deformation(self, Fbar, a):
        return np.asarray(Fbar).reshape(1, 4) + np.tensordot(a, self.G, axes=(0, 0))

    def assemble(self, Fbar, a, state):
        F = self.deformation(Fbar, a).reshape(-1, 2, 2)
        upd = large_strain_update(F, state, self.model.params)
        P = upd.P.reshape(-1, 4)
        A = upd.A.reshape(-1, 4, 4)
        f = np.einsum("nqc,qc->n", self.G, self.wt[:, None] * P)
        AG = np.einsum("qcd,nqd->nqc", A, self.G) * self.wt[None, :, None]
        N = self.G.shape[0]
        K = self.G.reshape(N, -1) @ AG.reshape(N, -1).T
        return f, 0.5 * (K + K.T), upd

    def effective_stress(self, P):
        return np.einsum("q,qij->ij", self.wt, P) / self.volume

    def solve_increment(self, Fbar, state, a0, rtol=1e-8, atol=1e-12, max_iter=25):
        a = np.array(a0, dtype=float)
        f, K, upd = self.assemble(Fbar, a, state)
        norm = float(np.linalg.norm(f))
        history = [norm]
        tol = max(rtol * norm, atol)
        for it in range(max_iter + 1):
            if norm <= tol:
                return RomStep(a, self.effective_stress(upd.P), upd.state, upd.P, upd.A,
                               upd.mises, K, it, history)
            if it == max_iter:
                break
            try:
                da = np.linalg.solve(K, -f)
            except np.linalg.LinAlgError as exc:
                raise ConvergenceError(f"singular reduced stiffness: {exc}", history=history) from exc
            a, f, K, upd = self._line_search(Fbar, a, da, state, norm)
            norm = float(np.linalg.norm(f))
            history.append(norm)
        raise ConvergenceError(f"reduced Newton did not converge in {max_iter} iterations "
                               f"(residual {history[-1]:.3e}, tolerance {tol:.3e})", history=history)

    def _line_search(self, Fbar, a, da, state, norm, max_halvings=8):
        # same step control as the full solver: no inverted points, sufficient residual decrease
        best = None
        alpha = 1.0
        for _ in range(max_halvings):
            trial = a + alpha * da
            F = self.deformation(Fbar, trial)
            if np.all(F[:, 0] * F[:, 3] - F[:, 1] * F[:, 2] > 0):
                f, K, upd = self.assemble(Fbar, trial, state)
                n = float(np.linalg.norm(f))
                if n <= (1.0 - 1e-4 * alpha) * norm:
                    return trial, f, K, upd
                if best is None or n < best[0]:
                    best = (n, trial, f, K, upd)
            alpha *= 0.5
        if best is None:
            raise MaterialError("reduced Newton update inverts cubature points even after backtracking")
        return best[1:]

    def effective_stiffness(self, step):
        """``Abar`` from the converged reduced stiffness and four tangent solves."""
        A = step.A.reshape(-1, 4, 4)
        b = -np.einsum("q,nqc,qcd->nd", self.wt, self.G, A)
        try:
            q = np.linalg.solve(step.K, b)                                   # (N, 4)
        except np.linalg.LinAlgError as exc:
            raise PodecmError(f"singular reduced stiffness in tangent problem: {exc}") from exc
        dF = np.eye(4)[None] + np.einsum("nqc,nd->qcd", self.G, q)
        return (np.einsum("q,qcd,qde->ce", self.wt, A, dF) / self.volume).reshape(2, 2, 2, 2)


def rom_solve(model, mu, load, rtol=1e-8, atol=1e-12, max_iter=25, stiffness_steps=(), morph=None):
    """Run the reduced model through a :class:`MacroLoad`."""
    t0 = time.perf_counter()
    prob = RomProblem(model, mu, morph)
    K = load.n_steps
    state = MaterialState.initial(model.n_points)
    a = np.zeros(model.n_modes)
    out_a = np.zeros((K + 1, model.n_modes))
    Pb = np.zeros((K + 1, 2, 2))
    iters = np.zeros(K + 1, dtype=int)
    mises = np.zeros(K + 1)
    Ab = {}
    stiff = set(int(s) for s in stiffness_steps)
    for k in range(K + 1):
        try:
            step = prob.solve_increment(load.F[k], state, a, rtol, atol, max_iter)
        except ConvergenceError as exc:
            raise ConvergenceError(f"load step {k}: {exc}", step=k, history=exc.history) from exc
        except MaterialError as exc:
            raise MaterialError(f"load step {k}: {exc}") from exc
        a, state = step.a, step.state
        out_a[k], Pb[k], iters[k] = a, step.P_bar, step.iterations
        mises[k] = np.sum(prob.wt * step.mises) / prob.wt.sum()
        if k in stiff:
            Ab[k] = prob.effective_stiffness(step)
    return RomSolution(prob.mu, out_a, Pb, iters, mises, Ab, state, time.perf_counter() - t0)


def rom_sensitivity(model, mu, load, h, **kw):
    """Central-difference ``dPbar/dmu`` per step, shape (K+1, n_params, 2, 2)."""
    return fd_sensitivity(lambda m: rom_solve(model, m, load, **kw).P_bar, model.parameterization, mu, h)


# ---------------------------------------------------------------------------
# Error measures
# ---------------------------------------------------------------------------

def stress_error(P_rom, P_ref):
    """Summed Frobenius error of effective-stress histories relative to the reference."""
    num = np.linalg.norm(np.asarray(P_rom) - np.asarray(P_ref), axis=(-2, -1)).sum()
    den = np.linalg.norm(np.asarray(P_ref), axis=(-2, -1)).sum()
    return float(num / den) if den > 0 else float(num)


def fluctuation_error(mesh, morph, w_rom, w_ref):
    """Summed morphed-domain H1 error of fluctuation histories relative to the reference."""
    num = sum(v_norm(mesh, morph, a - b) for a, b in zip(w_rom, w_ref))
    den = sum(v_norm(mesh, morph, b) for b in w_ref)
    return float(num / den) if den > 0 else float(num)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _ellipse_rows(mesh):
    return np.array([[e.tag, e.cx, e.cy, e.a, e.b, e.angle] for e in mesh.ellipses]).reshape(-1, 6)


def save_rom(model, path):
    """Write ``model`` as a PODECM1 container; returns the file's SHA-256."""
    p = model.params
    arrays = {
        "modes": model.modes,
        "mode_gradients": model.gradients,
        "ecm_ids": model.rule.point_ids,
        "ecm_weights": model.rule.weights,
        "params": np.stack([p.lam, p.mu, p.sigma_y0, p.H], axis=1),
        "mesh_nodes": model.mesh.nodes,
        "mesh_elements": model.mesh.elements,
        "mesh_regions": model.mesh.regions,
        "mesh_boundary_nodes": model.mesh.boundary_nodes,
        "mesh_boundary_tags": model.mesh.boundary_tags,
        "mesh_ellipses": _ellipse_rows(model.mesh),
    }
    attrs = {
        "format": FORMAT,
        "fingerprint": model.fingerprint,
        "elem_kind": model.mesh.elem_kind,
        "parameterization": model.parameterization.to_dict(),
        "materials": {str(k): v.as_dict() for k, v in sorted(model.materials.items())},
        "volume": model.volume,
        "ecm_residual": model.rule.achieved_residual,
        "metadata": model.metadata,
    }
    return write_container(path, arrays, attrs)


def load_rom(path, mesh=None):
    """Read a model written by :func:`save_rom`.

    Raises
    ------
    PodecmError
        If the file is not a reduced model or the mesh fingerprint differs.
    """
    arrays, attrs = read_container(path)
    if attrs.get("format") != FORMAT:
        raise PodecmError(f"{path} is not a reduced model container")
    if mesh is None:
        ellipses = tuple(Ellipse(int(r[0]), *map(float, r[1:])) for r in arrays["mesh_ellipses"])
        mesh = Mesh(arrays["mesh_nodes"], arrays["mesh_elements"], attrs["elem_kind"],
                    arrays["mesh_regions"], arrays["mesh_boundary_nodes"],
                    arrays["mesh_boundary_tags"], ellipses)
    if mesh.fingerprint != attrs["fingerprint"]:
        raise PodecmError(f"mesh fingerprint {mesh.fingerprint[:12]} does not match the model's "
                          f"{attrs['fingerprint'][:12]}")
    prm = arrays["params"]
    rule = EcmRule(arrays["ecm_ids"], arrays["ecm_weights"], float(attrs["ecm_residual"]))
    materials = {int(k): PlasticityParams(**v) for k, v in attrs["materials"].items()}
    return RomModel(mesh, parameterization_from_dict(attrs["parameterization"]), materials,
                    arrays["modes"], arrays["mode_gradients"], rule,
                    PointParams(prm[:, 0].copy(), prm[:, 1].copy(), prm[:, 2].copy(), prm[:, 3].copy()),
                    float(attrs["volume"]), attrs["metadata"])
