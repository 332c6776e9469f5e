"""Two-scale (FE^2) driver on a rectangular macro domain.

The macro body ``[0, W] x [0, H]`` is meshed with ``quad8`` elements, fixed
on the bottom edge and compressed by a parabolic traction on the top edge.
Every macro Gauss point owns a micro engine that returns the effective
stress and stiffness for a macro deformation gradient, continuing its own
load history.

``solve_twoscale`` can write a checkpoint after every converged macro step:
the macro displacement history plus the committed micro state of every Gauss
point.  Calling it again with the same checkpoint path and schedule resumes
after the last completed step.
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import ContainerError, ConvergenceError, MaterialError, PodecmError
from .material import MaterialState
from .meshkit import rectangle_quad8
from .microfem import ReducedAssembler, factorize, gradient_operator
from .rom import RomProblem
from .store import read_container, write_container


def traction_magnitude(x, width, T_bar):
    """``T(x) = T_bar (1 - (2x/W - 1)^2)``."""
    return T_bar * (1.0 - (2.0 * np.asarray(x) / width - 1.0) ** 2)


def porous_parameter_field(x, y):
    """Geometry parameters ``(v_void, kappa)`` varying over the macro body."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return np.stack([0.4 + (0.5 - 0.4) * (1.0 - x) ** 2, 1.5 - (1.5 - 1.01) * y], axis=-1)


def load_unload_schedule(T_max=0.2, n_up=25, n_down=25):
    """Traction magnitudes ``T_bar_k`` for ``k = 0..n_up+n_down``."""
    return T_max * np.concatenate([np.arange(n_up + 1) / n_up, 1 - np.arange(1, n_down + 1) / n_down])


# ---------------------------------------------------------------------------
# Micro engines
# ---------------------------------------------------------------------------

class LinearElasticPoint:
    """Plane-strain linear law ``P = lam tr(H) I + mu (H + H^T)`` with ``H = F - I``."""

    def __init__(self, lam, mu):
        eye = np.eye(2)
        A = (lam * np.einsum("ij,kl->ijkl", eye, eye)
             + mu * (np.einsum("ik,jl->ijkl", eye, eye) + np.einsum("il,jk->ijkl", eye, eye)))
        self.A = A
        self.solves = 0

    def trial(self, Fbar):
        self.solves += 1
        return np.einsum("ijkl,kl->ij", self.A, Fbar - np.eye(2)), self.A

    def commit(self):
        pass

    def get_state(self):
        return {}

    def set_state(self, arrays):
        pass


def _state_arrays(state, field_name, value):
    return {"F_pl": state.F_pl, "F_pl_zz": state.F_pl_zz, "xi": state.xi, field_name: value}


def _state_from(arrays):
    return MaterialState(arrays["F_pl"].copy(), arrays["F_pl_zz"].copy(), arrays["xi"].copy())


class FullPoint:
    """Full-order RVE problem with its own committed history."""

    def __init__(self, problem):
        self.problem = problem
        self.state = MaterialState.initial(problem.n_points)
        self.w = np.zeros((problem.mesh.n_nodes, 2))
        self._trial = None
        self.solves = 0

    def trial(self, Fbar):
        guess = self._trial.w if self._trial is not None else self.w
        step = self.problem.solve_increment(Fbar, self.state, guess)
        self._trial = step
        self.solves += 1
        return step.P_bar, self.problem.effective_stiffness(step)

    def commit(self):
        if self._trial is not None:
            self.state, self.w = self._trial.state, self._trial.w
        self._trial = None

    def get_state(self):
        return _state_arrays(self.state, "w", self.w)

    def set_state(self, arrays):
        self.state, self.w, self._trial = _state_from(arrays), arrays["w"].copy(), None


class RomPoint:
    """Hyper-reduced RVE problem with its history at the cubature points."""

    def __init__(self, problem):
        self.problem = problem
        self.state = MaterialState.initial(problem.model.n_points)
        self.a = np.zeros(problem.model.n_modes)
        self._trial = None
        self.solves = 0

    def trial(self, Fbar):
        guess = self._trial.a if self._trial is not None else self.a
        step = self.problem.solve_increment(Fbar, self.state, guess)
        self._trial = step
        self.solves += 1
        return step.P_bar, self.problem.effective_stiffness(step)

    def commit(self):
        if self._trial is not None:
            self.state, self.a = self._trial.state, self._trial.a
        self._trial = None

    def get_state(self):
        return _state_arrays(self.state, "a", self.a)

    def set_state(self, arrays):
        self.state, self.a, self._trial = _state_from(arrays), arrays["a"].copy(), None


def linear_engine(lam, mu):
    return lambda _mu: LinearElasticPoint(lam, mu)


def full_engine(rve_model):
    return lambda mu: FullPoint(rve_model.problem(mu))


def rom_engine(rom_model):
    return lambda mu: RomPoint(RomProblem(rom_model, mu))


# ---------------------------------------------------------------------------
# Macro problem
# ---------------------------------------------------------------------------

@dataclass
class MacroProblem:
    """Macro geometry, loading and micro engines.

    Parameters
    ----------
    engine : callable
        ``engine(mu) -> point`` with ``trial(Fbar) -> (Pbar, Abar)`` and ``commit()``.
    parameter_field : callable
        ``(x, y) -> mu`` per macro Gauss point.
    """

    engine: Callable
    nx: int = 5
    ny: int = 3
    width: float = 2.0
    height: float = 1.0
    parameter_field: Callable = porous_parameter_field
    bounds: tuple = ((0.4, 0.5), (1.01, 1.5))

    def __post_init__(self):
        self.mesh = rectangle_quad8(self.nx, self.ny, self.width, self.height)
        mesh = self.mesh
        qd = mesh.quadrature
        self.B = gradient_operator(qd.dNdX)                               # (ne, nq, 4, 16)
        self.wt = qd.weights
        self.gauss_points = qd.points.reshape(-1, 2)
        self.mu = np.atleast_2d(self.parameter_field(self.gauss_points[:, 0], self.gauss_points[:, 1]))
        if self.mu.shape[0] != len(self.gauss_points):
            self.mu = self.mu.T
        fixed = np.isclose(mesh.nodes[:, 1], 0.0)
        dof_map = -np.ones(2 * mesh.n_nodes, dtype=np.int64)
        free = np.flatnonzero(~np.repeat(fixed, 2))
        dof_map[free] = np.arange(len(free))
        self.dof_map, self.free = dof_map, free
        self.asm = ReducedAssembler(mesh.elements, dof_map, len(free))
        self.top_edges = self._top_edges()
        self.extrapolated = self._check_bounds()

    def _top_edges(self):
        el = self.mesh.elements
        y = self.mesh.nodes[:, 1]
        top = np.isclose(y[el[:, 3]], self.height) & np.isclose(y[el[:, 2]], self.height)
        return el[top][:, [3, 6, 2]]                                      # left, middle, right

    def _check_bounds(self):
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.flatnonzero(np.any((self.mu < lo - 1e-12) | (self.mu > hi + 1e-12), axis=1))

    @property
    def n_gauss(self):
        return len(self.gauss_points)

    def make_points(self):
        return [self.engine(m) for m in self.mu]

    def external_force(self, T_bar):
        """Nodal forces of the downward traction ``-T(x) e_y`` on the top edge (all DOFs)."""
        f = np.zeros(2 * self.mesh.n_nodes)
        s, ws = np.polynomial.legendre.leggauss(3)
        N = np.stack([0.5 * s * (s - 1), 1 - s * s, 0.5 * s * (s + 1)], axis=1)      # (3, 3)
        for edge in self.top_edges:
            x = self.mesh.nodes[edge, 0]
            xq = N @ x
            jac = 0.5 * (x[2] - x[0])
            t = traction_magnitude(xq, self.width, T_bar)
            np.add.at(f, 2 * edge + 1, -(N * (ws * t * jac)[:, None]).sum(axis=0))
        return f

    def gradients(self, u):
        ue = u.reshape(-1, 2)[self.mesh.elements].reshape(self.mesh.n_elements, -1)
        grad = np.einsum("eqcd,ed->eqc", self.B, ue)
        return (np.eye(2).reshape(1, 1, 4) + grad).reshape(-1, 2, 2)

    def assemble(self, P, A):
        ne, nq = self.wt.shape
        P4 = P.reshape(ne, nq, 4, 1)
        A4 = A.reshape(ne, nq, 4, 4)
        Bt = np.swapaxes(self.B, -1, -2)
        fe = np.einsum("eq,eqd->ed", self.wt, (Bt @ P4)[..., 0])
        Ke = np.einsum("eq,eqij->eij", self.wt, Bt @ (A4 @ self.B))
        return self.asm.vector(fe), self.asm.matrix(Ke)

    def expand(self, u_free):
        u = np.zeros(2 * self.mesh.n_nodes)
        u[self.free] = u_free
        return u

    def compliance(self, u, T_bar):
        """``C = -int_top T(x) u_y dx``: the work of the downward traction."""
        return float(self.external_force(T_bar) @ u)

    def probe_node(self):
        """Top-edge node closest to ``x = W / 2``."""
        n = self.mesh.nodes
        top = np.flatnonzero(np.isclose(n[:, 1], self.height))
        return int(top[np.argmin(np.abs(n[top, 0] - 0.5 * self.width))])


@dataclass
class TwoScaleResult:
    T_bar: np.ndarray
    u: np.ndarray                 # (K+1, 2 n_nodes)
    compliance: np.ndarray        # (K+1,)
    probe_displacement: np.ndarray  # (K+1,) downward displacement of the top-center node
    iterations: np.ndarray
    micro_solves: int
    wall_time: float
    extrapolated_points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _trial_one(i, point, F):
    try:
        return point.trial(F)
    except (ConvergenceError, MaterialError) as exc:
        raise ConvergenceError(f"micro solve failed at macro Gauss point {i}: {exc}") from exc


def _trial_all(points, F, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(_trial_one, range(len(points)), points, F))
    return [_trial_one(i, p, f) for i, (p, f) in enumerate(zip(points, F))]


def _write_checkpoint(path, k, schedule, U, C, probe, iters, points):
    arrays = {"schedule": schedule, "u": U[:k + 1], "compliance": C[:k + 1],
              "probe": probe[:k + 1], "iterations": iters[:k + 1]}
    for i, p in enumerate(points):
        arrays.update({f"point{i}/{name}": v for name, v in p.get_state().items()})
    write_container(path, arrays, {"kind": "twoscale-checkpoint", "step": k, "n_points": len(points)})


def _read_checkpoint(path, schedule, points):
    arrays, attrs = read_container(path)
    if attrs.get("kind") != "twoscale-checkpoint":
        raise ContainerError(f"{path} is not a two-scale checkpoint")
    if attrs["n_points"] != len(points):
        raise ContainerError(f"checkpoint has {attrs['n_points']} macro Gauss points, problem has {len(points)}")
    k = int(attrs["step"])
    if not np.array_equal(arrays["schedule"], schedule):
        raise ContainerError("checkpoint was written for a different load schedule")
    for i, p in enumerate(points):
        prefix = f"point{i}/"
        p.set_state({name[len(prefix):]: v for name, v in arrays.items() if name.startswith(prefix)})
    return k, arrays


def solve_twoscale(problem, schedule, rtol=1e-6, atol=1e-12, max_iter=20, threads=1, points=None,
                   checkpoint=None):
    """Load-stepped macro Newton with persistent micro histories.

    Parameters
    ----------
    checkpoint : path, optional
        Written after every converged step.  If the file already exists, the
        solve resumes after the step it records.

    Raises
    ------
    ConvergenceError
        If a macro step or a micro solve fails; the message names the step
        and, for micro failures, the macro Gauss point.
    ContainerError
        If an existing checkpoint does not match the problem or the schedule.
    """
    t0 = time.perf_counter()
    schedule = np.asarray(schedule, dtype=float)
    points = points if points is not None else problem.make_points()
    n = 2 * problem.mesh.n_nodes
    K = len(schedule) - 1
    U = np.zeros((K + 1, n))
    C = np.zeros(K + 1)
    probe = np.zeros(K + 1)
    iters = np.zeros(K + 1, dtype=int)
    pid = problem.probe_node()
    u = np.zeros(n)
    start = 1
    if checkpoint is not None and os.path.exists(checkpoint):
        done, saved = _read_checkpoint(checkpoint, schedule, points)
        U[:done + 1], C[:done + 1] = saved["u"], saved["compliance"]
        probe[:done + 1], iters[:done + 1] = saved["probe"], saved["iterations"]
        u = U[done].copy()
        start = done + 1
    for k in range(start, K + 1):
        f_ext = problem.external_force(schedule[k])[problem.free]
        tol = None
        for it in range(max_iter + 1):
            F = problem.gradients(u)
            try:
                resp = _trial_all(points, F, threads)
            except ConvergenceError as exc:
                raise ConvergenceError(f"macro step {k}, iteration {it}: {exc}", step=k) from exc
            P = np.stack([r[0] for r in resp])
            A = np.stack([r[1] for r in resp])
            f_int, Kmat = problem.assemble(P, A)
            R = f_int - f_ext
            norm = float(np.linalg.norm(R))
            if tol is None:
                tol = max(rtol * max(np.linalg.norm(f_ext), norm), atol)
            if norm <= tol:
                break
            if it == max_iter:
                raise ConvergenceError(f"macro step {k}: Newton did not converge in {max_iter} "
                                       f"iterations (residual {norm:.3e})", step=k)
            u = u + problem.expand(factorize(Kmat).solve(-R))
        for p in points:
            p.commit()
        U[k] = u
        iters[k] = it
        C[k] = problem.compliance(u, schedule[k])
        probe[k] = -u[2 * pid + 1]
        if checkpoint is not None:
            _write_checkpoint(checkpoint, k, schedule, U, C, probe, iters, points)
    solves = int(sum(getattr(p, "solves", 0) for p in points))
    return TwoScaleResult(schedule, U, C, probe, iters, solves, time.perf_counter() - t0,
                          problem.extrapolated)


def single_scale_linear(problem, lam, mu, T_bar):
    """Reference linear-elastic solve on the macro mesh (independent Voigt assembly)."""
    from .morph import linear_elastic_stiffness

    Kfull = linear_elastic_stiffness(problem.mesh, lam, mu).tocsc()
    fr = problem.free
    u = np.zeros(2 * problem.mesh.n_nodes)
    u[fr] = factorize(Kfull[fr][:, fr].tocsc()).solve(problem.external_force(T_bar)[fr])
    return u


# ---------------------------------------------------------------------------
# Error measures
# ---------------------------------------------------------------------------

@dataclass
class ComplianceErrors:
    per_step: np.ndarray       # nan where the reference compliance vanishes
    mean: float
    excluded: np.ndarray       # step indices left out of the mean


def compliance_errors(C, C_ref, zero_tol=1e-14):
    """Relative compliance error per step and its mean over steps with nonzero reference."""
    C, C_ref = np.asarray(C, dtype=float), np.asarray(C_ref, dtype=float)
    if C.shape != C_ref.shape:
        raise PodecmError(f"step count mismatch: {C.shape} vs {C_ref.shape}")
    scale = max(np.abs(C_ref).max(), 1e-300)
    zero = np.abs(C_ref) <= zero_tol * scale
    err = np.full(C.shape, np.nan)
    err[~zero] = np.abs(C[~zero] - C_ref[~zero]) / np.abs(C_ref[~zero])
    mean = float(np.mean(err[~zero])) if np.any(~zero) else 0.0
    return ComplianceErrors(err, mean, np.flatnonzero(zero))


# ---------------------------------------------------------------------------
# Property map
# ---------------------------------------------------------------------------

@dataclass
class EffectiveProperties:
    nu: float
    E: float
    F_xx: float
    iterations: int


def effective_properties(problem, delta_uy=1e-3, tol=1e-10, max_iter=20):
    """Lateral-free compression: prescribe ``F_yy = 1 - delta_uy``, solve ``Pbar_xx = 0``.

    ``problem`` is an :class:`~podecm.microfem.RveProblem` (elastic parameters
    for a linear analysis).
    """
    state = MaterialState.initial(problem.n_points)
    x, w = 0.0, None
    for it in range(max_iter + 1):
        Fbar = np.array([[1.0 + x, 0.0], [0.0, 1.0 - delta_uy]])
        step = problem.solve_increment(Fbar, state, w, rtol=1e-12)
        w = step.w
        pxx, pyy = step.P_bar[0, 0], step.P_bar[1, 1]
        if abs(pxx) <= tol * abs(pyy):
            return EffectiveProperties(x / delta_uy, -pyy / delta_uy, 1.0 + x, it)
        A = problem.effective_stiffness(step)
        x -= pxx / A[0, 0, 0, 0]
    raise ConvergenceError(f"lateral stress did not vanish after {max_iter} iterations")


def micro_property_map(rve_model, grid, delta_uy=1e-3):
    """Effective ``(nu, E)`` over parameter points; rows ``(v_void, kappa, nu, E)``."""
    rows = []
    elastic = rve_model.params.elastic()
    for mu in np.atleast_2d(grid):
        props = effective_properties(rve_model.problem(mu, params=elastic), delta_uy)
        rows.append((*mu, props.nu, props.E))
    return np.array(rows)
