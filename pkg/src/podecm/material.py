"""J2 plasticity with linear isotropic hardening, small and large strain.

All routines are batched over material points: a leading axis of length ``n``
carries independent points.  Plane strain is assumed throughout; the
out-of-plane stretch of the elastic and plastic parts is tracked as a scalar
per point so that the three-dimensional J2 flow stays consistent.

The large-strain model applies the small-strain return map to the elastic
logarithmic strain ``e = 1/2 ln C_el`` in the principal frame of ``C_el``.
Stress flows back to the reference configuration as

    S_hat = sum_a sigma_a / lambda_a  N_a (x) N_a      (2nd PK, intermediate)
    P     = F_el S_hat F_pl^-T                         (1st PK)

which is the exact derivative of the stored energy ``psi(1/2 ln C_el)`` with
respect to ``F`` at frozen plastic state.  The tangent ``dP/dF`` is obtained by
central differences of this map at frozen history.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import MaterialError

I3 = np.eye(3)


@dataclass(frozen=True)
class PlasticityParams:
    """Isotropic elasto-plastic parameters (dimensionless)."""

    E: float
    nu: float
    sigma_y0: float
    H: float = 0.0

    def __post_init__(self):
        if not self.E > 0:
            raise MaterialError(f"Young's modulus must be positive, got {self.E}")
        if self.nu == 0.5:
            raise MaterialError("nu = 0.5 is incompressible; plane-strain elasticity is singular")
        if not -1.0 < self.nu < 0.5:
            raise MaterialError(f"Poisson's ratio must lie in (-1, 0.5), got {self.nu}")
        if not self.sigma_y0 > 0:
            raise MaterialError(f"initial yield stress must be positive, got {self.sigma_y0}")
        if not self.H >= 0:
            raise MaterialError(f"hardening modulus must be non-negative, got {self.H}")

    @property
    def lame(self):
        """``(lambda, mu)``."""
        lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        return lam, self.E / (2 * (1 + self.nu))

    def as_dict(self):
        return {"E": self.E, "nu": self.nu, "sigma_y0": self.sigma_y0, "H": self.H}


MATRIX = PlasticityParams(E=10.0, nu=0.3, sigma_y0=0.2, H=5.0)
INCLUSION = PlasticityParams(E=100.0, nu=0.3, sigma_y0=1e12, H=0.0)


@dataclass(frozen=True)
class PointParams:
    """Material parameters stacked per material point."""

    lam: np.ndarray
    mu: np.ndarray
    sigma_y0: np.ndarray
    H: np.ndarray

    @classmethod
    def from_regions(cls, by_region, point_regions):
        """Stack ``{region_tag: PlasticityParams}`` onto per-point arrays."""
        point_regions = np.asarray(point_regions)
        missing = set(np.unique(point_regions).tolist()) - set(by_region)
        if missing:
            raise MaterialError(f"no material parameters for region(s) {sorted(missing)}")
        cols = {k: np.empty(len(point_regions)) for k in ("lam", "mu", "sigma_y0", "H")}
        for tag, p in by_region.items():
            sel = point_regions == tag
            lam, mu = p.lame
            cols["lam"][sel] = lam
            cols["mu"][sel] = mu
            cols["sigma_y0"][sel] = p.sigma_y0
            cols["H"][sel] = p.H
        return cls(**cols)

    @classmethod
    def uniform(cls, params, n):
        return cls.from_regions({0: params}, np.zeros(n, dtype=int))

    def __len__(self):
        return len(self.mu)

    def take(self, idx):
        return PointParams(self.lam[idx], self.mu[idx], self.sigma_y0[idx], self.H[idx])

    def elastic(self):
        """Same elastic constants with yielding disabled."""
        return PointParams(self.lam, self.mu, np.full_like(self.sigma_y0, 1e300), self.H)


@dataclass(frozen=True)
class MaterialState:
    """History variables of the large-strain model at ``n`` points."""

    F_pl: np.ndarray      # (n, 2, 2) in-plane plastic deformation gradient
    F_pl_zz: np.ndarray   # (n,) out-of-plane plastic stretch
    xi: np.ndarray        # (n,) equivalent plastic strain

    @classmethod
    def initial(cls, n):
        return cls(np.tile(np.eye(2), (n, 1, 1)), np.ones(n), np.zeros(n))

    def __len__(self):
        return len(self.xi)

    def take(self, idx):
        return MaterialState(self.F_pl[idx], self.F_pl_zz[idx], self.xi[idx])


@dataclass(frozen=True)
class SmallStrainState:
    """History of the small-strain model: plastic strain (3x3) and xi."""

    eps_pl: np.ndarray    # (n, 3, 3)
    xi: np.ndarray        # (n,)

    @classmethod
    def initial(cls, n):
        return cls(np.zeros((n, 3, 3)), np.zeros(n))


class StressUpdate(NamedTuple):
    P: np.ndarray                  # (n, 2, 2)
    A: Optional[np.ndarray]        # (n, 2, 2, 2, 2) or None
    state: MaterialState
    dgamma: np.ndarray             # (n,)
    f_yield: np.ndarray            # (n,) yield function after return
    mises: np.ndarray              # (n,) von Mises norm of the (Kirchhoff-like) stress


# ---------------------------------------------------------------------------
# Elasticity
# ---------------------------------------------------------------------------

def _isotropic(lam, mu, dim):
    d = np.eye(dim)
    return (lam * np.einsum("ij,kl->ijkl", d, d)
            + mu * (np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d)))


def elastic_tangent(E, nu):
    """Plane-strain isotropic elasticity tensor, shape ``(2, 2, 2, 2)``."""
    if nu == 0.5:
        raise MaterialError("nu = 0.5 is incompressible; plane-strain elasticity is singular")
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return _isotropic(lam, mu, 2)


# ---------------------------------------------------------------------------
# Small strain
# ---------------------------------------------------------------------------

def _dev(t):
    return t - np.trace(t, axis1=-2, axis2=-1)[..., None, None] / 3 * I3


def _as_3d(strain):
    strain = np.asarray(strain, dtype=float)
    if strain.shape[-2:] == (3, 3):
        return strain
    if strain.shape[-2:] != (2, 2):
        raise MaterialError(f"strain must be (..., 2, 2) or (..., 3, 3), got {strain.shape}")
    out = np.zeros(strain.shape[:-2] + (3, 3))
    out[..., :2, :2] = strain
    return out


def j2_small_strain(strain, state, params, tol_factor=1e-10):
    """Radial return for small-strain J2 plasticity with linear hardening.

    Parameters
    ----------
    strain : array_like, shape (n, 2, 2) or (n, 3, 3)
        Total strain; a 2x2 input is padded with zero out-of-plane components.
    state : SmallStrainState
    params : PointParams

    Returns
    -------
    sigma : ndarray, shape (n, 3, 3)
    tangent : ndarray, shape (n, 3, 3, 3, 3)
        Consistent (algorithmic) tangent.
    new_state : SmallStrainState
    dgamma : ndarray, shape (n,)
    """
    eps = _as_3d(strain)
    if not np.all(np.isfinite(eps)):
        raise MaterialError("non-finite strain input")
    lam, mu, sy0, H = params.lam, params.mu, params.sigma_y0, params.H
    e_el = eps - state.eps_pl
    tr = np.trace(e_el, axis1=-2, axis2=-1)
    sig_tr = lam[:, None, None] * tr[:, None, None] * I3 + 2 * mu[:, None, None] * e_el
    s = _dev(sig_tr)
    snorm = np.sqrt(np.einsum("nij,nij->n", s, s))
    q = np.sqrt(1.5) * snorm
    f_tr = q - (sy0 + H * state.xi)
    plastic = f_tr > tol_factor * sy0
    dg = np.where(plastic, f_tr / (3 * mu + H), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        n_hat = np.where(snorm[:, None, None] > 0, s / snorm[:, None, None], 0.0)
    r = np.sqrt(1.5) * n_hat
    sigma = sig_tr - 2 * mu[:, None, None] * dg[:, None, None] * r

    kappa = lam + 2 * mu / 3
    II = 0.5 * (np.einsum("ik,jl->ijkl", I3, I3) + np.einsum("il,jk->ijkl", I3, I3))
    Idev = II - np.einsum("ij,kl->ijkl", I3, I3) / 3
    vol = np.einsum("ij,kl->ijkl", I3, I3)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(plastic, dg / np.where(q > 0, q, 1.0), 0.0)
    c_dev = 2 * mu * (1 - 3 * mu * ratio)
    c_nn = np.where(plastic, 6 * mu**2 * (ratio - 1 / (3 * mu + H)), 0.0)
    tangent = (kappa[:, None, None, None, None] * vol + c_dev[:, None, None, None, None] * Idev
               + c_nn[:, None, None, None, None] * np.einsum("nij,nkl->nijkl", n_hat, n_hat))
    new_state = SmallStrainState(state.eps_pl + dg[:, None, None] * r, state.xi + dg)
    return sigma, tangent, new_state, dg


# ---------------------------------------------------------------------------
# Large strain
# ---------------------------------------------------------------------------

def inv2(M):
    """Batched closed-form inverse and determinant of 2x2 matrices."""
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    inv = np.empty_like(M)
    inv[..., 0, 0] = M[..., 1, 1]
    inv[..., 1, 1] = M[..., 0, 0]
    inv[..., 0, 1] = -M[..., 0, 1]
    inv[..., 1, 0] = -M[..., 1, 0]
    return inv / det[..., None, None], det


def sym_eig2(C):
    """Eigenvalues ``(n, 2)`` and eigenvectors ``(n, 2, 2)`` (columns) of SPD 2x2 matrices."""
    a, b, d = C[..., 0, 0], 0.5 * (C[..., 0, 1] + C[..., 1, 0]), C[..., 1, 1]
    m = 0.5 * (a + d)
    rad = np.hypot(0.5 * (a - d), b)
    theta = 0.5 * np.arctan2(2 * b, a - d)
    c, s = np.cos(theta), np.sin(theta)
    vals = np.stack([m + rad, m - rad], axis=-1)
    vecs = np.empty(C.shape)
    vecs[..., 0, 0], vecs[..., 1, 0] = c, s
    vecs[..., 0, 1], vecs[..., 1, 1] = -s, c
    return vals, vecs


def _outer_sum(N, g0, g1):
    """``g0 N0 N0^T + g1 N1 N1^T`` for eigenvector columns ``N`` (batched)."""
    c, s = N[:, 0, 0], N[:, 1, 0]
    out = np.empty(N.shape)
    out[:, 0, 0] = g0 * c * c + g1 * s * s
    out[:, 1, 1] = g0 * s * s + g1 * c * c
    out[:, 0, 1] = out[:, 1, 0] = (g0 - g1) * c * s
    return out


def _mul(A, B):
    out = np.empty(np.broadcast_shapes(A.shape, B.shape))
    out[..., 0, 0] = A[..., 0, 0] * B[..., 0, 0] + A[..., 0, 1] * B[..., 1, 0]
    out[..., 0, 1] = A[..., 0, 0] * B[..., 0, 1] + A[..., 0, 1] * B[..., 1, 1]
    out[..., 1, 0] = A[..., 1, 0] * B[..., 0, 0] + A[..., 1, 1] * B[..., 1, 0]
    out[..., 1, 1] = A[..., 1, 0] * B[..., 0, 1] + A[..., 1, 1] * B[..., 1, 1]
    return out


def _large_strain_stress(F, state, params, tol_factor=1e-10):
    Fpl_inv, _ = inv2(state.F_pl)
    Fe = _mul(F, Fpl_inv)
    Ce = _mul(np.swapaxes(Fe, -1, -2), Fe)
    lam2, N = sym_eig2(Ce)
    if np.any(lam2 <= 0) or not np.all(np.isfinite(lam2)):
        bad = int(np.argmin(np.where(np.isfinite(lam2), lam2, -np.inf).min(axis=1)))
        raise MaterialError(f"eigen-decomposition of the elastic stretch failed at point {bad}")
    e0 = 0.5 * np.log(lam2[:, 0])
    e1 = 0.5 * np.log(lam2[:, 1])
    e2 = -np.log(state.F_pl_zz)

    lam, mu, sy0, H = params.lam, params.mu, params.sigma_y0, params.H
    tr = e0 + e1 + e2
    mean_dev = tr / 3
    # deviatoric trial stress (principal), sigma_a = lam tr + 2 mu e_a
    s0, s1, s2 = 2 * mu * (e0 - mean_dev), 2 * mu * (e1 - mean_dev), 2 * mu * (e2 - mean_dev)
    q = np.sqrt(1.5 * (s0 * s0 + s1 * s1 + s2 * s2))
    f_tr = q - (sy0 + H * state.xi)
    plastic = f_tr > tol_factor * sy0
    dg = np.where(plastic, f_tr / (3 * mu + H), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(q > 0, 1.5 / q, 0.0)
    r0, r1, r2 = scale * s0, scale * s1, scale * s2
    p = lam * tr + 2 * mu * mean_dev
    shrink = 2 * mu * dg
    sig0, sig1 = p + s0 - shrink * r0, p + s1 - shrink * r1

    # plastic update F_pl <- exp(dg r) F_pl, coaxial with C_el
    F_pl_new = _mul(_outer_sum(N, np.exp(dg * r0), np.exp(dg * r1)), state.F_pl)
    F_pl_zz_new = np.exp(dg * r2) * state.F_pl_zz
    S_hat = _outer_sum(N, sig0 * np.exp(-2 * (e0 - dg * r0)), sig1 * np.exp(-2 * (e1 - dg * r1)))
    Fpl_new_inv, _ = inv2(F_pl_new)
    P = _mul(_mul(_mul(F, Fpl_new_inv), S_hat), np.swapaxes(Fpl_new_inv, -1, -2))

    mises = np.maximum(q - 3 * mu * dg, 0.0)
    f_new = mises - (sy0 + H * (state.xi + dg))
    new_state = MaterialState(F_pl_new, F_pl_zz_new, state.xi + dg)
    return P, new_state, dg, f_new, mises


def large_strain_update(F, state, params, tangent=True, fd_step=1e-7):
    """Finite-strain stress update at a batch of material points.

    Parameters
    ----------
    F : array_like, shape (n, 2, 2)
        In-plane deformation gradient (``F_zz = 1``).
    state : MaterialState
        Committed history; it is not modified.
    params : PointParams
    tangent : bool
        Compute ``A = dP/dF`` by central differences at frozen history.
    fd_step : float
        Relative difference step, scaled by ``max(1, |F|)`` per point.

    Returns
    -------
    StressUpdate

    Raises
    ------
    MaterialError
        If ``det F <= 0`` at any point (the offending point is named).
    """
    F = np.asarray(F, dtype=float)
    detF = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(~(detF > 0)):
        bad = int(np.argmin(np.where(np.isnan(detF), -np.inf, detF)))
        raise MaterialError(f"inverted configuration: det F = {detF[bad]:.3e} at point {bad}")
    P, new_state, dg, f_new, mises = _large_strain_stress(F, state, params)
    A = None
    if tangent:
        n = len(F)
        h = fd_step * np.maximum(1.0, np.linalg.norm(F, axis=(1, 2)))
        E = np.eye(4).reshape(4, 2, 2)
        pert = h[None, :, None, None] * E[:, None]                     # (4, n, 2, 2)
        Fp = np.concatenate([F[None] + pert, F[None] - pert]).reshape(8 * n, 2, 2)
        rep = MaterialState(np.tile(state.F_pl, (8, 1, 1)), np.tile(state.F_pl_zz, 8),
                            np.tile(state.xi, 8))
        rparams = PointParams(*(np.tile(a, 8) for a in (params.lam, params.mu,
                                                        params.sigma_y0, params.H)))
        Pp = _large_strain_stress(Fp, rep, rparams)[0].reshape(2, 4, n, 2, 2)
        dP = (Pp[0] - Pp[1]) / (2 * h[None, :, None, None])               # (4, n, 2, 2)
        A = np.moveaxis(dP, 0, -1).reshape(n, 2, 2, 2, 2)
    return StressUpdate(P, A, new_state, dg, f_new, mises)


def stored_energy(F, state, params):
    """Elastic stored energy ``psi(1/2 ln C_el)`` at frozen plastic state."""
    Fpl_inv, _ = inv2(state.F_pl)
    Fe = np.asarray(F) @ Fpl_inv
    lam2, _ = sym_eig2(np.swapaxes(Fe, -1, -2) @ Fe)
    e = 0.5 * np.log(np.concatenate([lam2, (1.0 / state.F_pl_zz**2)[:, None]], axis=1))
    tr = e.sum(axis=1)
    return 0.5 * params.lam * tr**2 + params.mu * np.einsum("na,na->n", e, e)


def inverse_elastic_pullback_stress(F, state, params):
    """Alternative ``P = F_el^-1 S_hat F_pl^-T`` (elastic regime only).

    Kept to document that this placement is not the derivative of the stored
    energy; see ``docs/material.md``.
    """
    Fpl_inv, _ = inv2(state.F_pl)
    Fe = np.asarray(F) @ Fpl_inv
    lam2, N = sym_eig2(np.swapaxes(Fe, -1, -2) @ Fe)
    e = 0.5 * np.log(np.concatenate([lam2, (1.0 / state.F_pl_zz**2)[:, None]], axis=1))
    tr = e.sum(axis=1)
    sig = params.lam[:, None] * tr[:, None] + 2 * params.mu[:, None] * e
    S_hat = np.einsum("nia,na,nja->nij", N, sig[:, :2] / lam2, N)
    Fe_inv, _ = inv2(Fe)
    return Fe_inv @ S_hat @ np.swapaxes(Fpl_inv, -1, -2)
