"""Projections onto the equal-row-norm set and the fixed-nuclear-norm rank set.

``L(r_hat, ell)`` holds p x p matrices of rank at most ``r_hat`` whose nuclear
norm is exactly ``ell``; ``B`` holds matrices whose rows all share one nonzero
l2 norm.  Both are nonconvex, so the projection onto their intersection is
computed with a Dykstra-style splitting (``project_intersection``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, EmptyInput, SvdFailure, UnsortedInput, ZeroRow


@dataclass(frozen=True)
class ConstraintSpec:
    p: int
    r_hat: int
    ell: float

    def __post_init__(self):
        if not 1 <= self.r_hat <= self.p:
            raise ValueError(f"r_hat must lie in [1, {self.p}], got {self.r_hat}")
        if not self.ell > 0:
            raise ValueError("ell must be positive")

    def default_tol(self) -> float:
        return 1e-6 * self.ell

    def in_L(self, x: np.ndarray, tol: float | None = None) -> bool:
        tol = self.default_tol() if tol is None else tol
        sv = np.linalg.svd(x, compute_uv=False)
        rank = int(np.sum(sv > tol))
        return rank <= self.r_hat and abs(sv.sum() - self.ell) <= tol

    def in_B(self, x: np.ndarray, tol: float | None = None) -> bool:
        tol = self.default_tol() if tol is None else tol
        norms = np.linalg.norm(x, axis=1)
        return bool(norms.min() > tol and norms.max() - norms.min() <= tol)

    def feasibility(self, x: np.ndarray) -> tuple[float, float]:
        """(L residual, B residual): nuclear-norm gap plus tail singular mass, row-norm spread."""
        sv = np.linalg.svd(x, compute_uv=False)
        res_l = abs(sv.sum() - self.ell) + sv[self.r_hat:].sum()
        norms = np.linalg.norm(x, axis=1)
        return float(res_l), float(norms.max() - norms.min())


@dataclass
class IntersectionState:
    phi_L: np.ndarray
    phi_B: np.ndarray
    gamma_BL: np.ndarray
    sweeps: int = 0
    converged: bool = False
    residual: float = np.inf


def simplex_rank_project(theta: np.ndarray, ell: float, r_hat: int) -> np.ndarray:
    """Minimise sum(d_i^2 - 2 theta_i d_i) over d >= 0, sum(d) = ell, ||d||_0 <= r_hat.

    ``theta`` must be nonincreasing and nonnegative (singular values).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.size == 0:
        raise EmptyInput("theta is empty")
    if np.any(np.diff(theta) > 1e-12 * max(1.0, theta[0])) or theta[-1] < 0:
        raise UnsortedInput("theta must be sorted nonincreasing and nonnegative")
    r = min(int(r_hat), theta.size)
    head = theta[:r]
    cs = (np.cumsum(head) - ell) / np.arange(1, r + 1)
    gamma = int(np.flatnonzero(cs <= head)[-1]) + 1
    d = np.zeros_like(theta)
    d[:gamma] = np.maximum(head[:gamma] - cs[gamma - 1], 0.0)
    return d


def _svd(x: np.ndarray):
    try:
        return np.linalg.svd(x)
    except np.linalg.LinAlgError as exc:
        raise SvdFailure(str(exc)) from exc


def project_L(x: np.ndarray, spec: ConstraintSpec) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise SvdFailure("non-finite input to project_L")
    if not np.any(x):
        warnings.warn("projecting the zero matrix; returning a fixed feasible point", DegenerateInput, stacklevel=2)
        d = np.zeros(spec.p)
        d[: spec.r_hat] = spec.ell / spec.r_hat
        return np.diag(d)
    u, theta, vt = _svd(x)
    d = simplex_rank_project(theta, spec.ell, spec.r_hat)
    k = int(np.count_nonzero(d))
    return (u[:, :k] * d[:k]) @ vt[:k]


def project_B(x: np.ndarray, zero_row_scale: float | None = None) -> np.ndarray:
    """Rescale every row to the mean row norm.

    Zero rows raise ``ZeroRow`` unless ``zero_row_scale`` is given, in which case
    they are replaced by ``zero_row_scale * e_1`` before projecting.
    """
    x = np.array(x, dtype=float)
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if np.any(zero):
        if zero_row_scale is None:
            raise ZeroRow(f"rows {np.flatnonzero(zero).tolist()} have zero norm")
        warnings.warn("zero rows perturbed before projection onto B", DegenerateInput, stacklevel=2)
        x[zero] = 0.0
        x[zero, 0] = zero_row_scale
        norms = np.linalg.norm(x, axis=1)
    return x * (norms.mean() / norms)[:, None]


def fallback_feasible(spec: ConstraintSpec) -> np.ndarray:
    """Deterministic rank-one point of B and L: every row equals ell/sqrt(p) * e_1."""
    out = np.zeros((spec.p, spec.p))
    out[:, 0] = spec.ell / np.sqrt(spec.p)
    return out


def _polish(phi: np.ndarray, spec: ConstraintSpec, tol: float, max_sweeps: int) -> np.ndarray:
    # plain alternating projections; locally convergent at linearly regular points
    scale = 1e-12 * spec.ell
    for _ in range(max_sweeps):
        phi_b = project_B(phi, scale)
        phi_l = project_L(phi_b, spec)
        if np.linalg.norm(phi_l - project_B(phi_l, scale)) <= tol * spec.ell:
            return phi_l
        phi = phi_l
    return phi


def project_intersection(
    phi0: np.ndarray,
    spec: ConstraintSpec,
    warm: IntersectionState | None = None,
    max_sweeps: int = 500,
    tol: float = 1e-8,
) -> tuple[np.ndarray, IntersectionState]:
    """Find a point of B and L close to ``phi0`` by the splitting

    phi_L <- P_L((phi0 + phi_B + gamma) / 2)
    phi_B <- P_B(phi_L - gamma)
    gamma <- gamma + phi_B - phi_L

    stopping when ||phi_L - phi_B||_F / ell <= tol.  Returns ``phi_L``, which is
    exactly in L and in B up to the stopping tolerance.
    """
    phi0 = np.asarray(phi0, dtype=float)
    if not np.all(np.isfinite(phi0)):
        raise SvdFailure("non-finite input to project_intersection")
    scale = 1e-12 * spec.ell
    if not np.any(phi0):
        warnings.warn("projecting the zero matrix; returning a fixed feasible point", DegenerateInput, stacklevel=2)
        point = fallback_feasible(spec)
        return point, IntersectionState(point, point.copy(), np.zeros_like(point), 0, True, 0.0)

    if warm is None:
        phi_l = project_L(phi0, spec)
        phi_b = project_B(phi_l, scale)
        gamma = np.zeros_like(phi0)
    else:
        if warm.phi_B.shape != phi0.shape:
            raise ValueError("warm state does not match phi0")
        phi_l, phi_b, gamma = warm.phi_L, warm.phi_B, warm.gamma_BL

    best, best_res = phi_l, np.inf
    residual = np.inf
    k = 0
    for k in range(1, max_sweeps + 1):
        phi_l = project_L(0.5 * (phi0 + phi_b + gamma), spec)
        phi_b = project_B(phi_l - gamma, scale)
        diff = phi_b - phi_l
        gamma = gamma + diff
        residual = np.linalg.norm(diff) / spec.ell
        if residual < best_res:
            best, best_res = phi_l, residual
        if residual <= tol:
            break

    state = IntersectionState(phi_l, phi_b, gamma, k, residual <= tol, residual)
    if residual <= tol:
        return phi_l, state
    polished = _polish(best, spec, tol, max_sweeps)
    _, res_b = spec.feasibility(polished)
    state.residual = res_b / spec.ell
    state.converged = False
    return polished, state
