"""Multi-block ADMM for the low-rank plus sparse panel VAR.

Each entity's transition matrix is modelled as ``A_m = diag(w_m) phi + S_m``.
The augmented Lagrangian minimised here is

    G = sum_m 1/(2 T_m) ||Y_m - A_m X_m||_F^2 + eta sum_m ||S_m||_1
        + rho/2 ||phi - phi_c||_F^2 + rho <gamma, phi - phi_c>

with ``phi_c`` constrained to the intersection handled in ``projections``.
Data enter only through the cached Gram statistics of ``PanelData``.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import DegenerateRow, NonDescent, RankDeficient, SolveFailure
from .panel import PanelData
from .projections import ConstraintSpec, IntersectionState, project_intersection

log = logging.getLogger(__name__)

SPARSE_ZERO = 1e-12


@dataclass
class LsPvarState:
    w: np.ndarray  # (M, p), diagonals of W_m
    s: np.ndarray  # (M, p, p), exact zeros off the support
    phi: np.ndarray
    phi_c: np.ndarray
    gamma: np.ndarray
    inner: IntersectionState | None = None

    @property
    def M(self) -> int:
        return self.w.shape[0]

    @property
    def p(self) -> int:
        return self.w.shape[1]

    def transition(self) -> np.ndarray:
        """Stacked A_m = W_m phi + S_m, shape (M, p, p)."""
        return self.w[:, :, None] * self.phi[None] + self.s

    def copy(self) -> "LsPvarState":
        inner = None
        if self.inner is not None:
            inner = replace(
                self.inner,
                phi_L=self.inner.phi_L.copy(),
                phi_B=self.inner.phi_B.copy(),
                gamma_BL=self.inner.gamma_BL.copy(),
            )
        return LsPvarState(self.w.copy(), self.s.copy(), self.phi.copy(), self.phi_c.copy(), self.gamma.copy(), inner)

    def permuted(self, order) -> "LsPvarState":
        order = np.asarray(order)
        return LsPvarState(self.w[order], self.s[order], self.phi.copy(), self.phi_c.copy(), self.gamma.copy(), self.inner)


@dataclass(frozen=True)
class SolverConfig:
    """Tuning inputs.  ``None`` for ell / rho / kappa means "derive from (M, p)"."""

    r_hat: int
    eta: float
    ell: float | None = None
    rho: float | None = None
    kappa: float | None = None
    eps: float = 5e-6
    max_iter: int = 400_000
    lasso_sweeps: int = 1000
    lasso_tol: float = 1e-8
    inner_sweeps: int = 500
    inner_tol: float = 1e-8
    descent_tol: float = 1e-9
    primal_tol: float | None = None  # None means 10 * eps; inf disables the feasibility gate
    restart_factor: float = 5.0
    max_restarts: int = 1

    def resolve(self, M: int, p: int) -> "SolverConfig":
        ell = float(np.sqrt(self.r_hat * p)) if self.ell is None else float(self.ell)
        rho = M / 10.0 if self.rho is None else float(self.rho)
        kappa = M / rho if self.kappa is None else float(self.kappa)
        out = replace(self, ell=ell, rho=rho, kappa=kappa)
        out.validate(p)
        return out

    def validate(self, p: int | None = None) -> None:
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.kappa is not None and not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if p is not None and not 1 <= self.r_hat <= p:
            raise ValueError(f"r_hat must lie in [1, {p}]")

    def constraint(self, p: int) -> ConstraintSpec:
        return ConstraintSpec(p, self.r_hat, self.ell)


@dataclass
class TraceRecord:
    iteration: int
    G: float
    F: float
    primal_residual: float
    dw: float
    ds: float
    dphi: float
    dphi_c: float
    inner_sweeps: int
    wall_time: float


@dataclass
class SolverTrace:
    records: list[TraceRecord] = field(default_factory=list)
    G0: float = np.nan
    reason: str = ""
    converged: bool = False
    rho: float = np.nan
    kappa: float = np.nan
    restarts: int = 0
    kkt_before_refine: np.ndarray | None = None  # per-entity lasso KKT violation
    rss_before_refine: np.ndarray | None = None
    rss_after_refine: np.ndarray | None = None
    feasibility: tuple[float, float] | None = None  # (L residual, B row-norm spread) of the final phi_c

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def G(self) -> np.ndarray:
        return np.array([self.G0] + [r.G for r in self.records])


# --- objective ---------------------------------------------------------------


def entity_loss(panel: PanelData, a: np.ndarray) -> np.ndarray:
    """Per-entity ||Y_m - A_m X_m||_F^2 / T_m computed from the cached statistics."""
    quad = np.einsum("mij,mjk,mik->m", a, panel.gram, a)
    lin = np.einsum("mij,mij->m", a, panel.cross)
    return np.maximum(panel.yy.sum(axis=1) - 2.0 * lin + quad, 0.0)


def rss(state: LsPvarState, panel: PanelData) -> np.ndarray:
    """Per-entity residual sum of squares."""
    return entity_loss(panel, state.transition()) * panel.T


def evaluate_F(state: LsPvarState, panel: PanelData, eta: float) -> float:
    loss = 0.5 * entity_loss(panel, state.transition()).sum()
    return float(loss + eta * np.abs(state.s).sum())


def evaluate_G(state: LsPvarState, panel: PanelData, cfg: SolverConfig) -> float:
    diff = state.phi - state.phi_c
    return float(
        evaluate_F(state, panel, cfg.eta)
        + 0.5 * cfg.rho * np.sum(diff * diff)
        + cfg.rho * np.sum(state.gamma * diff)
    )


# --- primal blocks -----------------------------------------------------------


@numba.njit(cache=True)
def _lasso_kernel(gram, c, s, eta, sweeps, tol):
    M, p = c.shape[0], c.shape[1]
    grad = np.empty(p)
    used = 0
    for m in range(M):
        g = gram[m]
        for j in range(p):
            row = s[m, j]
            for k in range(p):
                acc = c[m, j, k]
                for i in range(p):
                    acc -= row[i] * g[i, k]
                grad[k] = acc
            for sweep in range(1, sweeps + 1):
                max_delta = 0.0
                for k in range(p):
                    d = g[k, k]
                    if d <= 0.0:
                        new = 0.0
                    else:
                        z = grad[k] + row[k] * d
                        if z > eta:
                            new = (z - eta) / d
                        elif z < -eta:
                            new = (z + eta) / d
                        else:
                            new = 0.0
                    delta = new - row[k]
                    if delta != 0.0:
                        row[k] = new
                        for i in range(p):
                            grad[i] -= delta * g[k, i]
                        # gradient units, so the tolerance does not depend on the data scale
                        if abs(delta) * d > max_delta:
                            max_delta = abs(delta) * d
                if sweep > used:
                    used = sweep
                if max_delta <= tol:
                    break
    return used


def _lasso_rows(gram, c, s0, eta, sweeps, tol):
    """Cyclic coordinate descent for every row of every entity.

    Row j of entity m minimises 1/2 s gram_m s' - s c_mj' + eta ||s||_1.
    Returns the solution and the largest number of sweeps any row used.
    """
    s = np.array(s0, dtype=np.float64, order="C")
    used = _lasso_kernel(
        np.ascontiguousarray(gram, dtype=np.float64), np.ascontiguousarray(c, dtype=np.float64), s, float(eta), int(sweeps), float(tol)
    )
    s[np.abs(s) < SPARSE_ZERO] = 0.0
    _polish_rows(gram, c, s, eta, tol)
    return s, used


def _row_violation(g, c_row, row, eta):
    grad = c_row - row @ g
    return np.where(row != 0, np.abs(grad - eta * np.sign(row)), np.maximum(np.abs(grad) - eta, 0.0))


def _polish_rows(gram, c, s, eta, tol):
    """Exact solve on the current support and signs for rows coordinate descent left short.

    Ill-conditioned grams can need far more sweeps than allowed; when the support
    is already right, the normal equations on it give the minimiser directly.  The
    solve is kept only if it satisfies every optimality condition.
    """
    grad = c - s @ gram
    viol = np.where(s != 0, np.abs(grad - eta * np.sign(s)), np.maximum(np.abs(grad) - eta, 0.0))
    for m, j in np.argwhere(viol.max(axis=2) > tol):
        row = s[m, j]
        active = row != 0
        if not active.any():
            continue
        sign = np.sign(row[active])
        g = gram[m]
        try:
            x = np.linalg.solve(g[np.ix_(active, active)], c[m, j, active] - eta * sign)
        except np.linalg.LinAlgError:
            continue
        if np.any(np.sign(x) != sign):
            continue
        cand = np.zeros_like(row)
        cand[active] = x
        if _row_violation(g, c[m, j], cand, eta).max() < viol[m, j].max():
            s[m, j] = cand


def lasso_kkt_residual(state: LsPvarState, panel: PanelData, eta: float, phi: np.ndarray | None = None) -> np.ndarray:
    """Per-entity max violation of the lasso optimality conditions for S given (w, phi).

    ``phi`` defaults to ``state.phi``; pass the basis the last (w, S) block saw to
    check that block's subproblem.
    """
    phi = state.phi if phi is None else phi
    c = panel.cross - state.w[:, :, None] * (phi[None] @ panel.gram)
    g = c - state.s @ panel.gram
    active = state.s != 0
    viol = np.where(active, np.abs(g - eta * np.sign(state.s)), np.maximum(np.abs(g) - eta, 0.0))
    return viol.reshape(state.M, -1).max(axis=1)


def update_w(state: LsPvarState, panel: PanelData) -> np.ndarray:
    phi = state.phi
    pg = phi[None] @ panel.gram  # (M, p, p): row j is phi_j gram_m
    denom = np.einsum("mjk,jk->mj", pg, phi)
    resid = panel.cross - state.s @ panel.gram
    numer = np.einsum("mjk,jk->mj", resid, phi)
    degenerate = denom <= 1e-300
    if np.any(degenerate):
        warnings.warn(f"{int(degenerate.sum())} rows with phi_j X_m = 0; weights set to 0", DegenerateRow, stacklevel=2)
    return np.where(degenerate, 0.0, numer / np.where(degenerate, 1.0, denom))


def update_ws(state: LsPvarState, panel: PanelData, cfg: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact weight update followed by a lasso update of every row of S."""
    w = update_w(state, panel)
    c = panel.cross - w[:, :, None] * (state.phi[None] @ panel.gram)
    s, _ = _lasso_rows(panel.gram, c, state.s, cfg.eta, cfg.lasso_sweeps, cfg.lasso_tol)
    return w, s


def phi_c_objective(phi_c, state: LsPvarState, cfg: SolverConfig) -> float:
    a = state.phi + state.gamma - phi_c
    b = phi_c - state.phi_c
    return 0.5 * cfg.rho * float(np.sum(a * a)) + 0.5 * cfg.kappa * cfg.rho * float(np.sum(b * b))


def update_phi_c(state: LsPvarState, cfg: SolverConfig) -> tuple[np.ndarray, IntersectionState]:
    """Proximal projection of phi + gamma onto the constraint intersection.

    The candidate is kept only if it lowers the proximal objective; otherwise the
    previous (feasible) phi_c is returned, so this block never increases G.
    """
    spec = cfg.constraint(state.p)
    phi0 = (state.phi + state.gamma + cfg.kappa * state.phi_c) / (1.0 + cfg.kappa)
    warm = None
    if state.inner is not None:
        warm = IntersectionState(state.phi_c, state.inner.phi_B, state.inner.gamma_BL)
    candidate, inner = project_intersection(phi0, spec, warm, cfg.inner_sweeps, cfg.inner_tol)
    if phi_c_objective(candidate, state, cfg) <= phi_c_objective(state.phi_c, state, cfg):
        return candidate, inner
    inner.phi_L = state.phi_c
    return state.phi_c, inner


def update_phi(state: LsPvarState, panel: PanelData, cfg: SolverConfig) -> np.ndarray:
    """Row-wise normal equations phi_j (rho I + sum_m w_mj^2 gram_m) = rhs_j."""
    p = state.p
    w = state.w
    lhs = np.einsum("mj,mab->jab", w * w, panel.gram)
    lhs[:, np.arange(p), np.arange(p)] += cfg.rho
    rhs = cfg.rho * (state.phi_c - state.gamma)
    rhs = rhs + np.einsum("mj,mjk->jk", w, panel.cross - state.s @ panel.gram)
    try:
        phi = np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(phi)):
        raise SolveFailure("non-finite solution of the phi normal equations")
    return phi


def phi_normal_residual(state: LsPvarState, panel: PanelData, cfg: SolverConfig, gamma=None) -> float:
    """Relative residual of the phi first-order condition at the stored gamma."""
    gamma = state.gamma if gamma is None else gamma
    w = state.w
    lhs = cfg.rho * state.phi + np.einsum("mj,mjk->jk", w * w, state.phi[None] @ panel.gram)
    rhs = cfg.rho * (state.phi_c - gamma) + np.einsum("mj,mjk->jk", w, panel.cross - state.s @ panel.gram)
    return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))


def update_dual(state: LsPvarState, cfg: SolverConfig | None = None) -> np.ndarray:
    return state.gamma + (state.phi - state.phi_c)


# --- initialisation ----------------------------------------------------------


def _blank_state(M: int, p: int, phi_c: np.ndarray, inner: IntersectionState) -> LsPvarState:
    return LsPvarState(
        w=np.ones((M, p)),
        s=np.zeros((M, p, p)),
        phi=phi_c.copy(),
        phi_c=phi_c,
        gamma=np.zeros((p, p)),
        inner=inner,
    )


def init_random(p: int, M: int, cfg: SolverConfig, rng_seed) -> LsPvarState:
    cfg = cfg.resolve(M, p)
    g = np.random.default_rng(rng_seed).standard_normal((p, p))
    phi_c, inner = project_intersection(g, cfg.constraint(p), None, cfg.inner_sweeps, cfg.inner_tol)
    return _blank_state(M, p, phi_c, inner)


def entity_ols(panel: PanelData) -> np.ndarray:
    """Unrestricted per-entity VAR(1) fits cross_m gram_m^{-1}; ridge only if singular."""
    out = np.empty_like(panel.cross)
    p = panel.p
    for m in range(panel.M):
        gram = panel.gram[m]
        if np.linalg.cond(gram) > 1e12:
            gram = gram + 1e-8 * np.trace(gram) / p * np.eye(p)
        out[m] = np.linalg.solve(gram, panel.cross[m].T).T
    return out


def spectral_phi(panel: PanelData, ell: float) -> np.ndarray:
    fits = entity_ols(panel)
    p = panel.p
    phi = np.empty((p, p))
    for i in range(p):
        stack = fits[:, i, :]  # (M, p)
        _, _, vt = np.linalg.svd(stack, full_matrices=False)
        v = vt[0]
        if np.sum(stack @ v) < 0:
            v = -v
        phi[i] = v
    return phi * (ell / np.linalg.svd(phi, compute_uv=False).sum())


def init_spectral(panel: PanelData, cfg: SolverConfig) -> LsPvarState:
    """Row directions shared across per-entity OLS fits, projected onto the constraints."""
    cfg = cfg.resolve(panel.M, panel.p)
    phi0 = spectral_phi(panel, cfg.ell)
    phi_c, inner = project_intersection(phi0, cfg.constraint(panel.p), None, cfg.inner_sweeps, cfg.inner_tol)
    return _blank_state(panel.M, panel.p, phi_c, inner)


# --- refinement --------------------------------------------------------------


def ols_refine(state: LsPvarState, panel: PanelData, cfg: SolverConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unpenalised least squares over (w_mj, active s_mj) with phi and the support fixed."""
    w = state.w.copy()
    s = state.s.copy()
    phi = state.phi
    for m in range(state.M):
        gram, cross = panel.gram[m], panel.cross[m]
        pg = phi @ gram
        for j in range(state.p):
            act = np.flatnonzero(s[m, j])
            k = act.size
            z = np.empty((k + 1, k + 1))
            z[0, 0] = pg[j] @ phi[j]
            z[0, 1:] = pg[j, act]
            z[1:, 0] = pg[j, act]
            z[1:, 1:] = gram[np.ix_(act, act)]
            rhs = np.empty(k + 1)
            rhs[0] = cross[j] @ phi[j]
            rhs[1:] = cross[j, act]
            if k + 1 > panel.T[m]:
                warnings.warn(f"entity {m} row {j}: {k + 1} parameters exceed T={int(panel.T[m])}", RankDeficient, stacklevel=2)
            coef, *_ = np.linalg.lstsq(z, rhs, rcond=None)
            w[m, j] = coef[0]
            row = np.zeros(state.p)
            row[act] = coef[1:]
            s[m, j] = row
    # guard: least squares can only lower the in-sample loss; keep the old row otherwise
    old = entity_row_loss(panel, state.w, state.s, phi)
    new = entity_row_loss(panel, w, s, phi)
    worse = new > old
    w[worse] = state.w[worse]
    s[worse] = state.s[worse]
    return w, s


def entity_row_loss(panel: PanelData, w, s, phi) -> np.ndarray:
    """(M, p) per-row ||y_j - a_j X||^2 / T."""
    a = w[:, :, None] * phi[None] + s
    quad = np.einsum("mij,mjk,mik->mi", a, panel.gram, a)
    lin = np.einsum("mij,mij->mi", a, panel.cross)
    return panel.yy - 2.0 * lin + quad


# --- driver ------------------------------------------------------------------


def _iterate(panel: PanelData, cfg: SolverConfig, init: LsPvarState, callback=None):
    state = init.copy()
    trace = SolverTrace(rho=cfg.rho, kappa=cfg.kappa)
    g_prev = evaluate_G(state, panel, cfg)
    trace.G0 = g_prev
    primal_tol = 10.0 * cfg.eps if cfg.primal_tol is None else cfg.primal_tol
    # round-off floor for the descent test, so G = 0 at an exact fit cannot trip it
    noise_floor = 64 * np.finfo(float).eps * 0.5 * float(panel.yy.sum())
    t0 = time.perf_counter()
    for i in range(1, cfg.max_iter + 1):
        w_old, s_old, phi_old, phic_old = state.w, state.s, state.phi, state.phi_c
        state.w, state.s = update_ws(state, panel, cfg)
        state.phi_c, state.inner = update_phi_c(state, cfg)
        state.phi = update_phi(state, panel, cfg)
        state.gamma = update_dual(state, cfg)
        g = evaluate_G(state, panel, cfg)
        rec = TraceRecord(
            iteration=i,
            G=g,
            F=evaluate_F(state, panel, cfg.eta),
            primal_residual=float(np.linalg.norm(state.phi - state.phi_c) / cfg.ell),
            dw=float(np.sum((state.w - w_old) ** 2)),
            ds=float(np.sum((state.s - s_old) ** 2)),
            dphi=float(np.sum((state.phi - phi_old) ** 2)),
            dphi_c=float(np.sum((state.phi_c - phic_old) ** 2)),
            inner_sweeps=state.inner.sweeps if state.inner is not None else 0,
            wall_time=time.perf_counter() - t0,
        )
        trace.records.append(rec)
        if callback is not None:
            callback(state, rec)
        if g > g_prev + cfg.descent_tol * abs(g_prev) + noise_floor:
            raise NonDescent(f"G rose from {g_prev!r} to {g!r} at iteration {i}", iteration=i, rho=cfg.rho)
        step = np.sqrt(rec.dphi) / cfg.ell
        stalled = abs(g_prev - g) < cfg.eps or step < cfg.eps
        if stalled and rec.primal_residual <= primal_tol:
            trace.reason = "objective" if abs(g_prev - g) < cfg.eps else "step"
            trace.converged = True
            break
        g_prev = g
    else:
        trace.reason = "max_iter"
    # the final (w, S) block was solved against the basis from before the last phi update
    trace.kkt_before_refine = lasso_kkt_residual(state, panel, cfg.eta, phi_old)
    trace.feasibility = cfg.constraint(state.p).feasibility(state.phi_c)
    return state, trace


def fit(
    panel: PanelData,
    cfg: SolverConfig,
    init: LsPvarState | None = None,
    refine: bool = True,
    callback=None,
) -> tuple[LsPvarState, SolverTrace]:
    """Run the ADMM to convergence, then refine (w, S) by least squares on the support.

    On ``NonDescent`` the run restarts from ``init`` with rho multiplied by
    ``cfg.restart_factor`` (at most ``cfg.max_restarts`` times).
    """
    M, p = panel.M, panel.p
    auto_kappa = cfg.kappa is None
    cfg = cfg.resolve(M, p)
    if init is None:
        init = init_spectral(panel, cfg)
    if init.w.shape != (M, p) or init.phi.shape != (p, p):
        raise ValueError("initial state does not match the panel dimensions")
    restarts = 0
    while True:
        try:
            state, trace = _iterate(panel, cfg, init, callback)
            break
        except NonDescent as exc:
            if restarts >= cfg.max_restarts:
                raise
            restarts += 1
            rho = cfg.rho * cfg.restart_factor
            log.warning("%s; restarting with rho=%g", exc, rho)
            cfg = replace(cfg, rho=rho, kappa=(M / rho) if auto_kappa else cfg.kappa)
    trace.restarts = restarts
    trace.rss_before_refine = rss(state, panel)
    if refine:
        state.w, state.s = ols_refine(state, panel, cfg)
    trace.rss_after_refine = rss(state, panel)
    return state, trace
