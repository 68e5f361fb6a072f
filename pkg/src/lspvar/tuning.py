"""BIC model selection over a geometric penalty grid."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import LspvarError
from .panel import PanelData
from .solver import LsPvarState, SolverConfig, SolverTrace, fit, ols_refine, rss

log = logging.getLogger(__name__)

RANK_TOL = 1e-8
RSS_FLOOR = 1e-300


@dataclass
class BicRecord:
    eta: float
    rss: float
    dof: int
    bic: float
    reason: str = ""
    iterations: int = 0
    converged: bool = False
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def estimated_rank(phi: np.ndarray, ell: float) -> int:
    sv = np.linalg.svd(phi, compute_uv=False)
    return int(np.sum(sv > RANK_TOL * ell))


def degrees_of_freedom(rank: int, p: int, M: int, nnz: int) -> int:
    return (2 * p - rank) * rank + p * (M - 1) + nnz


def bic(state: LsPvarState, panel: PanelData, ell: float, eta: float = float("nan"), trace: SolverTrace | None = None) -> BicRecord:
    """BIC = pN log(RSS / pN) + dof log N with N = sum_m T_m.

    The rank is read from the feasible copy ``phi_c``, whose spectrum is exactly
    truncated; ``phi`` only approaches it within the ADMM tolerance.
    """
    total_rss = float(rss(state, panel).sum())
    n = float(panel.T.sum())
    pn = panel.p * n
    rank = estimated_rank(state.phi_c, ell)
    dof = degrees_of_freedom(rank, panel.p, panel.M, int(np.count_nonzero(state.s)))
    value = pn * np.log(max(total_rss, RSS_FLOOR) / pn) + dof * np.log(n)
    rec = BicRecord(eta=float(eta), rss=total_rss, dof=dof, bic=float(value))
    if trace is not None:
        rec.reason, rec.iterations, rec.converged = trace.reason, trace.iterations, trace.converged
    return rec


def eta_max(panel: PanelData) -> float:
    """Largest entry of any cross-moment matrix: the lasso zero threshold at W = 1, phi = 0."""
    return float(np.abs(panel.cross).max())


def default_eta_grid(panel: PanelData, n: int = 15, ratio: float = 100.0) -> np.ndarray:
    top = eta_max(panel)
    return np.geomspace(top, top / ratio, n)


def parse_grid(text: str) -> np.ndarray:
    """``MIN:MAX:N`` to a descending geometric grid."""
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError as exc:
        raise ValueError(f"grid must look like MIN:MAX:N, got {text!r}") from exc
    if not (0 < lo <= hi) or n < 1:
        raise ValueError("grid needs 0 < MIN <= MAX and N >= 1")
    if n == 1:
        return np.array([hi])
    return np.geomspace(hi, lo, n)


def grid_search_eta(
    panel: PanelData,
    cfg_base: SolverConfig,
    etas,
    init: LsPvarState | None = None,
    warm_start: bool = True,
) -> tuple[LsPvarState, list[BicRecord], list[SolverTrace]]:
    """Fit along a descending grid and return the minimum-BIC estimate.

    Each fit starts from the previous grid point's unrefined ADMM iterate.
    A grid point whose fit raises is recorded with its error and skipped.
    """
    etas = np.asarray(etas, dtype=float)
    if etas.size == 0:
        raise ValueError("eta grid is empty")
    if np.any(etas <= 0):
        raise ValueError("eta grid must be positive")
    if np.any(np.diff(etas) > 0):
        raise ValueError("eta grid must be sorted descending")
    cfg_base = cfg_base.resolve(panel.M, panel.p)

    records: list[BicRecord] = []
    traces: list[SolverTrace] = []
    best, best_bic = None, np.inf
    start = init
    prev_nnz = -1
    for eta in etas:
        cfg = replace(cfg_base, eta=float(eta))
        try:
            raw, trace = fit(panel, cfg, init=start, refine=False)
        except LspvarError as exc:
            log.warning("eta=%g failed: %s", eta, exc)
            records.append(BicRecord(float(eta), np.nan, 0, np.nan, error=f"{type(exc).__name__}: {exc}"))
            traces.append(SolverTrace(reason="error"))
            continue
        if warm_start:
            start = raw.copy()
        refined = raw.copy()
        refined.w, refined.s = ols_refine(raw, panel, cfg)
        trace.rss_after_refine = rss(refined, panel)
        rec = bic(refined, panel, cfg_base.ell, eta, trace)
        records.append(rec)
        traces.append(trace)
        nnz = int(np.count_nonzero(refined.s))
        if nnz < prev_nnz:
            log.warning("support shrank from %d to %d as eta decreased to %g", prev_nnz, nnz, eta)
        prev_nnz = nnz
        if rec.bic < best_bic:
            best, best_bic = refined, rec.bic
    if best is None:
        raise LspvarError("every grid point failed")
    return best, records, traces


def best_record(records: list[BicRecord]) -> BicRecord:
    ok = [r for r in records if r.ok]
    return min(ok, key=lambda r: r.bic)


def write_bic_path(records: list[BicRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eta", "rss", "dof", "bic", "iterations", "converged"])
        for r in records:
            w.writerow([repr(r.eta), repr(r.rss), r.dof, repr(r.bic), r.iterations, int(r.converged)])
