"""Recovery metrics, PCA of estimated weights, incoherence and stability checks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.sparse.linalg import ArpackNoConvergence, eigs

from .errors import DimensionMismatch, NoConvergence
from .solver import LsPvarState
from .synthetic import GroundTruth


# --- recovery metrics --------------------------------------------------------


@dataclass
class RecoveryMetrics:
    entity: list[str]
    cluster: list[str]
    rel_frob_A: np.ndarray
    abs_frob_W: np.ndarray
    abs_frob_S: np.ndarray
    accuracy: np.ndarray
    sensitivity: np.ndarray  # nan where the true support is empty
    specificity: np.ndarray

    COLUMNS = ("rel_frob_A", "abs_frob_W", "abs_frob_S", "accuracy", "sensitivity", "specificity")

    def by_cluster(self) -> dict[str, dict[str, float]]:
        """Arithmetic means per cluster label; an all-absent sensitivity stays nan."""
        labels = np.asarray(self.cluster)
        out = {}
        for label in dict.fromkeys(self.cluster):
            mask = labels == label
            row = {}
            for col in self.COLUMNS:
                vals = getattr(self, col)[mask]
                vals = vals[~np.isnan(vals)]
                row[col] = float(vals.mean()) if vals.size else float("nan")
            out[label] = row
        return out


def canonical_factors(w: np.ndarray, phi: np.ndarray, ell_norm: float) -> tuple[np.ndarray, np.ndarray]:
    """Equal row norms and nuclear norm ``ell_norm`` for phi; w absorbs every rescaling.

    W_m phi is unchanged.  Zero rows of phi are left at zero.
    """
    norms = np.linalg.norm(phi, axis=1)
    nz = norms > 0
    scale = np.ones_like(norms)
    scale[nz] = 1.0 / norms[nz]
    phi_n = phi * scale[:, None]
    nuc = np.linalg.svd(phi_n, compute_uv=False).sum()
    c = ell_norm / nuc if nuc > 0 else 1.0
    phi_n = phi_n * c
    w_n = w * (np.where(nz, norms, 0.0) / c)[None, :]
    return w_n, phi_n


def aligned_factors(est: LsPvarState, truth: GroundTruth, ell_norm: float):
    """Canonical (w_hat, phi_hat, w_star, phi_star) with each estimated row signed toward the truth."""
    w_hat, phi_hat = canonical_factors(est.w, est.phi, ell_norm)
    w_star, phi_star = canonical_factors(truth.w_star, truth.phi_star, ell_norm)
    flip = np.where(np.sum(phi_hat * phi_star, axis=1) < 0, -1.0, 1.0)
    return w_hat * flip[None, :], phi_hat * flip[:, None], w_star, phi_star


def parameter_error(est: LsPvarState, truth: GroundTruth, ell_norm: float) -> float:
    """||phi_hat - phi*||^2 + mean_m (||S_hat_m - S*_m||^2 + ||W_hat_m - W*_m||^2) in canonical form."""
    w_hat, phi_hat, w_star, phi_star = aligned_factors(est, truth, ell_norm)
    per_entity = np.sum((est.s - truth.s_star) ** 2, axis=(1, 2)) + np.sum((w_hat - w_star) ** 2, axis=1)
    return float(np.sum((phi_hat - phi_star) ** 2) + per_entity.mean())


def compute_metrics(
    est: LsPvarState,
    truth: GroundTruth,
    ell_norm: float,
    labels=None,
    ids=None,
) -> RecoveryMetrics:
    if est.w.shape != truth.w_star.shape or est.s.shape != truth.s_star.shape:
        raise DimensionMismatch(f"estimate {est.w.shape} does not match truth {truth.w_star.shape}")
    M, p = truth.M, truth.p
    a_hat = est.transition()
    denom = np.linalg.norm(truth.a_star, axis=(1, 2))
    rel_a = np.linalg.norm(a_hat - truth.a_star, axis=(1, 2)) / np.where(denom > 0, denom, 1.0)

    w_hat, _, w_star, _ = aligned_factors(est, truth, ell_norm)
    abs_w = np.linalg.norm(w_hat - w_star, axis=1)
    abs_s = np.linalg.norm(est.s - truth.s_star, axis=(1, 2))

    sup_hat = est.s != 0
    sup_true = truth.s_star != 0
    tp = np.sum(sup_hat & sup_true, axis=(1, 2))
    tn = np.sum(~sup_hat & ~sup_true, axis=(1, 2))
    pos = sup_true.sum(axis=(1, 2))
    neg = p * p - pos
    accuracy = (tp + tn) / (p * p)
    with np.errstate(invalid="ignore", divide="ignore"):
        sensitivity = np.where(pos > 0, tp / np.maximum(pos, 1), np.nan)
        specificity = np.where(neg > 0, tn / np.maximum(neg, 1), np.nan)

    labels = list(truth.labels) if labels is None else list(labels)
    if len(labels) != M:
        labels = [f"entity{m}" for m in range(M)]
    ids = [f"e{m:03d}" for m in range(M)] if ids is None else list(ids)
    return RecoveryMetrics(ids, labels, rel_a, abs_w, abs_s, accuracy.astype(float), sensitivity, specificity)


# --- PCA of weights ----------------------------------------------------------


def pca_weights(w_hat: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Scores on the top ``k`` principal components of the rows of ``w_hat``.

    Each loading vector is signed so its largest-magnitude coordinate is positive.
    """
    w_hat = np.asarray(w_hat, dtype=float)
    M, p = w_hat.shape
    if not 1 <= k <= min(M, p):
        raise ValueError(f"k must lie in [1, {min(M, p)}]")
    centered = w_hat - w_hat.mean(axis=0)
    u, sv, vt = np.linalg.svd(centered, full_matrices=False)
    vt = vt[:k]
    for i in range(k):
        j = int(np.argmax(np.abs(vt[i])))
        if vt[i, j] < 0:
            vt[i] = -vt[i]
    scores = centered @ vt.T
    var = sv**2
    total = var.sum()
    ratios = var[:k] / total if total > 0 else np.zeros(k)
    return scores, ratios


def kmeans_labels(points: np.ndarray, k: int, seed: int = 0, restarts: int = 20) -> np.ndarray:
    """Best-of-``restarts`` k-means (k-means++ seeding) by within-cluster sum of squares."""
    points = np.asarray(points, dtype=float)
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centroids, labels = kmeans2(points, k, minit="++", seed=rng, missing="warn")
        inertia = float(np.sum((points - centroids[labels]) ** 2))
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best


def same_partition(a, b) -> bool:
    """True when two labelings induce the same partition (up to renaming)."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        return False
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


# --- incoherence -------------------------------------------------------------


@dataclass
class IncoherenceReport:
    sigma_grid: np.ndarray
    mu: np.ndarray  # (M, n_sigma)
    nu: np.ndarray  # (n_sigma,)
    product: np.ndarray  # (M, n_sigma)
    min_product: np.ndarray = field(init=False)

    def __post_init__(self):
        self.min_product = self.product.min(axis=1)

    @property
    def violations(self) -> np.ndarray:
        """Entity indices whose smallest product over the grid is at least 1."""
        return np.flatnonzero(self.min_product >= 1.0)


def default_sigma_grid() -> np.ndarray:
    return np.logspace(-1, 1, 21)


def incoherence(s, phi: np.ndarray, sigma_grid=None) -> IncoherenceReport:
    """mu_m(sigma) from sign patterns of each S_m and nu(sigma) from the singular spaces of phi.

    ``s`` is one p x p matrix or a stack (M, p, p).
    """
    sigma_grid = default_sigma_grid() if sigma_grid is None else np.asarray(sigma_grid, dtype=float)
    if np.any(sigma_grid <= 0):
        raise ValueError("sigma grid must be positive")
    s = np.asarray(s, dtype=float)
    if s.ndim == 2:
        s = s[None]
    phi = np.asarray(phi, dtype=float)
    if not np.any(phi):
        raise ValueError("phi must be nonzero")
    u, sv, vt = np.linalg.svd(phi)
    r = int(np.sum(sv > 1e-8 * sv.sum()))
    u, v = u[:, :r], vt[:r].T
    uu = np.abs(u @ u.T).max()
    vv = np.abs(v @ v.T).max()
    cross = np.linalg.norm(u, axis=1).max() * np.linalg.norm(v, axis=1).max()
    nu = uu / sigma_grid + vv * sigma_grid + cross

    sign = np.abs(np.sign(s))
    col = sign.sum(axis=1).max(axis=1)  # max column l1 norm: ||.||_{1->1}
    row = sign.sum(axis=2).max(axis=1)  # max row l1 norm: ||.||_{inf->inf}
    mu = np.maximum(sigma_grid[None] * col[:, None], row[:, None] / sigma_grid[None])
    return IncoherenceReport(sigma_grid, mu, nu, mu * nu[None])


# --- stability ---------------------------------------------------------------

EIGS_THRESHOLD = 500


def stability_check(a: np.ndarray) -> tuple[bool, float]:
    """(is_stable, spectral radius); ARPACK for p > 500."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if a.shape[0] <= EIGS_THRESHOLD:
        radius = float(np.abs(np.linalg.eigvals(a)).max()) if a.size else 0.0
    else:
        try:
            vals = eigs(a, k=1, which="LM", return_eigenvectors=False, maxiter=10 * a.shape[0])
            radius = float(np.abs(vals).max())
        except ArpackNoConvergence as exc:
            best = float(np.abs(exc.eigenvalues).max()) if len(exc.eigenvalues) else float("nan")
            raise NoConvergence("spectral radius iteration did not converge", estimate=best) from exc
    return radius < 1.0, radius


def stability_report(a_stack: np.ndarray) -> list[tuple[bool, float]]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return [stability_check(a) for a in a_stack]
