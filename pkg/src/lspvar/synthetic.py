"""Synthetic low-rank plus sparse panel VAR data.

Every random draw comes from a generator keyed by ``(seed, stream, index)`` so
that entity m's parameters and series do not depend on how many entities
follow it, and serial and parallel generation agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnstableDraw
from .panel import RawPanel

# substream tags
_PHI, _ENTITY, _CLUSTER, _SERIES = 0, 1, 2, 3


@dataclass(frozen=True)
class ClusterSpec:
    label: str
    members: tuple[int, ...]
    shared_w: bool = False
    zero_w: bool = False
    zero_s: bool = False


@dataclass(frozen=True)
class DgpSpec:
    M: int
    p: int
    r: int
    s: float
    T: int
    seed: int
    sigma_prior: tuple[float, float] = (3.0, 0.5)  # inverse-gamma (shape, scale)
    burn_in: int = 500
    ell_gen: float = 1.0
    cluster_plan: tuple[ClusterSpec, ...] = ()
    max_redraws: int = 100

    def __post_init__(self):
        if not 1 <= self.r <= self.p:
            raise ValueError("need 1 <= r <= p")
        if not 0 <= self.s <= self.p * self.p:
            raise ValueError("need 0 <= s <= p^2")
        if self.T < 1 or self.M < 1:
            raise ValueError("need T >= 1 and M >= 1")
        seen = [m for c in self.cluster_plan for m in c.members]
        if len(seen) != len(set(seen)) or any(not 0 <= m < self.M for m in seen):
            raise ValueError("cluster members must be distinct entity indices in [0, M)")

    def labels(self) -> list[str]:
        out = [f"entity{m}" for m in range(self.M)]
        for c in self.cluster_plan:
            for m in c.members:
                out[m] = c.label
        return out


@dataclass
class GroundTruth:
    phi_star: np.ndarray
    w_star: np.ndarray  # (M, p)
    s_star: np.ndarray  # (M, p, p)
    a_star: np.ndarray  # (M, p, p)
    sigma: np.ndarray  # (M,) innovation standard deviations
    labels: list[str] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.w_star.shape[0]

    @property
    def p(self) -> int:
        return self.w_star.shape[1]


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, key)])


def spectral_radius(a: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(a)))) if a.size else 0.0


def _orthonormal(rng: np.random.Generator, p: int, r: int) -> np.ndarray:
    q, rr = np.linalg.qr(rng.standard_normal((p, r)))
    return q * np.sign(np.diag(rr))


def generate_phi(spec: DgpSpec) -> np.ndarray:
    rng = substream(spec.seed, _PHI)
    u = _orthonormal(rng, spec.p, spec.r)
    v = _orthonormal(rng, spec.p, spec.r)
    d = rng.dirichlet(np.ones(spec.r)) * spec.ell_gen
    return (u * d) @ v.T


def _sparse_draw(rng, p, mean_nnz, sd):
    k = min(int(rng.poisson(mean_nnz)), p * p)
    s = np.zeros(p * p)
    cells = rng.choice(p * p, size=k, replace=False)
    s[cells] = rng.normal(0.0, sd, size=k)
    return s.reshape(p, p)


def _weights_for(rng, base: np.ndarray) -> np.ndarray:
    lam = spectral_radius(base)
    if lam <= 0:
        raise UnstableDraw("cannot scale weights against a nilpotent matrix")
    return rng.uniform(0.5 / lam, 1.0 / lam, size=base.shape[0])


def generate_truth(spec: DgpSpec, rng=None) -> GroundTruth:
    """Draw (phi, W_m, S_m, sigma_m) with every A_m stable.

    ``rng`` is accepted for interface symmetry; all draws use seed substreams.
    """
    p, M = spec.p, spec.M
    phi = generate_phi(spec)
    sd = np.sqrt(p) * np.abs(phi).max()
    role = {}
    for ci, c in enumerate(spec.cluster_plan):
        for m in c.members:
            role[m] = (ci, c)

    shared_w: dict[int, np.ndarray] = {}
    cluster_rng: dict[int, np.random.Generator] = {}
    w = np.zeros((M, p))
    s = np.zeros((M, p, p))
    a = np.zeros((M, p, p))
    sigma = np.zeros(M)
    shape, scale = spec.sigma_prior
    for m in range(M):
        rng_m = substream(spec.seed, _ENTITY, m)
        ci, c = role.get(m, (None, None))
        for _ in range(spec.max_redraws):
            raw = np.zeros((p, p)) if (c is not None and c.zero_s) else _sparse_draw(rng_m, p, spec.s, sd)
            if c is not None and c.zero_w:
                w_m = np.zeros(p)
                rad = spectral_radius(raw)
                s_m = raw * (0.9 / rad) if rad > 0 else raw
            else:
                if c is not None and c.shared_w:
                    if ci not in shared_w:
                        rng_c = cluster_rng.setdefault(ci, substream(spec.seed, _CLUSTER, ci))
                        shared_w[ci] = _weights_for(rng_c, phi + raw)
                    w_m = shared_w[ci]
                else:
                    w_m = _weights_for(rng_m, phi + raw)
                s_m = w_m[:, None] * raw
            a_m = w_m[:, None] * phi + s_m
            if spectral_radius(a_m) < 1.0:
                break
            if c is not None and c.shared_w and m == c.members[0]:
                # the shared draw itself is unstable for its first member; redraw it
                shared_w.pop(ci)
        else:
            raise UnstableDraw(f"entity {m}: no stable transition matrix after {spec.max_redraws} draws")
        w[m], s[m], a[m] = w_m, s_m, a_m
        sigma[m] = np.sqrt(scale / rng_m.gamma(shape))
    return GroundTruth(phi, w, s, a, sigma, spec.labels())


def simulate_panel(truth: GroundTruth, T: int, burn_in: int = 500, seed: int = 0, ids=None) -> RawPanel:
    """Simulate X_t = A_m X_{t-1} + eps_t, eps_t ~ N(0, sigma_m^2 I); returns T + 1 points per entity."""
    p = truth.p
    series = []
    for m in range(truth.M):
        rng = substream(seed, _SERIES, m)
        a, sig = truth.a_star[m], truth.sigma[m]
        n = burn_in + T + 1
        noise = rng.standard_normal((n, p)) * sig
        x = np.empty((n, p))
        x[0] = rng.standard_normal(p)
        for t in range(1, n):
            x[t] = a @ x[t - 1] + noise[t]
        series.append(x[burn_in:].T.copy())
    if ids is None:
        ids = [f"e{m:03d}" for m in range(truth.M)]
    return RawPanel(tuple(ids), tuple(series))


def generate(spec: DgpSpec) -> tuple[GroundTruth, RawPanel]:
    truth = generate_truth(spec)
    return truth, simulate_panel(truth, spec.T, spec.burn_in, spec.seed)


# --- presets -----------------------------------------------------------------


def _heterogeneous_plan(sizes: tuple[int, int, int, int, int, int]) -> tuple[ClusterSpec, ...]:
    labels = ["cluster1", "cluster2", "singular_w", "singular_s", "isolate1", "isolate2"]
    plan, start = [], 0
    for label, n in zip(labels, sizes):
        members = tuple(range(start, start + n))
        start += n
        plan.append(
            ClusterSpec(
                label,
                members,
                shared_w=label in ("cluster1", "cluster2", "singular_s"),
                zero_w=label == "singular_w",
                zero_s=label == "singular_s",
            )
        )
    return tuple(plan)


def preset(name: str, seed: int, **overrides) -> DgpSpec:
    """Scenarios of the simulation study: ``example1``, ``large`` and ``rankstudy``."""
    if name == "example1":
        kw = dict(M=20, p=40, r=5, s=30, T=400, cluster_plan=_heterogeneous_plan((5, 5, 4, 4, 1, 1)))
    elif name == "large":
        kw = dict(M=50, p=80, r=5, s=100, T=2000, cluster_plan=_heterogeneous_plan((19, 19, 5, 5, 1, 1)))
    elif name == "rankstudy":
        kw = dict(M=20, p=40, r=5, s=30, T=400)
    else:
        raise ValueError(f"unknown preset {name!r}")
    kw.update(overrides)
    return DgpSpec(seed=seed, **kw)
