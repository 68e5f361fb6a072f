import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from lspvar.errors import NonDescent
from lspvar.panel import PanelData, RawPanel, build_panel
from lspvar.projections import IntersectionState, project_intersection
from lspvar.solver import (
    LsPvarState,
    SolverConfig,
    _lasso_kernel,
    _lasso_rows,
    evaluate_F,
    evaluate_G,
    fit,
    init_random,
    init_spectral,
    lasso_kkt_residual,
    ols_refine,
    phi_normal_residual,
    rss,
    spectral_phi,
    update_dual,
    update_phi,
    update_phi_c,
    update_w,
    update_ws,
)
from lspvar.synthetic import DgpSpec, generate


def noiseless_panel(a_stack, T=40, seed=0):
    """Exact regression data Y_m = A_m X_m with Gaussian X_m, so every Gram matrix is nonsingular."""
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal((a.shape[0], T)) for a in a_stack]
    ys = [a @ x for a, x in zip(a_stack, xs)]
    return PanelData(
        ids=tuple(f"e{m}" for m in range(len(xs))),
        X=tuple(xs),
        Y=tuple(ys),
        gram=np.stack([x @ x.T / T for x in xs]),
        cross=np.stack([y @ x.T / T for x, y in zip(xs, ys)]),
        yy=np.stack([np.sum(y * y, axis=1) / T for y in ys]),
        T=np.full(len(xs), float(T)),
    )


def feasible_phi(p, r_hat, ell, seed=0):
    spec = SolverConfig(r_hat=r_hat, eta=0.0, ell=ell).constraint(p)
    phi, inner = project_intersection(np.random.default_rng(seed).standard_normal((p, p)), spec)
    return phi, inner


def random_state(M, p, seed, sparse=True):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((M, p, p)) * (rng.random((M, p, p)) < 0.3 if sparse else 1.0)
    return LsPvarState(
        w=rng.standard_normal((M, p)),
        s=s,
        phi=rng.standard_normal((p, p)),
        phi_c=rng.standard_normal((p, p)),
        gamma=rng.standard_normal((p, p)),
    )


@pytest.fixture(scope="module")
def small_panel():
    truth, raw = generate(DgpSpec(M=3, p=5, r=2, s=3, T=120, seed=5))
    return build_panel(raw)


# --- objective ------------------------------------------------------------------


def test_objective_zero_at_exact_model():
    phi = np.array([[0.5, 0.2], [-0.1, 0.3]])
    panel = noiseless_panel([phi, phi])
    state = LsPvarState(np.ones((2, 2)), np.zeros((2, 2, 2)), phi.copy(), phi.copy(), np.zeros((2, 2)))
    cfg = SolverConfig(r_hat=2, eta=0.0, rho=1.0, kappa=1.0, ell=1.0)
    assert evaluate_F(state, panel, 0.0) == pytest.approx(0.0, abs=1e-15)
    assert evaluate_G(state, panel, cfg) == pytest.approx(0.0, abs=1e-15)


def test_penalty_adds_linearly():
    phi = np.array([[0.5, 0.2], [-0.1, 0.3]])
    panel = noiseless_panel([phi])
    cfg = SolverConfig(r_hat=2, eta=0.25, rho=1.0, kappa=1.0, ell=1.0)
    state = LsPvarState(np.ones((1, 2)), np.zeros((1, 2, 2)), phi.copy(), phi.copy(), np.zeros((2, 2)))
    g0 = evaluate_G(state, panel, cfg)
    state.s[0, 1, 0] = 1.0
    loss_change = 0.5 * float(rss(state, panel)[0]) / panel.T[0]
    assert evaluate_G(state, panel, cfg) - g0 == pytest.approx(0.25 + loss_change)


def test_objective_matches_loop():
    rng = np.random.default_rng(1)
    panel = build_panel(RawPanel.from_arrays([rng.standard_normal((2, 4))]))
    state = random_state(1, 2, 2, sparse=False)
    cfg = SolverConfig(r_hat=2, eta=0.3, rho=0.7, kappa=1.0, ell=1.0)
    x = panel.to_raw().series[0]
    a = np.diag(state.w[0]) @ state.phi + state.s[0]
    loss = 0.0
    for t in range(3):
        for i in range(2):
            pred = sum(a[i, k] * x[k, t] for k in range(2))
            loss += (x[i, t + 1] - pred) ** 2
    f = loss / (2 * 3) + 0.3 * sum(abs(state.s[0, i, k]) for i in range(2) for k in range(2))
    g = f
    for i in range(2):
        for k in range(2):
            d = state.phi[i, k] - state.phi_c[i, k]
            g += 0.7 / 2 * d * d + 0.7 * state.gamma[i, k] * d
    assert evaluate_F(state, panel, 0.3) == pytest.approx(f, rel=1e-12)
    assert evaluate_G(state, panel, cfg) == pytest.approx(g, rel=1e-12)


# --- (W, S) block ---------------------------------------------------------------


def lasso_fixture():
    rng = np.random.default_rng(11)
    series = [rng.standard_normal((3, 51)) for _ in range(2)]
    panel = build_panel(RawPanel.from_arrays(series))
    w = np.array([[0.5, -0.3, 0.8], [1.2, 0.4, -0.6]])
    phi = np.array([[0.2, 0.1, -0.3], [0.0, 0.4, 0.1], [-0.2, 0.3, 0.2]])
    return panel, w, phi


# frozen from scikit-learn Lasso(alpha=0.05, fit_intercept=False, tol=1e-14) on each row
LASSO_REFERENCE = np.array(
    [
        [[0.0, -0.24390359316640978, 0.14532534480476184], [0.0, 0.0, 0.00798988646086473], [0.0, -0.3411967481101393, 0.0]],
        [[-0.25947014337879376, 0.0, 0.3143131669808427], [0.0580555915925118, 0.0, 0.0], [0.2009380871681831, 0.23576241773767698, 0.0]],
    ]
)


def test_lasso_matches_reference():
    panel, w, phi = lasso_fixture()
    c = panel.cross - w[:, :, None] * (phi[None] @ panel.gram)
    s, _ = _lasso_rows(panel.gram, c, np.zeros((2, 3, 3)), 0.05, 10_000, 1e-12)
    np.testing.assert_allclose(s, LASSO_REFERENCE, atol=1e-6)
    np.testing.assert_array_equal(s == 0, LASSO_REFERENCE == 0)
    state = LsPvarState(w, s, phi, phi, np.zeros((3, 3)))
    assert lasso_kkt_residual(state, panel, 0.05).max() <= 1e-6


def _row_kkt(gram, c, s, eta):
    grad = c - s @ gram
    return np.where(s != 0, np.abs(grad - eta * np.sign(s)), np.maximum(np.abs(grad) - eta, 0.0)).max(axis=-1)


def test_lasso_ill_conditioned_rows_are_polished():
    # one near-unit-root regressor and a near-duplicate of it: cond(gram) ~ 1e5
    rng = np.random.default_rng(5)
    p, eta = 6, 0.01
    x = rng.standard_normal((p, 400))
    x[0] = np.cumsum(x[0]) * 2
    x[1] = x[0] + 0.2 * x[1]
    gram = (x @ x.T / 400)[None]
    truth = np.zeros((p, p))
    truth[:, :2] = rng.choice([-0.3, 0.2], size=(p, 2))
    truth[:, 3] = 0.1
    c = (truth @ gram[0] + 0.01 * rng.standard_normal((p, p)))[None]
    exact, _ = _lasso_rows(gram, c, np.zeros((1, p, p)), eta, 200_000, 1e-13)
    assert _row_kkt(gram[0], c, exact, eta).max() <= 1e-10

    start = exact * rng.uniform(0.9, 1.1, exact.shape)
    cd_only = start.copy()
    _lasso_kernel(gram, c, cd_only, eta, 3, 1e-10)
    s, used = _lasso_rows(gram, c, start, eta, 3, 1e-10)
    assert used == 3
    before, after = _row_kkt(gram[0], c, cd_only, eta)[0], _row_kkt(gram[0], c, s, eta)[0]
    assert np.all(after <= before)
    right_support = np.all(np.sign(cd_only[0]) == np.sign(exact[0]), axis=1)
    assert right_support.sum() >= 4 and before[right_support].max() > 1e-6
    assert after[right_support].max() <= 1e-12
    np.testing.assert_allclose(s[0, right_support], exact[0, right_support], atol=1e-10)


def test_large_penalty_zeroes_s_and_gives_scalar_ols(small_panel):
    panel = small_panel
    p = panel.p
    phi, _ = feasible_phi(p, 2, np.sqrt(2 * p))
    state = LsPvarState(np.ones((panel.M, p)), np.ones((panel.M, p, p)), phi, phi, np.zeros((p, p)))
    cfg = SolverConfig(r_hat=2, eta=1e6).resolve(panel.M, p)
    # weights are solved before S, so the scalar regression shows up on the second pass
    state.w, state.s = update_ws(state, panel, cfg)
    assert not np.any(state.s)
    w, s = update_ws(state, panel, cfg)
    assert not np.any(s)
    for m in range(panel.M):
        z = phi @ panel.X[m]
        np.testing.assert_allclose(w[m], np.sum(panel.Y[m] * z, axis=1) / np.sum(z * z, axis=1))


def test_update_ws_kkt(small_panel):
    panel = small_panel
    cfg = SolverConfig(r_hat=2, eta=0.05).resolve(panel.M, panel.p)
    state = init_spectral(panel, cfg)
    state.w, state.s = update_ws(state, panel, cfg)
    assert lasso_kkt_residual(state, panel, cfg.eta).max() <= 1e-6


# --- phi_c, phi and dual blocks -------------------------------------------------


def test_phi_c_fixed_point_when_feasible():
    phi, inner = feasible_phi(4, 2, 3.0)
    cfg = SolverConfig(r_hat=2, eta=0.1, ell=3.0, rho=1.0, kappa=2.0)
    state = LsPvarState(np.ones((1, 4)), np.zeros((1, 4, 4)), phi.copy(), phi.copy(), np.zeros((4, 4)), inner)
    out, _ = update_phi_c(state, cfg)
    np.testing.assert_allclose(out, phi, atol=1e-8)


def test_phi_c_large_kappa_near_identity():
    phi_c, inner = feasible_phi(4, 2, 3.0)
    rng = np.random.default_rng(4)
    state = LsPvarState(np.ones((1, 4)), np.zeros((1, 4, 4)), phi_c + rng.standard_normal((4, 4)), phi_c.copy(), np.zeros((4, 4)), inner)
    cfg = SolverConfig(r_hat=2, eta=0.1, ell=3.0, rho=1.0, kappa=1e8)
    out, _ = update_phi_c(state, cfg)
    assert np.linalg.norm(out - phi_c) <= 1e-6


def test_phi_zero_weights():
    state = random_state(2, 3, 3)
    state.w[:] = 0.0
    panel = noiseless_panel([np.eye(3) * 0.5] * 2)
    cfg = SolverConfig(r_hat=1, eta=0.0, rho=0.8, kappa=1.0, ell=1.0)
    np.testing.assert_allclose(update_phi(state, panel, cfg), state.phi_c - state.gamma)


def test_phi_identity_gram():
    # X columns are +-e_k, so gram = I
    x = np.concatenate([np.eye(3), -np.eye(3)], axis=1)
    y = np.random.default_rng(0).standard_normal((3, 6))
    panel = build_panel(RawPanel.from_arrays([np.column_stack([x, np.zeros(3)])]))
    panel = type(panel)(panel.ids, (x,), (y,), np.eye(3)[None], (y @ x.T / 6)[None], np.sum(y * y, 1)[None] / 6, np.array([6.0]))
    phi_c = np.random.default_rng(1).standard_normal((3, 3))
    state = LsPvarState(np.ones((1, 3)), np.zeros((1, 3, 3)), np.zeros((3, 3)), phi_c, np.zeros((3, 3)))
    cfg = SolverConfig(r_hat=1, eta=0.0, rho=2.0, kappa=1.0, ell=1.0)
    np.testing.assert_allclose(update_phi(state, panel, cfg), (2.0 * phi_c + panel.cross[0]) / 3.0)


def test_phi_matches_kronecker_solve():
    rng = np.random.default_rng(8)
    p, M = 3, 2
    panel = build_panel(RawPanel.from_arrays([rng.standard_normal((p, 40)) for _ in range(M)]))
    state = random_state(M, p, 9)
    cfg = SolverConfig(r_hat=1, eta=0.0, rho=0.6, kappa=1.0, ell=1.0)
    # stationarity of G in vec(phi) (row-major): sum_m (W_m^2 kron gram_m) + rho I
    lhs = cfg.rho * np.eye(p * p)
    rhs = cfg.rho * (state.phi_c - state.gamma).ravel()
    for m in range(M):
        W = np.diag(state.w[m])
        lhs += np.kron(W @ W, panel.gram[m])
        rhs += (W @ (panel.cross[m] - state.s[m] @ panel.gram[m])).ravel()
    expected = np.linalg.solve(lhs, rhs).reshape(p, p)
    got = update_phi(state, panel, cfg)
    np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)
    state.phi = got
    assert phi_normal_residual(state, panel, cfg) <= 1e-10


def test_dual_examples():
    state = random_state(1, 2, 0)
    state.phi = state.phi_c.copy()
    np.testing.assert_array_equal(update_dual(state), state.gamma)
    e = np.array([[1.0, -2.0], [0.5, 0.0]])
    state.gamma = np.zeros((2, 2))
    state.phi = state.phi_c + e
    for k in range(1, 4):
        state.gamma = update_dual(state)
        np.testing.assert_allclose(state.gamma, k * e)


# --- initialisation -------------------------------------------------------------


def test_init_random_deterministic():
    cfg = SolverConfig(r_hat=2, eta=0.1)
    a, b = init_random(5, 3, cfg, 42), init_random(5, 3, cfg, 42)
    np.testing.assert_array_equal(a.phi_c, b.phi_c)
    np.testing.assert_array_equal(a.phi, b.phi)
    assert not np.allclose(a.phi_c, init_random(5, 3, cfg, 43).phi_c)
    spec = cfg.resolve(3, 5).constraint(5)
    assert spec.in_L(a.phi_c) and spec.in_B(a.phi_c)


def test_spectral_rank_one_noiseless():
    u = np.array([1.0, -2.0, 0.5])
    v = np.array([0.3, 0.1, -0.4])
    phi_star = np.outer(u, v) * 0.8
    panel = noiseless_panel([phi_star] * 4)
    phi = spectral_phi(panel, 1.0)
    for i in range(3):
        cos = phi[i] @ phi_star[i] / np.linalg.norm(phi[i]) / np.linalg.norm(phi_star[i])
        assert abs(cos) == pytest.approx(1.0, abs=1e-8)


def test_spectral_single_entity_uses_ols_rows():
    rng = np.random.default_rng(2)
    panel = build_panel(RawPanel.from_arrays([rng.standard_normal((3, 60))]))
    ols = np.linalg.solve(panel.gram[0], panel.cross[0].T).T
    phi = spectral_phi(panel, 1.0)
    rows = phi / np.linalg.norm(phi, axis=1, keepdims=True)
    np.testing.assert_allclose(np.abs(rows), np.abs(ols / np.linalg.norm(ols, axis=1, keepdims=True)), atol=1e-10)


def test_spectral_noisy_alignment():
    # measured minimum cosine over three seeds was 0.999; the bound is the contract's 0.9
    truth, raw = generate(DgpSpec(M=10, p=8, r=2, s=0, T=20000, seed=0))
    phi = spectral_phi(build_panel(raw), 1.0)
    cos = np.abs(np.sum(phi * truth.phi_star, 1)) / np.linalg.norm(phi, axis=1) / np.linalg.norm(truth.phi_star, axis=1)
    assert cos.min() >= 0.9


# --- driver ---------------------------------------------------------------------


def test_fit_at_truth_stops_immediately():
    p, r_hat, ell = 3, 2, np.sqrt(6)
    phi, inner = feasible_phi(p, r_hat, ell, seed=3)
    w_star = np.array([[0.1, 0.15, 0.12], [0.05, 0.1, 0.08]])
    panel = noiseless_panel([w[:, None] * phi for w in w_star])
    init = LsPvarState(w_star.copy(), np.zeros((2, p, p)), phi.copy(), phi.copy(), np.zeros((p, p)), inner)
    cfg = SolverConfig(r_hat=r_hat, eta=0.05, ell=ell)
    state, trace = fit(panel, cfg, init=init)
    assert trace.iterations <= 2 and trace.converged
    assert trace.G[-1] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(state.phi, phi, atol=1e-8)


def test_tiny_rho_raises_non_descent(small_panel):
    with pytest.raises(NonDescent):
        fit(small_panel, SolverConfig(r_hat=2, eta=0.05, rho=1e-8))


def test_fit_trace_descends_and_is_deterministic(small_panel):
    cfg = SolverConfig(r_hat=2, eta=0.05, rho=3.0)
    a, ta = fit(small_panel, cfg)
    b, tb = fit(small_panel, cfg)
    g = ta.G
    assert np.all(g[1:] <= g[:-1] + 1e-9 * np.abs(g[:-1]))
    np.testing.assert_array_equal(ta.G, tb.G)
    np.testing.assert_array_equal(a.s, b.s)
    assert ta.records[-1].primal_residual <= 10 * cfg.eps
    assert ta.kkt_before_refine.max() <= 1e-5


def test_fit_permutation_equivariant(small_panel):
    cfg = SolverConfig(r_hat=2, eta=0.05, rho=3.0)
    order = [2, 0, 1]
    a, ta = fit(small_panel, cfg)
    b, tb = fit(small_panel.subset(order), cfg)
    np.testing.assert_allclose(b.phi, a.phi, atol=1e-6)
    np.testing.assert_allclose(b.w, a.w[order], atol=1e-6)
    np.testing.assert_allclose(b.s, a.s[order], atol=1e-6)
    assert tb.G[-1] == pytest.approx(ta.G[-1], rel=1e-8)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_refinement_never_raises_rss(seed):
    _, raw = generate(DgpSpec(M=2, p=4, r=1, s=3, T=80, seed=seed))
    panel = build_panel(raw)
    cfg = SolverConfig(r_hat=1, eta=0.05, rho=2.0, max_iter=300)
    try:
        _, trace = fit(panel, cfg)
    except NonDescent:
        return
    assert np.all(trace.rss_after_refine <= trace.rss_before_refine * (1 + 1e-12) + 1e-14)


def test_refine_empty_support_is_scalar_regression(small_panel):
    p = small_panel.p
    phi, _ = feasible_phi(p, 2, 1.0)
    state = LsPvarState(np.ones((small_panel.M, p)), np.zeros((small_panel.M, p, p)), phi, phi, np.zeros((p, p)))
    w, s = ols_refine(state, small_panel)
    assert not np.any(s)
    np.testing.assert_allclose(w, update_w(state, small_panel))


def test_refine_full_support_reaches_ols_fit(small_panel):
    p = small_panel.p
    phi, _ = feasible_phi(p, 2, 1.0)
    state = LsPvarState(np.ones((small_panel.M, p)), np.ones((small_panel.M, p, p)), phi, phi, np.zeros((p, p)))
    state.w, state.s = ols_refine(state, small_panel)
    ols = np.stack([np.linalg.solve(g, c.T).T for g, c in zip(small_panel.gram, small_panel.cross)])
    np.testing.assert_allclose(state.transition(), ols, atol=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(r_hat=2, eta=0.1, rho=-1.0).resolve(2, 3)
    with pytest.raises(ValueError):
        SolverConfig(r_hat=4, eta=0.1).resolve(2, 3)
    with pytest.raises(ValueError):
        SolverConfig(r_hat=1, eta=-0.1).resolve(2, 3)
    cfg = SolverConfig(r_hat=2, eta=0.1).resolve(20, 8)
    assert (cfg.rho, cfg.kappa, cfg.ell) == (2.0, 10.0, 4.0)
