import numpy as np
import pytest

from netrecon import (IdentifiabilityError, RegressionData, SBLOptions,
                      SBLState, assemble_regression, posterior,
                      marginal_loglik, identifiability_mask, initial_sbl_state,
                      sbl_em, simulate, smooth)

from _oracles import (ridge_posterior_dense, pinv_posterior_dense,
                      evidence_dense, random_stable_model)


def generic_regression(rng, N, n_w, n_rows=1):
    """Arbitrary Gaussian design expressed through the row structure: with
    n_rows = 1 the design matrix is exactly the regressors array."""
    assert n_rows == 1
    m = n_w - 1
    targets = rng.normal(size=(N, 1))
    regressors = rng.normal(size=(N, n_w))
    return RegressionData(targets=targets, regressors=regressors, n=1, m=m, N=N)


def free_mask(reg):
    from netrecon import Mask
    return Mask(free=np.ones(reg.N_w, dtype=bool), mode="unconstrained",
                n=reg.n, p=reg.n, m=reg.m)


# ---------------------------------------------------------------------------
# regression assembly

def test_assemble_scalar_stacking():
    from netrecon import SmoothPass
    xs = np.array([[0.5], [1.5], [2.5]])  # x0, x1, x2 smoothed means
    sp = SmoothPass(x_sm=xs, P_sm=np.zeros((3, 1, 1)), J=np.zeros((2, 1, 1)),
                    M_sm=np.zeros((3, 1, 1)))
    from netrecon import Dataset
    data = Dataset(Y=[[1.0], [2.0]], U=[[0.1], [0.2]], N=2)
    reg = assemble_regression(sp, data, n=1)
    assert np.array_equal(reg.y_vec, [2.5, 1.5])
    assert np.array_equal(reg.phi, [[1.5, 0.2], [0.5, 0.1]])
    assert reg.N_y == 2 and reg.N_w == 2


def test_assemble_noise_free_identity():
    rng = np.random.default_rng(0)
    model = random_stable_model(rng, n=3, p=3, m=3, sigma=1.0,
                                rich_prior=False)
    data = simulate(model, 15, seed=3)
    # exact state sequence stands in for the smoothed means
    from netrecon import SmoothPass, Dataset
    x = np.zeros((16, 3))
    x[0] = model.m0
    r = np.random.default_rng(99)
    U = r.normal(size=(15, 3))
    for k in range(1, 16):
        x[k] = model.A @ x[k - 1] + model.B @ U[k - 1]
    data = Dataset(Y=x[1:], U=U, N=15)
    sp = SmoothPass(x_sm=x, P_sm=np.zeros((16, 3, 3)), J=np.zeros((15, 3, 3)),
                    M_sm=np.zeros((16, 3, 3)))
    reg = assemble_regression(sp, data, n=3)
    w_true = np.concatenate([model.A.ravel(order="F"), model.B.ravel(order="F")])
    assert np.abs(reg.y_vec - reg.phi @ w_true).max() <= 1e-12


def test_gram_matches_per_step_kronecker_blocks():
    rng = np.random.default_rng(1)
    model = random_stable_model(rng, n=2, p=2, m=2)
    data = simulate(model, 8, seed=5)
    _, sp = smooth(model, data)
    reg = assemble_regression(sp, data, n=2)
    blocks = sum(
        np.kron(np.outer(np.concatenate([sp.x_sm[k - 1], data.U[k - 1]]),
                         np.concatenate([sp.x_sm[k - 1], data.U[k - 1]])),
                np.eye(2))
        for k in range(1, 9))
    assert np.allclose(reg.phi.T @ reg.phi, blocks, atol=1e-10)


# ---------------------------------------------------------------------------
# posterior

def test_posterior_identity_design_closed_form():
    reg = RegressionData(targets=np.array([[1.0], [0.0]]),
                         regressors=np.eye(2), n=1, m=1, N=2)
    y = reg.y_vec
    mu, Sig = posterior(reg, gamma=np.ones(2), sigma2=1.0)
    assert np.allclose(mu, y / 2, atol=1e-12)
    assert np.allclose(Sig, 0.5 * np.eye(2), atol=1e-12)


def test_posterior_pruned_coordinate_is_zero():
    rng = np.random.default_rng(2)
    reg = generic_regression(rng, N=12, n_w=4)
    gamma = np.array([1.0, 0.0, 2.0, 0.5])
    mu, Sig = posterior(reg, gamma, sigma2=0.3)
    assert mu[1] == 0.0
    assert np.all(Sig[1, :] == 0.0) and np.all(Sig[:, 1] == 0.0)


def test_posterior_matches_normal_equations_ridge():
    rng = np.random.default_rng(3)
    for _ in range(5):
        reg = generic_regression(rng, N=20, n_w=6)
        gamma = rng.uniform(0.1, 3.0, 6)
        gamma[rng.integers(0, 6)] = 0.0
        sigma2 = rng.uniform(0.05, 2.0)
        mu, Sig = posterior(reg, gamma, sigma2)
        mu_o, Sig_o = ridge_posterior_dense(reg.phi, reg.y_vec, gamma, sigma2)
        assert np.abs(mu - mu_o).max() <= 1e-8
        assert np.abs(Sig - Sig_o).max() <= 1e-8


def test_posterior_structured_rows_match_dense_ridge():
    rng = np.random.default_rng(4)
    model = random_stable_model(rng, n=3, p=2, m=2)
    data = simulate(model, 10, seed=8)
    _, sp = smooth(model, data)
    reg = assemble_regression(sp, data, n=3)
    gamma = rng.uniform(0.2, 2.0, reg.N_w)
    gamma[rng.random(reg.N_w) < 0.3] = 0.0
    mu, Sig = posterior(reg, gamma, sigma2=0.7)
    mu_o, Sig_o = ridge_posterior_dense(reg.phi, reg.y_vec, gamma, 0.7)
    assert np.abs(mu - mu_o).max() <= 1e-8
    assert np.abs(Sig - Sig_o).max() <= 1e-8


def test_posterior_noiseless_limit_matches_pseudoinverse():
    rng = np.random.default_rng(5)
    reg = generic_regression(rng, N=20, n_w=8)
    gamma = rng.uniform(0.5, 2.0, 8)
    mu_tiny, _ = posterior(reg, gamma, sigma2=1e-12)
    mu_zero, _ = posterior(reg, gamma, sigma2=0.0)
    mu_o = pinv_posterior_dense(reg.phi, reg.y_vec, gamma)
    assert np.abs(mu_tiny - mu_o).max() <= 1e-6
    assert np.abs(mu_zero - mu_o).max() <= 1e-6


def test_posterior_underdetermined_noiseless_covariance():
    # more weights than observations: null-space directions keep prior variance
    rng = np.random.default_rng(6)
    reg = generic_regression(rng, N=4, n_w=8)
    gamma = rng.uniform(0.5, 2.0, 8)
    mu, Sig = posterior(reg, gamma, sigma2=0.0)
    Phi = reg.phi
    G12 = np.sqrt(gamma)
    proj = np.eye(8) - G12[:, None] * np.linalg.pinv(Phi * G12[None, :]) @ Phi
    Sig_o = proj * gamma[None, :]
    assert np.abs(Sig - Sig_o).max() <= 1e-8


def test_posterior_consistency_identity():
    rng = np.random.default_rng(7)
    reg = generic_regression(rng, N=15, n_w=5)
    gamma = rng.uniform(0.3, 2.0, 5)
    sigma2 = 0.4
    mu, Sig = posterior(reg, gamma, sigma2)
    lhs = (np.diag(1.0 / gamma) + reg.phi.T @ reg.phi / sigma2) @ Sig
    assert np.abs(lhs - np.eye(5)).max() <= 1e-8


def test_posterior_empty_active_set():
    rng = np.random.default_rng(8)
    reg = generic_regression(rng, N=6, n_w=3)
    mu, Sig = posterior(reg, np.zeros(3), sigma2=1.0)
    assert np.all(mu == 0.0) and np.all(Sig == 0.0)


# ---------------------------------------------------------------------------
# marginal likelihood

def test_marginal_zero_design_closed_form():
    rng = np.random.default_rng(9)
    targets = rng.normal(size=(4, 1))
    reg = RegressionData(targets=targets, regressors=np.zeros((4, 3)),
                         n=1, m=2, N=4)
    y = reg.y_vec
    sigma2 = 0.8
    expected = -0.5 * (4 * np.log(2 * np.pi) + 4 * np.log(sigma2)
                       + y @ y / sigma2)
    assert marginal_loglik(reg, np.ones(3), sigma2) == pytest.approx(expected)
    # all-zero gamma gives the same value for any design
    reg2 = generic_regression(rng, N=4, n_w=3)
    reg2.targets[:] = targets
    reg2.__post_init__()
    assert marginal_loglik(reg2, np.zeros(3), sigma2) == pytest.approx(expected)


def test_marginal_matches_dense_formula():
    rng = np.random.default_rng(10)
    for _ in range(5):
        reg = generic_regression(rng, N=12, n_w=5)
        gamma = rng.uniform(0.0, 2.0, 5)
        sigma2 = rng.uniform(0.1, 1.5)
        dense = evidence_dense(reg.phi, reg.y_vec, gamma, sigma2)
        assert marginal_loglik(reg, gamma, sigma2) == pytest.approx(dense, abs=1e-8)


def test_marginal_structured_matches_dense():
    rng = np.random.default_rng(11)
    model = random_stable_model(rng, n=2, p=2, m=2)
    data = simulate(model, 6, seed=13)
    _, sp = smooth(model, data)
    reg = assemble_regression(sp, data, n=2)
    gamma = rng.uniform(0.0, 1.5, reg.N_w)
    dense = evidence_dense(reg.phi, reg.y_vec, gamma, 0.6)
    assert marginal_loglik(reg, gamma, 0.6) == pytest.approx(dense, abs=1e-8)


# ---------------------------------------------------------------------------
# identifiability masks

def mask_matrices(mask):
    freeA = mask.free[: mask.n * mask.n].reshape((mask.n, mask.n), order="F")
    freeB = mask.free[mask.n * mask.n:].reshape((mask.n, mask.m), order="F")
    return freeA, freeB


def test_diag_b_mask_example():
    mask = identifiability_mask(n=3, p=2, m=2, mode="diag_b")
    freeA, freeB = mask_matrices(mask)
    assert freeA.all()
    expected = np.zeros((3, 2), dtype=bool)
    expected[0, 0] = expected[1, 1] = True
    assert np.array_equal(freeB, expected)


def test_p_diag_mask_example():
    mask = identifiability_mask(n=4, p=2, m=2, mode="p_diag", p22=1)
    freeA, freeB = mask_matrices(mask)
    # A11 (2x2) and A21 (2x2) fully free
    assert freeA[:2, :2].all() and freeA[2:, :2].all()
    # A12 zero pattern: (1,2) and (2,1) of the block pinned
    assert freeA[0, 2] and not freeA[0, 3]
    assert not freeA[1, 2] and freeA[1, 3]
    # A22 zero pattern: (2,1) of the block pinned
    assert freeA[2, 2] and freeA[2, 3] and not freeA[3, 2] and freeA[3, 3]
    # B1: only (2,2) free; B2: only (1,1) free
    assert np.array_equal(freeB, np.array([[False, False],
                                           [False, True],
                                           [True, False],
                                           [False, False]]))


def test_p_diag_p22_zero_vs_diag_b_off_diagonal_agreement():
    n, p = 6, 3
    pd = identifiability_mask(n, p, p, "p_diag", p22=0)
    db = identifiability_mask(n, p, p, "diag_b")
    _, freeB_pd = mask_matrices(pd)
    _, freeB_db = mask_matrices(db)
    diag_slots = np.zeros((n, p), dtype=bool)
    diag_slots[np.arange(p), np.arange(p)] = True          # diag_b free slots
    diag_slots[p + np.arange(p), np.arange(p)] = True      # p_diag b^ slots
    assert np.array_equal(freeB_pd[~diag_slots], freeB_db[~diag_slots])
    assert not freeB_pd[~diag_slots].any()


def test_mask_rejects_non_square_input_map():
    with pytest.raises(IdentifiabilityError):
        identifiability_mask(n=4, p=2, m=3, mode="diag_b")
    with pytest.raises(IdentifiabilityError):
        identifiability_mask(n=4, p=2, m=3, mode="p_diag", p22=1)
    with pytest.raises(IdentifiabilityError, match="p22"):
        identifiability_mask(n=4, p=2, m=2, mode="p_diag", p22=5)
    with pytest.raises(IdentifiabilityError, match="n - p"):
        identifiability_mask(n=3, p=3, m=3, mode="p_diag", p22=0)


# ---------------------------------------------------------------------------
# inner EM

def test_sbl_em_zero_target_prunes_everything():
    rng = np.random.default_rng(12)
    reg = generic_regression(rng, N=20, n_w=6)
    reg.targets[:] = 0.0
    reg.__post_init__()
    state = sbl_em(reg, free_mask(reg), opts=SBLOptions(max_iter=300))
    assert not state.active.any()
    assert np.all(state.mu_w == 0.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sbl_em_noiseless_support_recovery_single():
    rng = np.random.default_rng(13)
    reg = generic_regression(rng, N=100, n_w=50)
    w0 = np.zeros(50)
    support = rng.choice(50, size=5, replace=False)
    w0[support] = rng.normal(size=5) + np.sign(rng.normal(size=5))
    reg.targets = (reg.regressors @ w0)[:, None]
    reg.__post_init__()
    state = sbl_em(reg, free_mask(reg),
                   opts=SBLOptions(max_iter=300, tol=0.0))
    assert set(np.nonzero(state.active)[0]) == set(support)
    assert np.abs(state.mu_w - w0).max() <= 1e-4


def test_sbl_em_masked_coordinates_never_enter():
    rng = np.random.default_rng(14)
    reg = generic_regression(rng, N=30, n_w=8)
    from netrecon import Mask
    free = np.ones(8, dtype=bool)
    free[[2, 5]] = False
    mask = Mask(free=free, mode="unconstrained", n=1, p=1, m=7)
    state = sbl_em(reg, mask)
    assert state.gamma[2] == 0.0 and state.gamma[5] == 0.0
    assert state.mu_w[2] == 0.0 and state.mu_w[5] == 0.0


def test_sbl_em_active_set_monotone_and_evidence_ascends():
    rng = np.random.default_rng(15)
    reg = generic_regression(rng, N=40, n_w=10)
    w0 = np.zeros(10)
    w0[[1, 4]] = [1.5, -2.0]
    reg.targets = (reg.regressors @ w0 + 0.1 * rng.normal(size=40))[:, None]
    reg.__post_init__()
    state = sbl_em(reg, free_mask(reg), opts=SBLOptions(max_iter=100))
    path = state.n_active_path
    assert all(a >= b for a, b in zip(path, path[1:]))
    ev = state.evidence
    assert all(b >= a - 1e-10 for a, b in zip(ev, ev[1:]))


def test_sbl_em_sigma2_stays_positive():
    rng = np.random.default_rng(16)
    reg = generic_regression(rng, N=25, n_w=5)
    state = sbl_em(reg, free_mask(reg), opts=SBLOptions(max_iter=50))
    assert state.sigma2 > 0.0


def test_sbl_em_frozen_sigma2():
    rng = np.random.default_rng(17)
    reg = generic_regression(rng, N=25, n_w=5)
    init = initial_sbl_state(reg, free_mask(reg), sigma2=0.123)
    state = sbl_em(reg, free_mask(reg), init=init,
                   opts=SBLOptions(max_iter=20, update_sigma2=False))
    assert state.sigma2 == 0.123


def test_sbl_em_sigma2_denominator_switch():
    rng = np.random.default_rng(18)
    model = random_stable_model(rng, n=2, p=2, m=2)
    data = simulate(model, 12, seed=19)
    _, sp = smooth(model, data)
    reg = assemble_regression(sp, data, n=2)
    mask = identifiability_mask(2, 2, 2, "diag_b")
    a = sbl_em(reg, mask, opts=SBLOptions(max_iter=5, sigma2_denominator="n_y"))
    b = sbl_em(reg, mask, opts=SBLOptions(max_iter=5,
                                          sigma2_denominator="n_samples"))
    assert a.sigma2 != b.sigma2
    with pytest.raises(ValueError, match="sigma2_denominator"):
        sbl_em(reg, mask, opts=SBLOptions(sigma2_denominator="bogus"))


def test_sbl_state_invariants_after_run():
    rng = np.random.default_rng(19)
    reg = generic_regression(rng, N=30, n_w=6)
    state = sbl_em(reg, free_mask(reg), opts=SBLOptions(max_iter=40))
    inactive = ~state.active
    assert np.all(state.gamma[inactive] == 0.0)
    assert np.all(state.mu_w[inactive] == 0.0)
    assert np.all(state.Sigma_w[inactive, :] == 0.0)
    act = state.active
    if act.any():
        Sig_a = state.Sigma_w[np.ix_(act, act)]
        assert np.abs(Sig_a - Sig_a.T).max() <= 1e-12
        assert np.linalg.eigvalsh(Sig_a).min() >= -1e-12


def test_regression_from_moments_matches_plugin_when_certain():
    # with all smoothing covariances zero the moment regression carries the
    # same sufficient statistics as the plug-in design
    from netrecon import regression_from_moments, expectation_sums, Dataset, SmoothPass

    rng = np.random.default_rng(20)
    model = random_stable_model(rng, n=2, p=2, m=2)
    data = simulate(model, 12, seed=21)
    _, sp = smooth(model, data)
    sp0 = SmoothPass(x_sm=sp.x_sm, P_sm=np.zeros_like(sp.P_sm), J=sp.J,
                     M_sm=np.zeros_like(sp.M_sm))
    es = expectation_sums(sp0, data, model.m0)
    reg_plug = assemble_regression(sp0, data, n=2)
    reg_mom = regression_from_moments(es, n=2, m=2)
    assert reg_mom.N == data.N
    assert np.allclose(reg_mom.zz, reg_plug.zz, atol=1e-10)
    assert np.allclose(reg_mom.xz, reg_plug.xz, atol=1e-10)
    assert np.allclose(reg_mom.y_sq_rows, reg_plug.y_sq_rows, atol=1e-10)
    gamma = rng.uniform(0.2, 2.0, reg_plug.N_w)
    mu_a, Sig_a = posterior(reg_plug, gamma, 0.5)
    mu_b, Sig_b = posterior(reg_mom, gamma, 0.5)
    assert np.abs(mu_a - mu_b).max() <= 1e-8
    assert np.abs(Sig_a - Sig_b).max() <= 1e-8


def test_regression_from_moments_includes_covariance_information():
    from netrecon import regression_from_moments, expectation_sums

    rng = np.random.default_rng(22)
    model = random_stable_model(rng, n=2, p=2, m=2)
    data = simulate(model, 15, seed=23)
    _, sp = smooth(model, data)
    es = expectation_sums(sp, data, model.m0)
    reg = regression_from_moments(es, n=2, m=2)
    # the synthetic design reproduces the exact second moments
    assert np.allclose(reg.zz, es.S_zz, atol=1e-10)
    assert np.allclose(reg.xz, es.S_xz, atol=1e-10)
    assert np.allclose(reg.y_sq_rows, np.diag(es.S_xx), atol=1e-10)
