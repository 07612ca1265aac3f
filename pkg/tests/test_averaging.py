import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from famma.averaging import (
    QuadraticWeightCriterion,
    WeightVector,
    WhitenedDesign,
    amma,
    build_candidates,
    conditional_risk,
    criterion_decomposition_check,
    efficiency_ratio,
    famma,
    gls_fit,
    grid_weights,
    gse_loss,
    minimize_over_HN,
    risk_criterion,
    single_model_risks,
)
from famma.covest import RankDeficientError, estimate_inverse, modified_cholesky
from famma.timeseries import ErrorProcessSpec, autocovariances, simulate_errors

from oracles import grid_min_HN, mma_criterion, mma_select


def ar1_pair(n, rho=0.5):
    acf = autocovariances(ErrorProcessSpec.ar([-rho]), n - 1)
    return acf.toeplitz(n), modified_cholesky(acf, n).inverse()


def instance(seed, n=60, p=6, rho=0.5):
    rng = np.random.default_rng(seed)
    Sigma, Sinv = ar1_pair(n, rho)
    X = rng.standard_normal((n, p))
    mu = X @ (np.arange(1, p + 1) ** -1.5) + 0.2 * rng.standard_normal(n)
    e = np.linalg.cholesky(Sigma) @ rng.standard_normal(n)
    return X, mu, mu + e, Sigma, Sinv


def random_simplex(rng, M, size):
    return rng.dirichlet(np.ones(M), size=size)


# -- GLS ----------------------------------------------------------------------

def test_gls_identity_is_ols():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((30, 4)), rng.standard_normal(30)
    fitted, theta = gls_fit(X, Y, np.eye(30))
    np.testing.assert_allclose(theta, np.linalg.solve(X.T @ X, X.T @ Y), atol=1e-9)
    np.testing.assert_allclose(fitted, X @ theta)


def test_gls_exact_in_span():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((25, 3))
    Y = X @ [1.0, 2.0, -1.0]
    _, Sinv = ar1_pair(25)
    fitted, _ = gls_fit(X, Y, Sinv)
    np.testing.assert_allclose(fitted, Y, atol=1e-12)


def test_gls_w_orthogonality():
    X, _, Y, _, Sinv = instance(2, n=40, p=3)
    fitted, _ = gls_fit(X, Y, Sinv)
    r = Y - fitted
    assert np.max(np.abs(X.T @ Sinv @ r)) < 1e-8 * math.sqrt(Y @ Sinv @ Y)


def test_gls_rejects_rank_deficiency_and_bad_weights():
    X = np.ones((10, 2))
    with pytest.raises(RankDeficientError):
        gls_fit(X, np.ones(10), np.eye(10))
    with pytest.raises(ValueError):
        gls_fit(np.eye(10)[:, :2], np.ones(10), -np.eye(10))
    with pytest.raises(ValueError):
        gls_fit(np.eye(10)[:, :2], np.ones(10), np.triu(np.ones((10, 10))))


# -- candidates ---------------------------------------------------------------

def test_single_candidate_matches_gls_fit():
    X, _, Y, _, Sinv = instance(3)
    fits = build_candidates(X, Y, (4,), Sinv)
    fitted, theta = gls_fit(X[:, :4], Y, Sinv)
    np.testing.assert_allclose(fits.fitted[:, 0], fitted, atol=1e-12)
    np.testing.assert_allclose(fits.coefficients[0], theta, atol=1e-12)


def test_nested_ls_rss_nonincreasing():
    X, _, Y, _, _ = instance(4)
    fits = build_candidates(X, Y, (1, 2, 3, 4, 5, 6), np.eye(len(Y)), "identity")
    rss = ((Y[:, None] - fits.fitted) ** 2).sum(axis=0)
    assert np.all(np.diff(rss) <= 1e-10)


def test_whitened_projection_algebra():
    X, _, Y, Sigma, Sinv = instance(5, n=60)
    sizes = (1, 2, 4, 6)
    fits = build_candidates(X, Y, sizes, Sinv)
    R = WhitenedDesign.from_covariance(Sigma).inv_sqrt
    Rinv = np.linalg.inv(R)
    for m, k in enumerate(sizes):
        Z = R @ X[:, :k]
        P = Z @ np.linalg.solve(Z.T @ Z, Z.T)  # explicit whitened projection
        assert np.linalg.norm(P @ P - P, 2) < 1e-8
        assert np.linalg.norm(P - P.T, 2) < 1e-8
        assert np.trace(P) == pytest.approx(k, abs=1e-6)
        # Sigma^{-1/2} P*_m = P_m Sigma^{-1/2}
        np.testing.assert_allclose(R @ fits.projection(m), P @ R, atol=1e-8)
        np.testing.assert_allclose(fits.projection(m), Rinv @ P @ R, atol=1e-8)


def test_candidates_validate_sizes():
    X, _, Y, _, Sinv = instance(6)
    with pytest.raises(ValueError):
        build_candidates(X, Y, (2, 2), Sinv)
    with pytest.raises(ValueError):
        build_candidates(X, Y, (1, 7), Sinv)


def test_candidate_rank_failure_names_model():
    X, _, Y, _, Sinv = instance(7)
    X = X.copy()
    X[:, 2] = X[:, 0]
    with pytest.raises(RankDeficientError) as info:
        build_candidates(X, Y, (1, 2, 3, 4), Sinv)
    assert info.value.model_index == 2


# -- criteria -----------------------------------------------------------------

def direct_mallows(Y, F, S, k, w):
    r = Y - F @ w
    return r @ S @ r + 2 * k @ w


def test_amma_identity_is_hansen_mma():
    X, _, Y, _, _ = instance(8)
    sizes = (1, 2, 3, 5)
    I = np.eye(len(Y))
    crit = amma(build_candidates(X, Y, sizes, I, "identity"), Y, I)
    Q, b, c, F = mma_criterion(X, Y, sizes)
    rng = np.random.default_rng(0)
    for w in random_simplex(rng, 4, 20):
        r = Y - F @ w
        assert abs(crit.value(w) - (r @ r + 2 * np.dot(sizes, w))) < 1e-10 * max(1, Y @ Y)


def test_amma_cross_evaluation_and_unit_weights():
    X, _, Y, _, Sinv = instance(9)
    sizes = (1, 2, 3, 4, 6)
    fits = build_candidates(X, Y, sizes, Sinv)
    crit = amma(fits, Y, Sinv)
    k = np.asarray(sizes, float)
    for m in range(5):
        e = np.eye(5)[m]
        r = Y - fits.fitted[:, m]
        assert crit.value(e) == pytest.approx(r @ Sinv @ r + 2 * k[m], rel=1e-12)
    rng = np.random.default_rng(1)
    W = random_simplex(rng, 5, 20)
    direct = np.array([direct_mallows(Y, fits.fitted, Sinv, k, w) for w in W])
    assert np.max(np.abs(crit.values(W) - direct)) < 1e-8


def test_famma_with_exact_inverse_equals_amma():
    X, _, Y, _, Sinv = instance(10)
    fits = build_candidates(X, Y, (1, 3, 5), Sinv)
    a, f = amma(fits, Y, Sinv), famma(fits, Y, Sinv)
    assert np.array_equal(a.Q, f.Q) and np.array_equal(a.b, f.b) and a.c == f.c
    assert f.provenance == "FAMMA"


def test_famma_with_banded_estimate():
    X, _, Y, _, _ = instance(11, n=120)
    est = estimate_inverse(Y, X, 3, 3)
    fits = build_candidates(X, Y, (1, 2, 3, 4), est.precision, "estimated")
    crit = famma(fits, Y, est.precision)
    rng = np.random.default_rng(2)
    W = random_simplex(rng, 4, 20)
    direct = [direct_mallows(Y, fits.fitted, est.precision, fits.k, w) for w in W]
    assert np.max(np.abs(crit.values(W) - direct)) < 1e-8
    assert crit.fits_weighting == "estimated"


def test_mallows_requires_matching_weighting():
    X, _, Y, _, Sinv = instance(12)
    fits = build_candidates(X, Y, (1, 2), Sinv)
    with pytest.raises(ValueError):
        famma(fits, Y, np.eye(len(Y)))


def test_gse_loss_properties():
    X, mu, Y, _, Sinv = instance(13)
    fits = build_candidates(X, Y, (1, 2, 4), Sinv)
    crit = gse_loss(fits, mu, Sinv)
    assert np.linalg.eigvalsh(crit.Q)[0] > -1e-10
    d = fits.fitted[:, 1] - mu
    assert crit.value([0, 1, 0]) == pytest.approx(d @ Sinv @ d, rel=1e-10)
    # fits exactly equal to mu -> zero function
    fits0 = build_candidates(X, X[:, :2] @ [1.0, 1.0], (2, 3), Sinv)
    z = gse_loss(fits0, X[:, :2] @ [1.0, 1.0], Sinv)
    assert np.max(np.abs(z.Q)) < 1e-16 * len(Y) * 1e6


def test_loss_f_uses_exact_weighting_with_fgls_fits():
    X, mu, Y, _, Sinv = instance(14, n=100)
    est = estimate_inverse(Y, X, 3, 2)
    fits = build_candidates(X, Y, (1, 2, 3), est.precision, "estimated")
    crit = gse_loss(fits, mu, Sinv)
    w = np.array([0.2, 0.3, 0.5])
    d = fits.fitted @ w - mu
    assert crit.value(w) == pytest.approx(d @ Sinv @ d, rel=1e-10)
    assert crit.fits_weighting == "estimated"


def test_criterion_summary_is_json():
    crit = QuadraticWeightCriterion(np.eye(2), [1.0, 2.0], 3.0, "AMMA")
    assert json.loads(json.dumps(crit.summary()))["provenance"] == "AMMA"


# -- risk ---------------------------------------------------------------------

def test_risk_unit_weight_in_span():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((30, 5))
    mu = X[:, :2] @ [1.0, -1.0]
    assert conditional_risk([0, 1, 0], mu, X, (1, 2, 3), Sigma=np.eye(30)) == pytest.approx(2.0, abs=1e-10)


def test_risk_hand_expansion_two_models():
    X, mu, _, Sigma, _ = instance(15)
    sizes = (2, 5)
    R = WhitenedDesign.from_covariance(Sigma).inv_sqrt
    v = R @ mu

    def bias(k):
        Z = R @ X[:, :k]
        r = v - Z @ np.linalg.lstsq(Z, v, rcond=None)[0]
        return r @ r

    D1, D2 = bias(2) + 2, bias(5) + 5
    cross = bias(5) + 2  # max(m, l) = 2, min(k) = 2
    expected = 0.25 * (D1 + D2 + 2 * cross)
    assert conditional_risk([0.5, 0.5], mu, X, sizes, Sigma) == pytest.approx(expected, rel=1e-10)


def test_single_model_risks_consistency():
    X, mu, _, Sigma, _ = instance(16)
    sizes = (1, 2, 3, 5)
    D, kstar = single_model_risks(mu, X, sizes, Sigma)
    for m in range(4):
        assert D[m] == pytest.approx(conditional_risk(np.eye(4)[m], mu, X, sizes, Sigma), abs=1e-10)
    assert kstar == D.min()
    assert np.all(D >= np.asarray(sizes) - 1e-10)
    D0, k0 = single_model_risks(np.zeros(len(mu)), X, sizes, Sigma)
    np.testing.assert_allclose(D0, sizes, atol=1e-12)
    assert k0 == pytest.approx(1.0)


def test_single_model_risks_u_shape():
    n = 2000
    rng = np.random.default_rng(17)
    X = rng.standard_normal((n, 60))
    mu = X @ (np.arange(1, 61) ** -1.5)  # D(m) ~ n m^-2 / 2 + m, minimum near m = 13
    D, _ = single_model_risks(mu, X, range(1, 41), Sigma=np.eye(n))
    m = int(np.argmin(D))
    assert 0 < m < 39
    assert D[0] > D[m] and D[-1] > D[m]


def test_risk_criterion_psd():
    X, mu, _, Sigma, _ = instance(18)
    crit = risk_criterion(mu, X, (1, 2, 3, 4), Sigma)
    assert np.linalg.eigvalsh(crit.Q)[0] > -1e-10


def test_whitening_rejects_indefinite():
    with pytest.raises(np.linalg.LinAlgError):
        WhitenedDesign.from_covariance(np.diag([1.0, -1.0]))


def test_risk_matches_monte_carlo_loss():
    # fixed X and mu; L*(w) averaged over fresh errors approaches R*(w)
    n, sizes = 80, (1, 2, 3, 4)
    X, mu, _, Sigma, Sinv = instance(19, n=n)
    C = np.linalg.cholesky(Sigma)
    rng = np.random.default_rng(20)
    w = np.array([0.1, 0.2, 0.3, 0.4])
    losses = []
    for _ in range(1000):
        Y = mu + C @ rng.standard_normal(n)
        losses.append(gse_loss(build_candidates(X, Y, sizes, Sinv, check=False), mu, Sinv).value(w))
    losses = np.asarray(losses)
    R = conditional_risk(w, mu, X, sizes, Sigma)
    assert abs(losses.mean() - R) <= 3 * losses.std(ddof=1) / math.sqrt(len(losses))


# -- decomposition identity ---------------------------------------------------

def test_decomposition_identity_random():
    rng = np.random.default_rng(21)
    for s in range(10):
        X, mu, Y, _, Sinv = instance(100 + s)
        fits = build_candidates(X, Y, (1, 2, 4, 6), Sinv)
        C = amma(fits, Y, Sinv)
        w = rng.dirichlet(np.ones(4))
        assert criterion_decomposition_check(fits, Y, mu, Sinv, w) < 1e-8 * max(1, abs(C.value(w)))


def test_decomposition_unit_and_zero_mean():
    X, _, Y, _, Sinv = instance(22)
    mu = np.zeros(len(Y))
    fits = build_candidates(X, Y, (1, 3), Sinv)
    C = amma(fits, Y, Sinv)
    for w in ([1.0, 0.0], [0.0, 1.0], [0.3, 0.7]):
        assert criterion_decomposition_check(fits, Y, mu, Sinv, w) < 1e-8 * max(1, abs(C.value(w)))


# -- weights, grid and optimizer ----------------------------------------------

def test_weight_vector_invariants():
    w = WeightVector([0.5, 0.0, 0.5], 2, 0.1)
    assert w.support == (0, 2)
    assert w.to_list() == [{"index": 0, "value": 0.5}, {"index": 2, "value": 0.5}]
    for bad in ([0.5, 0.6, -0.1], [0.95, 0.05, 0.0], [0.4, 0.3, 0.3], [0.5, 0.4, 0.0]):
        with pytest.raises(ValueError):
            WeightVector(bad, 2, 0.1)


def test_grid_weights_examples():
    np.testing.assert_array_equal(grid_weights(2, 2), [[0, 1], [0.5, 0.5], [1, 0]])
    assert sorted(map(tuple, grid_weights(3, 1))) == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]
    G = grid_weights(4, 3)
    assert len(G) == math.comb(6, 3) == 20
    np.testing.assert_allclose(G.sum(axis=1), 1.0)
    assert len({tuple(r) for r in G}) == 20
    with pytest.raises(ValueError, match="points"):
        grid_weights(30, 30, cap=1000)


def test_optimizer_symmetric_example():
    res = minimize_over_HN(QuadraticWeightCriterion(np.eye(2), [0, 0], 0, "t"), 2, 0.1)
    np.testing.assert_allclose(res.weights.values, [0.5, 0.5])
    assert res.value == pytest.approx(0.5)


def test_optimizer_single_support():
    crit = QuadraticWeightCriterion(np.diag([1.0, 4.0]), [0, 0], 0, "t")
    res = minimize_over_HN(crit, 1, 0.1)
    np.testing.assert_array_equal(res.weights.values, [1.0, 0.0])
    assert res.value == 1.0


def test_optimizer_interior_example_vs_grid():
    crit = QuadraticWeightCriterion(np.diag([1.0, 4.0]), [0, 0], 0, "t")
    res = minimize_over_HN(crit, 2, 0.1)
    np.testing.assert_allclose(res.weights.values, [0.8, 0.2], atol=1e-14)
    assert res.value == pytest.approx(0.8, abs=1e-14)
    t = np.arange(1000, 9001) / 1e4
    grid = t**2 + 4 * (1 - t) ** 2
    assert abs(grid.min() - res.value) < 1e-6


def test_optimizer_pinned_at_delta():
    # unconstrained optimum would put a negative weight on model 2
    crit = QuadraticWeightCriterion(np.diag([1.0, 1.0]), [0.0, 5.0], 0, "t")
    res = minimize_over_HN(crit, 2, 0.1)
    assert res.weights.values[1] in (0.0, 0.1)
    v, sup, _ = grid_min_HN(crit.Q, crit.b, crit.c, 2, 0.1)
    assert res.value <= v + 1e-12
    assert res.weights.support == sup


@pytest.mark.parametrize("seed", range(5))
def test_optimizer_vs_discrete_grid_and_fine_grid(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((5, 5))
    crit = QuadraticWeightCriterion(A @ A.T, rng.standard_normal(5), 1.0, "t")
    res = minimize_over_HN(crit, 3, 0.05)
    # H_n(60) intersected with H_N
    G = grid_weights(5, 60)
    nz = G != 0
    ok = (nz.sum(axis=1) <= 3) & np.all(~nz | (G >= 0.05 - 1e-12), axis=1)
    assert res.value <= crit.values(G[ok]).min() + 1e-12
    v, sup, _ = grid_min_HN(crit.Q, crit.b, crit.c, 3, 0.05)
    assert 0 <= v - res.value < 2e-4
    assert res.weights.support == sup
    assert res.value == pytest.approx(crit.value(res.weights.values), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_optimizer_result_in_HN(M, N, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((M, M))
    delta = 0.9 / N / 2
    crit = QuadraticWeightCriterion(A @ A.T, rng.standard_normal(M) * 3, 0.0, "t")
    res = minimize_over_HN(crit, N, delta)
    w = res.weights.values
    assert math.fsum(w) == 1.0
    assert np.all((w == 0) | (w >= delta))
    assert np.count_nonzero(w) <= N
    assert res.value == pytest.approx(crit.value(w), abs=1e-10)
    for m in range(M):  # unit vectors lie in H_N
        assert res.value <= crit.value(np.eye(M)[m]) + 1e-12


def test_optimizer_tie_break_lexicographic():
    # all unit vectors tie: support (0,) wins
    crit = QuadraticWeightCriterion(np.eye(3), [0.0, 0.0, 0.0], 0.0, "t")
    res = minimize_over_HN(crit, 1, 0.1)
    np.testing.assert_array_equal(res.weights.values, [1, 0, 0])
    assert res.ties
    # a duplicated model: (0, 1) and (0, 2) give equal minima; (0, 1) wins
    Q = np.array([[2.0, 0, 0], [0, 1.0, 1.0], [0, 1.0, 1.0]])
    res = minimize_over_HN(QuadraticWeightCriterion(Q, [0, 0, 0], 0, "t"), 2, 0.1, tie_tol=1e-12)
    assert res.weights.support[0] == 0 and res.weights.support[1] == 1


def test_optimizer_semidefinite_kkt_min_norm():
    # identical models: singular KKT matrix on a support of size 3
    Q = np.ones((3, 3))
    res = minimize_over_HN(QuadraticWeightCriterion(Q, [0, 0, 0], 0, "t"), 3, 0.1)
    assert res.value == pytest.approx(1.0)
    assert res.skipped_supports == 0


def test_optimizer_errors_and_greedy():
    crit = QuadraticWeightCriterion(np.eye(12), np.zeros(12), 0, "t")
    with pytest.raises(ValueError):
        minimize_over_HN(crit, 3, 0.4)
    with pytest.raises(ValueError, match="cap"):
        minimize_over_HN(crit, 3, 0.05, support_cap=100)
    g = minimize_over_HN(crit, 3, 0.05, method="greedy")
    assert g.approximate
    exact = minimize_over_HN(crit, 3, 0.05)
    assert not exact.approximate
    assert g.value >= exact.value - 1e-12
    d = exact.to_dict()
    assert set(d) >= {"weights", "value", "supports_examined", "ties"}
    assert d["supports_examined"] == 12 + 66 + 220


def test_efficiency_ratio():
    assert efficiency_ratio(3.0, 2.0) == 1.5
    with pytest.raises(ZeroDivisionError):
        efficiency_ratio(1.0, 0.0)


def test_ratio_at_loss_argmin_is_one():
    X, mu, Y, _, Sinv = instance(23)
    loss = gse_loss(build_candidates(X, Y, (1, 2, 3, 4), Sinv), mu, Sinv)
    best = minimize_over_HN(loss, 3, 0.05)
    assert efficiency_ratio(loss.value(best.weights.values), best.value) == 1.0


def test_amma_ratio_at_least_one():
    for s in range(5):
        X, mu, Y, _, Sinv = instance(200 + s)
        fits = build_candidates(X, Y, (1, 2, 3, 4, 5), Sinv)
        loss = gse_loss(fits, mu, Sinv)
        sel = minimize_over_HN(amma(fits, Y, Sinv), 3, 0.05)
        best = minimize_over_HN(loss, 3, 0.05)
        assert efficiency_ratio(loss.value(sel.weights.values), best.value) >= 1.0


def test_mma_reduction_bitwise():
    for s in range(5):
        X, _, Y, _, _ = instance(300 + s)
        sizes = (1, 2, 3, 4, 5)
        I = np.eye(len(Y))
        crit = famma(build_candidates(X, Y, sizes, I, "identity"), Y, I)
        Q, b, c, _ = mma_criterion(X, Y, sizes)
        assert np.array_equal(crit.Q, Q) and np.array_equal(crit.b, b) and crit.c == c
        w = minimize_over_HN(crit, 3, 0.05, tie_tol=0.0).weights.values
        assert w.tobytes() == mma_select(Q, b, c, 3, 0.05).tobytes()
