import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scalar_spec
from fedbilevel import (
    Dataset,
    DomainError,
    HyperCleanSpec,
    InvalidArgument,
    MetaLearnSpec,
    ProblemConstants,
    QuadraticBilevelSpec,
    delta_hat_squared,
    exact_hypergradient,
    exact_lower_solution,
    flip_labels,
    hvp_xy_g,
    hvp_yy_g,
    make_hyperclean_problem,
    make_logistic_data,
    make_metalearn_problem,
    make_quadratic_problem,
    measure_heterogeneity,
    metalearn_quadratic_spec,
    partition_dataset,
    random_quadratic,
    random_tasks,
    read_csv,
    sample_partials,
    upper_value,
    write_csv,
)


def quad(Q, P=None, r=None, S=None, u=None, R=None, sigma=0.0):
    """Single-client spec from plain matrices; unspecified parts are zero (P = I)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    p = Q.shape[0]
    P = np.eye(p) if P is None else np.atleast_2d(np.asarray(P, dtype=float))
    d = P.shape[1]
    z = lambda *s: np.zeros(s)  # noqa: E731
    return QuadraticBilevelSpec(
        Q[None], P[None], (z(p) if r is None else np.asarray(r, float))[None],
        (z(p, p) if S is None else np.asarray(S, float))[None], (z(p) if u is None else np.asarray(u, float))[None],
        (z(d, d) if R is None else np.asarray(R, float))[None], sigma=sigma)


# -- oracles ---------------------------------------------------------------------------------


def test_grad_y_g_vanishes_at_stationary_point():
    prob = make_quadratic_problem(quad(np.eye(2)))
    _, _, gyg = sample_partials(prob, 0, np.zeros(2), np.zeros(2), seed=0)
    assert np.array_equal(gyg, np.zeros(2))


def test_grad_y_f_of_shifted_square():
    prob = make_quadratic_problem(quad(np.eye(2), S=np.eye(2), u=[1.0, 0.0]))
    _, gyf, _ = sample_partials(prob, 0, np.zeros(2), np.zeros(2), seed=3)
    assert np.allclose(gyf, [-1.0, 0.0], atol=0)


def test_grad_y_g_is_unbiased_at_monte_carlo_rate():
    spec = random_quadratic(d=2, p=3, M=1, sigma=0.1, seed=1)
    prob = make_quadratic_problem(spec)
    x, y = np.array([0.3, -0.2]), np.array([0.1, 0.5, -0.4])
    N = 100_000
    acc = np.zeros(3)
    for s in range(N):
        acc += sample_partials(prob, 0, x, y, s)[2]
    exact = prob.grad_y_g(0, x, y)
    assert np.all(np.abs(acc / N - exact) <= 3 * 0.1 / math.sqrt(N))


def test_noise_variance_within_sigma_squared():
    prob = make_quadratic_problem(random_quadratic(d=3, p=4, M=1, sigma=0.2, seed=2))
    x, y = np.ones(3), np.ones(4)
    draws = np.array([np.concatenate(sample_partials(prob, 0, x, y, s)) for s in range(4000)])
    exact = np.concatenate([prob.grad_x_f(0, x, y), prob.grad_y_f(0, x, y), prob.grad_y_g(0, x, y)])
    # each of the three partials has E||noise||^2 = sigma^2
    per_partial = ((draws - exact) ** 2).sum(axis=1).mean() / 3
    assert per_partial <= 0.2 ** 2 * 1.1


def test_oracles_replay_per_seed(small_problem):
    x, y = np.ones(3), np.ones(4)
    a = sample_partials(small_problem, 2, x, y, 12345)
    b = sample_partials(small_problem, 2, x, y, 12345)
    c = sample_partials(small_problem, 2, x, y, 12346)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not np.array_equal(a[2], c[2])
    v = np.arange(4.0)
    assert np.array_equal(hvp_yy_g(small_problem, 1, x, y, v, 9), hvp_yy_g(small_problem, 1, x, y, v, 9))


def test_oracle_argument_errors(small_problem):
    x, y = np.zeros(3), np.zeros(4)
    with pytest.raises(InvalidArgument):
        sample_partials(small_problem, 3, x, y, 0)
    with pytest.raises(DomainError):
        sample_partials(small_problem, 0, np.array([np.nan, 0, 0]), y, 0)
    with pytest.raises(InvalidArgument):
        hvp_yy_g(small_problem, 0, x, y, np.ones(3), 0)
    with pytest.raises(InvalidArgument):
        hvp_xy_g(small_problem, 0, x, y, np.ones(5), 0)


def test_hessian_products_noiseless():
    prob = make_quadratic_problem(quad(np.diag([1.0, 2.0])))
    x, y = np.zeros(2), np.zeros(2)
    assert np.array_equal(hvp_yy_g(prob, 0, x, y, [1.0, 1.0], 0), [1.0, 2.0])
    v = np.array([0.5, -3.0])
    assert np.array_equal(hvp_xy_g(prob, 0, x, y, v, 0), -v)


def test_stochastic_hessian_product_is_unbiased():
    prob = make_quadratic_problem(random_quadratic(d=2, p=3, M=1, sigma=0.5, seed=4))
    x, y, v = np.zeros(2), np.zeros(3), np.array([1.0, -1.0, 0.5])
    N = 20_000
    draws = np.array([hvp_yy_g(prob, 0, x, y, v, s) for s in range(N)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(N)
    assert np.all(np.abs(draws.mean(axis=0) - prob.hvp_yy(0, x, y, v)) <= 4 * se)


def test_rayleigh_quotients_within_mu_and_L_g():
    spec = random_quadratic(d=3, p=6, M=3, mu=0.3, L_g=2.0, shared_hessians=False, seed=5)
    rng = np.random.default_rng(0)
    for m in range(3):
        for _ in range(100):
            v = rng.standard_normal(6)
            rq = v @ spec.Q[m] @ v / (v @ v)
            assert 0.3 - 1e-12 <= rq <= 2.0 + 1e-12


def test_construction_rejects_indefinite_and_asymmetric():
    with pytest.raises(InvalidArgument):
        quad(np.diag([1.0, -0.1]))
    with pytest.raises(InvalidArgument):
        quad([[1.0, 0.3], [0.0, 1.0]])
    with pytest.raises(InvalidArgument):
        quad(np.eye(2), S=-np.eye(2))


# -- exact quadratic oracles -----------------------------------------------------------------------


def test_lower_solution_identity_instance():
    spec = quad(np.eye(3))
    x = np.array([0.4, -1.0, 2.0])
    assert np.allclose(exact_lower_solution(spec, x), x, atol=1e-15)


def test_lower_solution_hand_solved():
    spec = quad(2 * np.eye(2), r=[2.0, 2.0])
    assert np.allclose(exact_lower_solution(spec, np.zeros(2)), [1.0, 1.0], atol=1e-15)


def test_lower_solution_is_kappa_lipschitz():
    spec = random_quadratic(d=4, p=3, M=3, shared_hessians=False, seed=6)
    c = spec.constants()
    kappa = c.derived().kappa
    rng = np.random.default_rng(1)
    for _ in range(100):
        x1, x2 = rng.standard_normal((2, 4)) * 3
        lhs = np.linalg.norm(exact_lower_solution(spec, x1) - exact_lower_solution(spec, x2))
        assert lhs <= kappa * np.linalg.norm(x1 - x2) * (1 + 1e-12)


def test_scalar_hypergradient():
    spec = scalar_spec()
    assert np.allclose(exact_hypergradient(spec, np.array([1.0])), [1.0], atol=1e-15)
    assert np.allclose(exact_hypergradient(spec, np.array([0.5])), [0.0], atol=1e-15)
    for x in (-2.0, 0.0, 3.5):
        assert math.isclose(exact_hypergradient(spec, np.array([x]))[0], 2 * x - 1, abs_tol=1e-14)


def test_hypergradient_matches_finite_differences_heterogeneous():
    spec = random_quadratic(d=3, p=5, M=4, shared_hessians=False, hetero=1.0, seed=9)
    rng = np.random.default_rng(2)
    h = 1e-5
    for _ in range(10):
        x = rng.standard_normal(3)
        g = exact_hypergradient(spec, x)
        fd = np.array([(upper_value(spec, x + h * e) - upper_value(spec, x - h * e)) / (2 * h) for e in np.eye(3)])
        assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)


def test_cached_problem_oracles_agree_with_reference():
    spec = random_quadratic(d=3, p=4, M=3, shared_hessians=False, seed=10)
    prob = make_quadratic_problem(spec)
    from fedbilevel import exact_indirect_grad

    rng = np.random.default_rng(3)
    for _ in range(5):
        x, y = rng.standard_normal(3), rng.standard_normal(4)
        assert np.allclose(prob.exact_lower_solution(x), exact_lower_solution(spec, x), atol=1e-12)
        assert np.allclose(prob.exact_hypergradient(x), exact_hypergradient(spec, x), atol=1e-12)
        for m in range(3):
            assert np.allclose(prob.exact_indirect_grad(m, x, y), exact_indirect_grad(spec, m, x, y), atol=1e-12)


# -- constants -------------------------------------------------------------------------------------


def test_constants_invariants():
    with pytest.raises(InvalidArgument):
        ProblemConstants(mu=2.0, L_g=1.0, L_f=1, L_gxy=0, L_gyy=0, C_fy=1, C_gxy=1)
    with pytest.raises(InvalidArgument):
        ProblemConstants(mu=0.0, L_g=1.0, L_f=1, L_gxy=0, L_gyy=0, C_fy=1, C_gxy=1)
    with pytest.raises(InvalidArgument):
        ProblemConstants(mu=0.5, L_g=1.0, L_f=-1, L_gxy=0, L_gyy=0, C_fy=1, C_gxy=1)
    with pytest.raises(InvalidArgument):
        ProblemConstants(mu=0.5, L_g=1.0, L_f=math.inf, L_gxy=0, L_gyy=0, C_fy=1, C_gxy=1)


def test_quadratic_constants_from_matrices():
    spec = random_quadratic(d=3, p=4, M=2, mu=0.25, L_g=3.0, c_gxy=0.7, seed=11)
    c = spec.constants()
    assert math.isclose(c.mu, 0.25, rel_tol=1e-9) and math.isclose(c.L_g, 3.0, rel_tol=1e-9)
    assert math.isclose(c.C_gxy, 0.7, rel_tol=1e-9)
    assert c.L_gxy == 0 and c.L_gyy == 0


pos = st.floats(0.01, 10.0)


@settings(max_examples=200, deadline=None)
@given(mu=pos, ratio=st.floats(1.0, 20.0), L_f=pos, L_gxy=pos, L_gyy=pos, C_fy=pos, C_gxy=pos,
       K=st.integers(1, 50), df=st.floats(0, 5), dg=st.floats(0, 5))
def test_derived_constants_recompute(mu, ratio, L_f, L_gxy, L_gyy, C_fy, C_gxy, K, df, dg):
    Lg = mu * ratio
    c = ProblemConstants(mu=mu, L_g=Lg, L_f=L_f, L_gxy=L_gxy, L_gyy=L_gyy, C_fy=C_fy, C_gxy=C_gxy,
                         delta_f=df, delta_g=dg)
    D = c.derived(K)
    kappa = C_gxy / mu
    inner = C_gxy * L_gyy / mu ** 2 + L_gxy / mu
    assert math.isclose(D.kappa, kappa, rel_tol=1e-12)
    assert math.isclose(D.L_y, inner * (1 + kappa), rel_tol=1e-12)
    assert math.isclose(D.L, (L_f + C_gxy * L_f / mu + C_fy * inner) * (1 + kappa), rel_tol=1e-12)
    lbar2 = L_f ** 2 + (L_gxy * C_fy / mu) ** 2 + (L_gyy * C_gxy * C_fy) ** 2 / mu ** 4 + (L_f * C_gxy / mu) ** 2
    assert math.isclose(D.L_bar ** 2, lbar2, rel_tol=1e-10)
    assert math.isclose(D.L_hat ** 2, 8 * lbar2, rel_tol=1e-10)
    den = 2 * mu * Lg - mu ** 2
    lk2 = 2 * L_f ** 2 + 6 * C_gxy ** 2 * L_f ** 2 * K / den + 6 * C_fy ** 2 * L_gxy ** 2 * K / den
    if Lg > mu:
        lk2 += 6 * C_gxy ** 2 * L_f ** 2 * K ** 3 * L_gyy ** 2 / ((Lg - mu) ** 2 * den)
        assert math.isclose(D.L_K ** 2, lk2, rel_tol=1e-10)
    dh2 = 4 * df ** 2 + 4 * C_fy ** 2 * dg ** 2 / mu ** 2 + 4 * C_gxy ** 2 * C_fy ** 2 * dg ** 2 / mu ** 4 \
        + 4 * C_gxy ** 2 * df ** 2 / mu ** 2
    assert math.isclose(D.delta_hat ** 2, dh2, rel_tol=1e-10, abs_tol=1e-300)


# -- heterogeneity ----------------------------------------------------------------------------------


def test_identical_clients_have_zero_heterogeneity():
    spec = random_quadratic(d=3, p=3, M=3, hetero=0.0, seed=12)
    rep = measure_heterogeneity(make_quadratic_problem(spec), np.ones(3), np.ones(3), num_probe_points=5)
    assert tuple(rep) == (0.0, 0.0)


def test_two_clients_differing_in_r():
    base = random_quadratic(d=2, p=3, M=1, seed=13)
    r2 = base.r[0] + np.array([0.3, -0.4, 1.2])
    two = QuadraticBilevelSpec(np.repeat(base.Q, 2, 0), np.repeat(base.P, 2, 0), np.stack([base.r[0], r2]),
                               np.repeat(base.S, 2, 0), np.repeat(base.u, 2, 0), np.repeat(base.R, 2, 0))
    prob = make_quadratic_problem(two)
    for seed in range(3):
        rep = measure_heterogeneity(prob, np.full(2, seed), np.zeros(3), num_probe_points=4, seed=seed)
        assert math.isclose(rep.delta_g, np.linalg.norm(r2 - base.r[0]), rel_tol=1e-12)
        assert rep.delta_f == 0.0


def test_heterogeneity_of_indirect_gradients_within_bound():
    for seed in range(5):
        spec = random_quadratic(d=3, p=4, M=3, shared_hessians=False, hetero=0.8, seed=seed)
        prob = make_quadratic_problem(spec)
        rep = measure_heterogeneity(prob, np.zeros(3), np.zeros(4), num_probe_points=10, radius=0.5)
        assert rep.within_bound
        assert math.isclose(rep.delta_hat_bound ** 2, delta_hat_squared(prob.constants, rep.delta_f, rep.delta_g))


# -- hyper-cleaning -------------------------------------------------------------------------------------


def _clean_problem(corrupt=0.0, nu=0.1, M=2, n=40, dim=3, batch=1):
    pool, _ = make_logistic_data(n + 20, dim, seed=1)
    train = pool.subset(np.arange(n))
    val = pool.subset(np.arange(n, n + 20))
    train, mask = flip_labels(train, corrupt, seed=2)
    parts = partition_dataset(train, M, "iid", seed=3)
    vparts = partition_dataset(val, M, "iid", seed=4)
    spec = HyperCleanSpec(parts, vparts, nu=nu, corruption_rate=corrupt, batch_size=batch)
    return make_hyperclean_problem(spec), parts, vparts


def test_uniform_weights_give_ridge_logistic_loss():
    prob, parts, _ = _clean_problem()
    y = np.array([0.3, -0.7, 1.1])
    for m, ds in enumerate(parts):
        z = ds.features @ y
        s = 2 * ds.labels - 1
        plain = np.mean(np.log1p(np.exp(-s * z)))
        assert math.isclose(prob.lower_value(m, np.zeros(prob.dim_upper), y), 0.5 * plain + 0.1 * y @ y,
                            rel_tol=1e-12)


def test_hyperclean_rejects_nonpositive_nu_and_empty_clients():
    with pytest.raises(InvalidArgument):
        _clean_problem(nu=0.0)
    ds = Dataset(np.ones((3, 2)), np.ones(3))
    empty = Dataset(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(InvalidArgument):
        make_hyperclean_problem(HyperCleanSpec([ds, empty], [ds, ds]))


def test_hyperclean_hessian_eigenvalues_at_least_two_nu():
    prob, _, _ = _clean_problem(corrupt=0.3, nu=0.05)
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = 3 * rng.standard_normal(prob.dim_upper)
        y = rng.standard_normal(prob.dim_lower)
        for m in range(prob.num_clients):
            ev = np.linalg.eigvalsh(prob.hessian_yy(m, x, y))
            assert ev.min() >= 2 * 0.05 - 1e-12
            assert ev.max() <= prob.constants.L_g + 1e-12


def test_hyperclean_weights_bounded():
    prob, _, _ = _clean_problem()
    w = prob.sample_weights(np.array([-800.0, -3.0, 0.0, 5.0, 40.0]))
    assert np.all(w >= 0) and np.all(w <= 1) and w[2] == 0.5


def _fd(fun, z, h=1e-6):
    return np.array([(fun(z + h * e) - fun(z - h * e)) / (2 * h) for e in np.eye(len(z))])


def test_hyperclean_oracles_match_finite_differences():
    prob, _, _ = _clean_problem(corrupt=0.2)
    rng = np.random.default_rng(5)
    x = rng.standard_normal(prob.dim_upper)
    y = rng.standard_normal(prob.dim_lower)
    v = rng.standard_normal(prob.dim_lower)
    for m in range(prob.num_clients):
        assert np.allclose(prob.grad_y_g(m, x, y), _fd(lambda yy: prob.lower_value(m, x, yy), y), atol=1e-8)
        assert np.allclose(prob.grad_y_f(m, x, y), _fd(lambda yy: prob.upper_value_at(m, yy), y), atol=1e-8)
        assert np.allclose(prob.hvp_yy(m, x, y, v), _fd(lambda yy: prob.grad_y_g(m, x, yy) @ v, y), atol=1e-7)
        assert np.allclose(prob.hvp_xy(m, x, y, v), _fd(lambda xx: prob.grad_y_g(m, xx, y) @ v, x), atol=1e-7)
        assert np.array_equal(prob.grad_x_f(m, x, y), np.zeros(prob.dim_upper))


def test_hyperclean_hypergradient_matches_finite_differences():
    prob, _, _ = _clean_problem(corrupt=0.2, n=20)
    M = prob.num_clients
    x = np.random.default_rng(6).standard_normal(prob.dim_upper)

    def F(xx):
        y = prob.solve_lower(xx)
        return sum(prob.upper_value_at(m, y) for m in range(M)) / M

    g = prob.hypergradient(x)
    assert np.linalg.norm(g - _fd(F, x, 1e-5)) <= 1e-6 * np.linalg.norm(g)


def test_hyperclean_minibatch_is_unbiased():
    prob, _, _ = _clean_problem(batch=4)
    x, y = np.zeros(prob.dim_upper), np.array([0.2, 0.1, -0.3])
    N = 20_000
    draws = np.array([sample_partials(prob, 1, x, y, s)[2] for s in range(N)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(N)
    assert np.all(np.abs(draws.mean(axis=0) - prob.grad_y_g(1, x, y)) <= 4 * se)


# -- meta-learning ---------------------------------------------------------------------------------------


def test_metalearn_single_task():
    train, test = random_tasks(M=1, d=3, task_dim=3, seed=1)
    prob = make_metalearn_problem(MetaLearnSpec(train, test, dim_shared=3))
    assert prob.num_clients == 1 and prob.dim_lower == 3
    x = np.ones(3)
    ystar = prob.exact_lower_solution(x)
    assert np.allclose(prob.grad_y_g(0, x, ystar), 0, atol=1e-12)


def test_metalearn_gradients_are_block_separable():
    train, test = random_tasks(M=3, d=2, task_dim=3, seed=2)
    prob = make_metalearn_problem(MetaLearnSpec(train, test, dim_shared=2, maps=[np.ones((3, 2))] * 3, sigma=0.2))
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(2), rng.standard_normal(9)
    for m in range(3):
        outside = np.ones(9, dtype=bool)
        outside[3 * m:3 * m + 3] = False
        for s in range(5):
            _, _, gyg = sample_partials(prob, m, x, y, s)
            assert np.all(gyg[outside] == 0)
            assert np.all(hvp_yy_g(prob, m, x, y, rng.standard_normal(9), s)[outside] == 0)


def test_metalearn_assembled_blocks_by_hand():
    train, test = random_tasks(M=2, d=2, task_dim=2, n_train=5, n_test=5, seed=3)
    spec = MetaLearnSpec(train, test, dim_shared=2, coupling=0.5, reg=0.2)
    q = metalearn_quadratic_spec(spec)
    Phi, t = train[1].features, train[1].labels
    assert np.allclose(q.Q[1][2:, 2:], Phi.T @ Phi / 5 + 0.7 * np.eye(2))
    assert np.allclose(q.Q[1][:2, :2], 0) and np.allclose(q.P[1][2:], 0.5 * np.eye(2))
    assert np.allclose(q.r[1][2:], Phi.T @ t / 5)
    prob = make_metalearn_problem(spec)
    # per-task lower solutions solve their own block system
    x = np.array([0.3, -1.0])
    ys = prob.exact_lower_solution(x)
    for m in range(2):
        b = slice(2 * m, 2 * m + 2)
        A = train[m].features
        sol = np.linalg.solve(A.T @ A / 5 + 0.7 * np.eye(2), A.T @ train[m].labels / 5 + 0.5 * x)
        assert np.allclose(ys[b], sol, atol=1e-12)
    h = 1e-5
    fd = np.array([(prob.upper_value(x + h * e) - prob.upper_value(x - h * e)) / (2 * h) for e in np.eye(2)])
    g = prob.exact_hypergradient(x)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1e-12)


# -- partitioning and data I/O ----------------------------------------------------------------------------


def _pool(n, seed=0):
    ds, _ = make_logistic_data(n, 2, seed=seed)
    return ds


def test_iid_partition_sizes():
    assert [len(p) for p in partition_dataset(_pool(10), 2, "iid")] == [5, 5]


def test_sorted_label_partition_is_single_label():
    pool = Dataset(np.arange(20.0)[:, None], np.array([0, 1] * 10, dtype=float))
    parts = partition_dataset(pool, 2, "sorted_label")
    assert [len(np.unique(p.labels)) for p in parts] == [1, 1]


def test_dirichlet_large_alpha_approaches_iid_proportions():
    pool = Dataset(np.zeros((400, 1)), np.array([0.0] * 100 + [1.0] * 300))
    fracs = []
    for seed in range(100):
        for part in partition_dataset(pool, 4, "dirichlet", seed=seed, alpha=1e4):
            fracs.append(part.labels.mean())
    fracs = np.array(fracs)
    assert abs(fracs.mean() - 0.75) < 0.01 and fracs.std() < 0.03
    small = [p.labels.mean() for s in range(100) for p in partition_dataset(pool, 4, "dirichlet", seed=s, alpha=0.1)]
    assert np.std(small) > 5 * fracs.std()


def test_partition_errors():
    with pytest.raises(InvalidArgument):
        partition_dataset(_pool(3), 4)
    with pytest.raises(InvalidArgument):
        partition_dataset(_pool(10), 2, "random")


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 60), M=st.integers(1, 8), mode=st.sampled_from(["iid", "sorted_label", "dirichlet"]),
       seed=st.integers(0, 2 ** 32), alpha=st.floats(0.05, 50))
def test_partition_is_a_disjoint_cover(n, M, mode, seed, alpha):
    if M > n:
        return
    pool = _pool(n, seed=seed % 7)
    parts = partition_dataset(pool, M, mode, seed=seed, alpha=alpha)
    idx = np.concatenate([p.index for p in parts])
    assert len(parts) == M and all(len(p) >= 1 for p in parts)
    assert sorted(idx.tolist()) == list(range(n))
    if mode != "dirichlet":
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1
    again = partition_dataset(pool, M, mode, seed=seed, alpha=alpha)
    assert all(np.array_equal(a.index, b.index) for a, b in zip(parts, again))


def test_csv_round_trip(tmp_path):
    ds = _pool(17)
    path = tmp_path / "pool.csv"
    write_csv(ds, path)
    assert path.read_text().splitlines()[0] == "feature_0,feature_1,label"
    back = read_csv(path)
    assert np.array_equal(back.features, ds.features) and np.array_equal(back.labels, ds.labels)


def test_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,label\n1,2,0\n")
    with pytest.raises(InvalidArgument):
        read_csv(path)


def test_flip_labels_rate_and_mask():
    ds = _pool(200)
    flipped, mask = flip_labels(ds, 0.3, seed=1)
    assert mask.sum() == 60
    assert np.array_equal(flipped.labels[mask], 1 - ds.labels[mask])
    assert np.array_equal(flipped.labels[~mask], ds.labels[~mask])
