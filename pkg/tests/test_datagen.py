import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import exact_linear_model
from onsager_sde import datagen
from onsager_sde.epr import histogram_epr
from onsager_sde.model import evaluate
from onsager_sde.simulate import Trajectory, simulate_ensemble, stationary_samples, trajectory_rng


def test_random_spd_properties():
    rng = np.random.default_rng(0)
    for dim in (2, 3, 5):
        A = datagen.random_spd(rng, dim)
        w = np.linalg.eigvalsh(A)
        assert np.allclose(A, A.T) and w[0] > 0 and w[-1] == pytest.approx(1.0)


def test_linear_system_stationary_law_and_epr_structure():
    system = datagen.linear_system(4, 1.3)
    A, B = system.drift_matrix, system.noise_matrix
    np.testing.assert_allclose(B @ B.T, 2 * system.Mmat, atol=1e-12)
    # N(0, S^-1) solves the Lyapunov equation A C + C A^T + B B^T = 0
    C = np.linalg.inv(system.Smat)
    np.testing.assert_allclose(A @ C + C @ A.T + B @ B.T, 0.0, atol=1e-12)
    assert system.to_dict()["lambda"] == 1.3
    with pytest.raises(ValueError):
        datagen.LinearSystem(-np.eye(2), np.eye(2), 1.0)


def test_linear_drift_matches_constant_coefficient_model():
    system = datagen.linear_system(2, 0.7)
    Z = np.random.default_rng(3).normal(size=(10, 2))
    out = evaluate(exact_linear_model(system), Z)
    np.testing.assert_allclose(out["drift"], Z @ system.drift_matrix.T, atol=1e-10)
    np.testing.assert_allclose(out["f_irr"], system.f_irr(Z), atol=1e-10)


def test_linear_seed_determinism():
    a, b = datagen.linear_system(11, 1.0), datagen.linear_system(11, 1.0)
    assert np.array_equal(a.Mmat, b.Mmat) and np.array_equal(a.Smat, b.Smat)


def test_reversible_linear_system_covariance_and_histogram():
    trajs = {}
    for lam in (0.0, 2.0):
        system = datagen.linear_system(5, lam)
        X0 = np.random.default_rng(0).multivariate_normal(np.zeros(2), np.linalg.inv(system.Smat), 500)
        trajs[lam] = simulate_ensemble(system.sde(), X0, 0.01, 2000, seed=1, thin=10)
    C = np.linalg.inv(datagen.linear_system(5, 0.0).Smat)
    X = stationary_samples(trajs[0.0])
    assert np.max(np.abs(np.cov(X.T) - C)) < 0.05 * np.max(np.abs(C))
    # the plug-in estimator has a small positive bias; detailed balance keeps it near that floor
    rev, irr = histogram_epr(trajs[0.0], 10), histogram_epr(trajs[2.0], 10)
    assert rev < 0.05 and irr > 20 * rev


def test_linear_dataset_shapes_and_determinism():
    ds, system = datagen.gen_linear_dataset(1, 0.5, 7, t_end=0.5, dt=0.01, thin=5)
    assert len(ds.trajectories) == 7
    assert ds.trajectories[0].states.shape == (11, 2) and ds.trajectories[0].dt == pytest.approx(0.05)
    again, _ = datagen.gen_linear_dataset(1, 0.5, 7, t_end=0.5, dt=0.01, thin=5)
    assert ds.fingerprint() == again.fingerprint()
    other, _ = datagen.gen_linear_dataset(1, 1.0, 7, t_end=0.5, dt=0.01, thin=5)
    assert other.fingerprint() != ds.fingerprint()


def test_full_batch_sgld_samples_gibbs_posterior():
    # b = n is exact gradient Langevin; small steps keep the O(eta) discretization bias below KS resolution
    problem = datagen.synthetic_lsq_problem(3, n=20, dim=2, eta=0.002).with_batch(20)
    trajs = datagen.sgld_lsq_ensemble(problem, 1, 1500, steps=12_000, thin=12_000)
    X = np.array([t.states[-1] for t in trajs])
    mu, C = problem.gibbs_mean_cov()
    Y = np.linalg.solve(np.linalg.cholesky(C), (X - mu).T).T
    for k in range(2):
        assert stats.kstest(Y[:, k], "norm").pvalue > 0.01


def test_full_batch_gradient_descent_without_noise():
    problem = datagen.LsqProblem(np.eye(3), np.zeros(3), 0.1, 3, noise=False)
    z0 = np.array([1.0, -2.0, 0.5])
    tr = datagen.sgld_lsq_run(problem, 0, steps=4, init=z0)
    np.testing.assert_allclose(tr.states, z0 * (0.9 ** np.arange(5))[:, None], rtol=1e-14)


def test_tiny_step_barely_moves():
    problem = datagen.synthetic_lsq_problem(0, n=10, dim=3, eta=1e-10, batch_b=2)
    tr = datagen.sgld_lsq_run(problem, 1, steps=10, init=np.ones(3))
    assert np.max(np.abs(tr.states - 1.0)) < 1e-3


def test_minibatch_noise_breaks_detailed_balance():
    problem = datagen.synthetic_lsq_problem(1, n=20, dim=2, eta=0.15, rhs_noise=4.0)
    est = {}
    for b in (20, 1):
        trajs = datagen.sgld_lsq_ensemble(problem.with_batch(b), 2, 300, 2000, thin=1)
        est[b] = histogram_epr([Trajectory(t.dt, t.states[200:]) for t in trajs], 10)
    assert est[20] < 0.05 and est[1] > 20 * est[20]


def test_sgld_update_rule_by_hand():
    problem = datagen.synthetic_lsq_problem(0, n=10, dim=3, eta=0.05, batch_b=2)
    tr = datagen.sgld_lsq_run(problem, 5, steps=1, init=np.ones(3))
    # replay the per-run stream: minibatch indices first, then the Gaussian kick
    g = trajectory_rng(5, 0)
    idx = g.integers(0, 10, size=(1, 2))[0]
    xi = g.standard_normal((1, 3))[0]
    A, v = problem.A[idx], problem.v[idx]
    z = np.ones(3)
    expected = z - 0.05 * (10 / 2) * A.T @ (A @ z - v) + np.sqrt(0.1) * xi
    np.testing.assert_allclose(tr.states[1], expected, rtol=1e-12)
    assert tr.dt == pytest.approx(0.05)


def test_lsq_problem_validation():
    p = datagen.synthetic_lsq_problem(0)
    assert p.A.shape == (66, 12) and np.linalg.norm(p.A, 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        p.with_batch(0)
    with pytest.raises(ValueError):
        p.with_batch(67)
    with pytest.raises(ValueError):
        datagen.LsqProblem(np.ones((4, 2)), np.ones(4), 0.1, 1)


def test_standardizer_round_trip():
    rng = np.random.default_rng(0)
    trajs = [Trajectory(0.1, 3 + 2 * rng.normal(size=(50, 2))) for _ in range(4)]
    s = datagen.Standardizer.fit(trajs)
    X = stationary_samples(s.apply(trajs))
    np.testing.assert_allclose(X.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(X.std(axis=0), 1, atol=1e-12)


def test_mmd_basic_properties():
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(300, 2)), rng.normal(size=(300, 2))
    Z = rng.normal(1.0, 1.0, size=(300, 2))
    assert abs(datagen.mmd_squared(X, Y)) < 0.01
    assert datagen.mmd_squared(X, Z) > 10 * abs(datagen.mmd_squared(X, Y))
    assert datagen.mmd_squared(X, Z, 1.0) == pytest.approx(datagen.mmd_squared(Z, X, 1.0), abs=1e-14)
    with pytest.raises(ValueError):
        datagen.mmd_squared(X[:1], Y)
    with pytest.raises(ValueError):
        datagen.mmd_squared(X, Y[:, :1])


def test_mmd_same_distribution_within_noise():
    rng = np.random.default_rng(7)
    vals = [datagen.mmd_squared(rng.normal(size=(100, 2)), rng.normal(size=(100, 2))) for _ in range(30)]
    m = datagen.mmd_squared(rng.normal(size=(100, 2)), rng.normal(size=(100, 2)))
    assert abs(m) < 3 * np.std(vals)


def test_mmd_singletons_closed_form():
    # biased estimator on one point each: 2 - 2 k(x, y)
    x, y, h = np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]), 0.7
    assert datagen.mmd_squared(x, y, h, biased=True) == pytest.approx(2 - 2 * np.exp(-2 / (2 * h * h)))
    far = np.array([[50.0, 0.0]])
    assert datagen.mmd_squared(x, far, 1.0, biased=True) == pytest.approx(2.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.floats(0.1, 5.0))
def test_biased_mmd_nonnegative_and_zero_on_identical_sets(seed, h):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(15, 3)), rng.normal(size=(12, 3))
    assert datagen.mmd_squared(X, Y, h, biased=True) >= -1e-12
    assert datagen.mmd_squared(X, X, h, biased=True) == pytest.approx(0.0, abs=1e-12)
