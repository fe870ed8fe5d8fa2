"""Reference data: the linear Ornstein-Uhlenbeck benchmark, SGLD on least squares, and MMD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .simulate import (
    BLOWUP_NORM,
    IntegrationBlowupError,
    SdeSystem,
    Trajectory,
    simulate_ensemble,
    trajectory_rng,
)
from .training import TrajectoryDataset

W0 = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _check_spd(A: np.ndarray, name: str) -> None:
    if not np.allclose(A, A.T, atol=1e-12):
        raise ValueError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} is not positive definite") from exc


def spd_sqrt(A: np.ndarray) -> np.ndarray:
    w, Q = np.linalg.eigh(A)
    return (Q * np.sqrt(w)) @ Q.T


@dataclass
class LinearSystem:
    """``dZ = -(M + W) S Z dt + sqrt(2M) dB`` with ``W = lam * W0``; stationary law N(0, S^-1)."""

    Mmat: np.ndarray
    Smat: np.ndarray
    lam: float

    def __post_init__(self):
        self.Mmat = np.asarray(self.Mmat, dtype=np.float64)
        self.Smat = np.asarray(self.Smat, dtype=np.float64)
        _check_spd(self.Mmat, "M")
        _check_spd(self.Smat, "S")

    @property
    def Wmat(self) -> np.ndarray:
        return self.lam * W0

    @property
    def drift_matrix(self) -> np.ndarray:
        return -(self.Mmat + self.Wmat) @ self.Smat

    @property
    def noise_matrix(self) -> np.ndarray:
        return spd_sqrt(2.0 * self.Mmat)

    def sde(self) -> SdeSystem:
        A = self.drift_matrix
        B = self.noise_matrix

        def batch(Z):
            return Z @ A.T, np.broadcast_to(B, (len(Z), 2, 2))

        return SdeSystem(2, lambda z: A @ z, lambda z: B, batch=batch, name="linear")

    def f_irr(self, Z) -> np.ndarray:
        return np.atleast_2d(Z) @ (-self.Wmat @ self.Smat).T

    def to_dict(self) -> dict:
        return {"M": self.Mmat.tolist(), "S": self.Smat.tolist(), "lambda": self.lam,
                "W": self.Wmat.tolist()}


def random_spd(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Symmetrized Gaussian matrix, spectrum shifted by |lambda_min| + 0.5, unit spectral norm."""
    A = rng.standard_normal((dim, dim))
    A = 0.5 * (A + A.T)
    A = A + (abs(np.linalg.eigvalsh(A)[0]) + 0.5) * np.eye(dim)
    return A / np.linalg.eigvalsh(A)[-1]


def linear_system(seed: int, lam: float) -> LinearSystem:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FFEE]))
    M = random_spd(rng, 2)
    S = random_spd(rng, 2)
    return LinearSystem(M, S, float(lam))


def gen_linear_dataset(seed: int, lam: float, n_traj: int, t_end: float = 1.0, dt: float = 0.01,
                       thin: int = 1, init_std: float = 2.0) -> tuple[TrajectoryDataset, LinearSystem]:
    """Trajectories of the linear benchmark on [0, t_end], started from N(0, init_std^2 I)."""
    system = linear_system(seed, lam)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    inits = init_std * rng.standard_normal((n_traj, 2))
    steps = int(round(t_end / dt))
    trajs = simulate_ensemble(system.sde(), inits, dt, steps, seed=seed, thin=thin)
    return TrajectoryDataset(trajs), system


# --------------------------------------------------------------------------
# SGLD on least squares


@dataclass
class LsqProblem:
    """``L(Z) = 1/2 |A Z - v|^2`` sampled by SGLD with step ``eta`` and batch size ``batch_b``."""

    A: np.ndarray
    v: np.ndarray
    eta: float
    batch_b: int
    noise: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        n, D = self.A.shape
        if self.v.shape != (n,):
            raise ValueError("v must have one entry per row of A")
        if not 1 <= self.batch_b <= n:
            raise ValueError(f"batch size must lie in [1, {n}]")
        if np.linalg.matrix_rank(self.A) < D:
            raise ValueError("A must have full column rank")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def with_batch(self, b: int) -> "LsqProblem":
        return LsqProblem(self.A, self.v, self.eta, b, self.noise)

    def gibbs_mean_cov(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of exp(-L)."""
        AtA = self.A.T @ self.A
        cov = np.linalg.inv(AtA)
        return cov @ self.A.T @ self.v, cov


def synthetic_lsq_problem(seed: int = 0, n: int = 66, dim: int = 12, density: float = 0.25,
                          perturbation: float = 0.1, rhs_noise: float = 0.5,
                          eta: float = 1e-3, batch_b: int = 1) -> LsqProblem:
    """Sparse 0/1 design matrix plus Gaussian perturbation (full rank), scaled to unit spectral norm.

    The solution is uniform on [-1, 1]^dim and the right-hand side carries Gaussian noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A]))
    A = (rng.random((n, dim)) < density).astype(float) + perturbation * rng.standard_normal((n, dim))
    A /= np.linalg.norm(A, 2)
    z_star = rng.uniform(-1.0, 1.0, dim)
    v = A @ z_star + rhs_noise * rng.standard_normal(n)
    return LsqProblem(A, v, eta, batch_b)


def _sgld_runs(problem: LsqProblem, seed: int, inits: np.ndarray, steps: int, thin: int,
               index_offset: int = 0) -> np.ndarray:
    """Vectorized SGLD; run i uses stream (seed, index_offset + i). Returns (N, steps//thin+1, D)."""
    A, v, eta, b = problem.A, problem.v, problem.eta, problem.batch_b
    n, D = A.shape
    Z = np.array(inits, dtype=np.float64)
    N = len(Z)
    rngs = [trajectory_rng(seed, index_offset + i) for i in range(N)]
    scale = eta * n / b
    noise_scale = np.sqrt(2.0 * eta) if problem.noise else 0.0
    # b = n is the full-batch reference chain: every row once, no index sampling
    full = b == n
    record = [Z.copy()]
    t = 0
    block = 256
    while t < steps:
        k = min(block, steps - t)
        idx = np.empty((k, N, b), dtype=np.int64)
        xi = np.empty((k, N, D))
        for i, g in enumerate(rngs):
            if not full:
                idx[:, i, :] = g.integers(0, n, size=(k, b))
            xi[:, i, :] = g.standard_normal((k, D))
        for j in range(k):
            if full:
                grad = (Z @ A.T - v) @ A
            else:
                Ab = A[idx[j]]                                   # (N, b, D)
                resid = np.einsum("nbd,nd->nb", Ab, Z) - v[idx[j]]
                grad = np.einsum("nb,nbd->nd", resid, Ab)
            Z = Z - scale * grad + noise_scale * xi[j]
            t += 1
            bad = ~np.isfinite(Z).all(axis=1) | (np.linalg.norm(Z, axis=1) > BLOWUP_NORM)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise IntegrationBlowupError(f"SGLD run {index_offset + i} diverged at step {t}",
                                             traj_index=index_offset + i, step=t)
            if t % thin == 0:
                record.append(Z.copy())
    return np.stack(record, axis=1)


def sgld_lsq_run(problem: LsqProblem, seed: int, steps: int, thin: int = 1,
                 init=None) -> Trajectory:
    """One SGLD chain
    ``Z <- Z - eta (n/b) sum_i (a_gi . Z - v_gi) a_gi + sqrt(2 eta) xi``,
    minibatch indices drawn uniformly with replacement (``b = n`` uses every row once, so
    the gradient is exact).  One step counts as time ``eta``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z0 = np.zeros(problem.dim) if init is None else np.asarray(init, dtype=np.float64)
    states = _sgld_runs(problem, seed, z0[None], steps, thin)[0]
    return Trajectory(problem.eta * thin, states)


def sgld_lsq_ensemble(problem: LsqProblem, seed: int, n_runs: int, steps: int = 1000,
                      thin: int = 50, init_mean: float = 5.0, init_std: float = 3.0) -> list[Trajectory]:
    """Independent SGLD runs from N(init_mean, init_std^2 I) initial points."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    inits = init_mean + init_std * rng.standard_normal((n_runs, problem.dim))
    states = _sgld_runs(problem, seed, inits, steps, thin)
    return [Trajectory(problem.eta * thin, s) for s in states]


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, trajs) -> "Standardizer":
        X = np.concatenate([t.states for t in trajs])
        return cls(X.mean(axis=0), X.std(axis=0))

    def apply(self, trajs) -> list[Trajectory]:
        return [Trajectory(t.dt, (t.states - self.mean) / self.scale) for t in trajs]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


# --------------------------------------------------------------------------
# MMD


def median_bandwidth(X: np.ndarray, Y: np.ndarray, max_points: int = 2000) -> float:
    P = np.concatenate([X, Y])
    if len(P) > max_points:
        P = P[np.linspace(0, len(P) - 1, max_points).astype(int)]
    return float(np.median(pdist(P)))


def mmd_squared(samples_p, samples_q, bandwidth: float | None = None, biased: bool = False) -> float:
    """Squared MMD with kernel exp(-|x - y|^2 / (2 h^2)); unbiased U-statistic by default."""
    X = np.atleast_2d(np.asarray(samples_p, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(samples_q, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sample sets have different dimensions")
    m, n = len(X), len(Y)
    if not biased and (m < 2 or n < 2):
        raise ValueError("the unbiased estimator needs at least two samples per set")
    h = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    Kxx = np.exp(-cdist(X, X, "sqeuclidean") / (2 * h * h))
    Kyy = np.exp(-cdist(Y, Y, "sqeuclidean") / (2 * h * h))
    Kxy = np.exp(-cdist(X, Y, "sqeuclidean") / (2 * h * h))
    if biased:
        return float(Kxx.mean() + Kyy.mean() - 2 * Kxy.mean())
    sxx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    syy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * Kxy.mean())
