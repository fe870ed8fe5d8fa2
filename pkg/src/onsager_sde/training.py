"""Maximum-likelihood fitting with the one-step Gaussian (Euler-Maruyama) transition density."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .model import ModelState, ModelStructure, fingerprint_arrays, point_drift
from .nets import check_supported
from .simulate import Trajectory

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(ArithmeticError):
    pass


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; ``model`` and ``history`` hold the last finite state."""

    def __init__(self, message, model: ModelState, history: list[float]):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    dim: int = 0

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("dataset is empty")
        dims = {t.dim for t in self.trajectories}
        if len(dims) != 1:
            raise ValueError(f"trajectories have mixed dimensions {sorted(dims)}")
        self.dim = dims.pop()

    def pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All consecutive ``(z0, z1, dt)`` transitions."""
        z0 = np.concatenate([t.states[:-1] for t in self.trajectories])
        z1 = np.concatenate([t.states[1:] for t in self.trajectories])
        dt = np.concatenate([t.increments for t in self.trajectories])
        return z0, z1, dt

    def fingerprint(self) -> str:
        return fingerprint_arrays(*[t.states for t in self.trajectories])


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4096
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    jitter: float = 1e-8
    # multiplies the learning rate at the last epoch; cosine schedule in between
    final_lr_factor: float = 1.0
    # batch over whole trajectories instead of shuffled transition pairs
    trajectory_batches: bool = False
    log_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.adam_eps <= 0 or self.jitter < 0:
            raise ValueError("learning_rate and adam_eps must be positive, jitter non-negative")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not 0 < self.final_lr_factor <= 1:
            raise ValueError("final_lr_factor must lie in (0, 1]")


def point_log_density(s: ModelStructure, p, z0, z1, dt, jitter):
    f, sig = point_drift(s, p, z0)
    D = s.dim
    cov = dt * (sig @ sig.T) + jitter * jnp.eye(D, dtype=z0.dtype)
    L = jnp.linalg.cholesky(cov)
    r = jax.scipy.linalg.solve_triangular(L, z1 - z0 - dt * f, lower=True)
    return -0.5 * jnp.dot(r, r) - jnp.sum(jnp.log(jnp.diag(L))) - 0.5 * D * LOG_2PI


_batched_logp_cache: dict = {}


def _batched_logp(s: ModelStructure):
    fn = _batched_logp_cache.get(s)
    if fn is None:
        fn = jax.jit(jax.vmap(lambda p, a, b, h, j: point_log_density(s, p, a, b, h, j),
                              in_axes=(None, 0, 0, 0, None)))
        _batched_logp_cache[s] = fn
    return fn


def log_transition_density(model: ModelState, z0, z1, dt, jitter: float = 1e-8):
    """log N(z1; z0 + dt f(z0), dt sigma sigma^T(z0) + jitter I); vectorized over rows."""
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 1
    z0 = np.atleast_2d(z0)
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (len(z0),))
    if np.any(dt <= 0):
        raise ValueError("dt must be positive")
    out = np.asarray(_batched_logp(model.structure)(model.params, z0, z1, dt, jitter))
    if not np.all(np.isfinite(out)):
        raise NumericalError("transition covariance could not be factorized")
    return float(out[0]) if single else out


def nll_batch(model: ModelState, z0, z1, dt, jitter: float = 1e-8) -> float:
    """Mean negative log transition density over the batch."""
    return float(-np.mean(log_transition_density(model, np.atleast_2d(z0), np.atleast_2d(z1),
                                                 dt, jitter)))


def make_loss(model: ModelState, jitter: float):
    """``(theta, z0, z1, dt) -> mean NLL`` over a flat parameter vector, plus the unravel map."""
    s = model.structure
    theta0, unravel = ravel_pytree({k: jnp.asarray(v) for k, v in model.params.items()})
    logp = jax.vmap(lambda p, a, b, h: point_log_density(s, p, a, b, h, jitter),
                    in_axes=(None, 0, 0, 0))

    def loss(theta, z0, z1, dt):
        return -jnp.mean(logp(unravel(theta), z0, z1, dt))

    return loss, theta0, unravel


def nll_param_gradient(model: ModelState, z0, z1, dt, jitter: float = 1e-8):
    """``(mean NLL, d(mean NLL)/dtheta, unravel)`` with theta the flattened parameters."""
    loss, theta0, unravel = make_loss(model, jitter)
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (len(z0),))
    args = tuple(jnp.asarray(a) for a in (z0, z1, dt))
    check_supported(loss, theta0, *args)
    val, g = jax.value_and_grad(loss)(theta0, *args)
    return float(val), np.asarray(g), unravel


class Adam:
    def __init__(self, n: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - (lr or self.lr) * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    model: ModelState
    history: list[float] = field(default_factory=list)


def _batches(rng, dataset: TrajectoryDataset, pairs, config: TrainConfig):
    z0, z1, dt = pairs
    if config.trajectory_batches:
        bounds = np.cumsum([0] + [t.n_steps for t in dataset.trajectories])
        order = rng.permutation(len(dataset.trajectories))
        for i in range(0, len(order), config.batch_size):
            idx = np.concatenate([np.arange(bounds[k], bounds[k + 1])
                                  for k in order[i:i + config.batch_size]])
            yield z0[idx], z1[idx], dt[idx]
        return
    perm = rng.permutation(len(z0))
    n_batches = max(1, len(z0) // config.batch_size)
    # equal-size batches keep a single compiled shape; the remainder rolls into the last
    for idx in np.array_split(perm, n_batches):
        yield z0[idx], z1[idx], dt[idx]


def train(dataset: TrajectoryDataset, model_init: ModelState, config: TrainConfig) -> TrainResult:
    """Adam on the mean NLL of all transition pairs; returns the model and per-epoch mean NLL."""
    if dataset.dim != model_init.dim:
        raise ValueError(f"dataset dim {dataset.dim} != model dim {model_init.dim}")
    if config.epochs == 0:
        return TrainResult(model_init, [])
    pairs = dataset.pairs()
    if len(pairs[0]) == 0:
        raise ValueError("dataset has no transitions")

    loss, theta0, unravel = make_loss(model_init, config.jitter)
    check_supported(loss, theta0, *(jnp.asarray(a[:2]) for a in pairs))
    value_and_grad = jax.jit(jax.value_and_grad(loss))
    theta = np.asarray(theta0)
    opt = Adam(theta.size, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)

    def to_model(th):
        return model_init.with_params({k: np.asarray(v) for k, v in unravel(jnp.asarray(th)).items()})

    history: list[float] = []
    last_good = theta.copy()
    for epoch in range(config.epochs):
        frac = epoch / max(1, config.epochs - 1)
        lr = config.learning_rate * (config.final_lr_factor
                                     + (1 - config.final_lr_factor) * 0.5 * (1 + math.cos(math.pi * frac)))
        total, count = 0.0, 0
        for a, b, h in _batches(rng, dataset, pairs, config):
            val, g = value_and_grad(theta, a, b, h)
            val = float(val)
            g = np.asarray(g)
            if not (math.isfinite(val) and np.all(np.isfinite(g))):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", to_model(last_good), history)
            total += val * len(a)
            count += len(a)
            theta = opt.step(theta, g, lr)
        history.append(total / count)
        last_good = theta.copy()
        if config.log_every and (epoch % config.log_every == 0 or epoch == config.epochs - 1):
            log.info("epoch %d  mean NLL %.6f  lr %.2e", epoch, history[-1], lr)
    return TrainResult(to_model(theta), history)
