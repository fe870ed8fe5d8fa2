"""Minima, index-1 saddles (gentlest ascent dynamics) and barrier heights of a potential."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, last=None, trace=None):
        super().__init__(message)
        self.last = last
        self.trace = trace if trace is not None else []


class DistinctMinimaError(ValueError):
    pass


@dataclass
class PotentialField:
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_model(cls, model) -> "PotentialField":
        from .model import potential_fn
        return cls(*potential_fn(model))

    def shifted(self, c: float) -> "PotentialField":
        return PotentialField(lambda z: self.value(z) + c, self.grad)


def hessian_vector(field: PotentialField, x, v, h: float = 1e-5) -> np.ndarray:
    """Central difference of the gradient along unit-normalized ``v``, rescaled by |v|."""
    nv = np.linalg.norm(v)
    u = v / nv
    return nv * (np.asarray(field.grad(x + h * u)) - np.asarray(field.grad(x - h * u))) / (2 * h)


def fd_hessian(field: PotentialField, x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    D = len(x)
    H = np.column_stack([hessian_vector(field, x, np.eye(D)[k], h) for k in range(D)])
    return 0.5 * (H + H.T)


def descend_to_minimum(field: PotentialField, start, step: float = 0.1, tol: float = 1e-6,
                       max_iters: int = 100_000) -> np.ndarray:
    """Gradient descent; the step is halved whenever it would increase V."""
    x = np.array(start, dtype=np.float64)
    Vx = field.value(x)
    for _ in range(max_iters):
        g = np.asarray(field.grad(x))
        if np.linalg.norm(g) < tol:
            return x
        while True:
            y = x - step * g
            Vy = field.value(y)
            if Vy <= Vx or step < 1e-12:
                break
            step *= 0.5
        x, Vx = y, Vy
    raise NonConvergenceError(f"gradient descent did not reach |grad V| < {tol}", last=x)


def gad_find_saddle(field: PotentialField, start, v0, step: float = 1e-3, tol: float = 1e-6,
                    max_iters: int = 100_000, h: float = 1e-5,
                    trace_every: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Explicit-Euler gentlest ascent dynamics.

        x' = -grad V + 2 (v . grad V) v
        v' = -Hess V v + (v . Hess V v) v      (v kept at unit length)

    Hessian-vector products are central differences of ``grad V``.
    """
    x = np.array(start, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("initial direction must be nonzero")
    v /= nv
    trace = []
    for it in range(max_iters):
        g = np.asarray(field.grad(x))
        if np.linalg.norm(g) < tol:
            return x, v
        Hv = hessian_vector(field, x, v, h)
        x = x + step * (-g + 2.0 * np.dot(v, g) * v)
        v = v + step * (-Hv + np.dot(v, Hv) * v)
        v /= np.linalg.norm(v)
        if it % trace_every == 0:
            trace.append(x.copy())
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e8:
            raise NonConvergenceError("gentlest ascent dynamics diverged", last=x, trace=trace)
    raise NonConvergenceError(f"no saddle with |grad V| < {tol} after {max_iters} steps",
                              last=x, trace=trace)


def n_negative_eigenvalues(field: PotentialField, x, h: float = 1e-5) -> int:
    return int(np.sum(np.linalg.eigvalsh(fd_hessian(field, x, h)) < 0))


@dataclass
class LandscapeReport:
    minima: list[tuple[np.ndarray, float]]
    saddle: tuple[np.ndarray, float]
    barrier_forward: float
    barrier_backward: float
    candidates: list[tuple[np.ndarray, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "minima": [{"state": z.tolist(), "V": v} for z, v in self.minima],
            "saddle": {"state": self.saddle[0].tolist(), "V": self.saddle[1]},
            "barrier_forward": self.barrier_forward,
            "barrier_backward": self.barrier_backward,
            "n_candidates": len(self.candidates),
        }


def barrier_heights(field: PotentialField, seed_A, seed_B, n_midpoint_starts: int = 8, *,
                    jitter: float = 0.05, seed: int = 0, descent_step: float = 0.1,
                    gad_step: float = 1e-3, tol: float = 1e-6, max_iters: int = 100_000,
                    separation_tol: float = 1e-3) -> LandscapeReport:
    """Relax both seeds, launch GAD between the minima and keep the lowest index-1 saddle."""
    A = descend_to_minimum(field, seed_A, descent_step, tol, max_iters)
    B = descend_to_minimum(field, seed_B, descent_step, tol, max_iters)
    d = B - A
    dist = np.linalg.norm(d)
    if dist < separation_tol * (1.0 + np.linalg.norm(A)):
        raise DistinctMinimaError("distinct minima required: both seeds relax to the same minimum")
    u = d / dist
    rng = np.random.default_rng(seed)
    candidates = []
    for k in range(1, n_midpoint_starts + 1):
        x0 = A + k / (n_midpoint_starts + 1) * d
        if len(x0) > 1:
            r = rng.standard_normal(len(x0))
            r -= np.dot(r, u) * u
            x0 = x0 + jitter * dist * r / max(np.linalg.norm(r), 1e-300)
        try:
            s, _ = gad_find_saddle(field, x0, u, gad_step, tol, max_iters)
        except NonConvergenceError:
            continue
        if n_negative_eigenvalues(field, s) == 1:
            candidates.append((s, float(field.value(s))))
    if not candidates:
        raise NonConvergenceError("no index-1 saddle found between the minima")
    saddle = min(candidates, key=lambda c: c[1])
    VA, VB = float(field.value(A)), float(field.value(B))
    return LandscapeReport([(A, VA), (B, VB)], saddle, saddle[1] - VA, saddle[1] - VB, candidates)


def project_by_minimization(value: Callable[[np.ndarray], np.ndarray], plane_points,
                            free_grid, plane_dims=(0, 1), free_dim: int = 2) -> np.ndarray:
    """``min`` over ``free_grid`` of V with the plane coordinates held fixed.

    ``value`` must accept a batch ``(N, D)`` and return ``(N,)``.
    """
    P = np.atleast_2d(np.asarray(plane_points, dtype=np.float64))
    g = np.asarray(free_grid, dtype=np.float64).ravel()
    D = len(plane_dims) + 1
    Z = np.zeros((len(P), len(g), D))
    for k, dim in enumerate(plane_dims):
        Z[:, :, dim] = P[:, k, None]
    Z[:, :, free_dim] = g[None, :]
    vals = np.asarray(value(Z.reshape(-1, D))).reshape(len(P), len(g))
    return vals.min(axis=1)
