"""Numerical Hamiltonian decomposition of divergence-free fields (dimension 2 or 3).

Any divergence-free ``g`` on R^D can be written as ``g = sum_d J_d grad H_d`` with
``J_d`` the antisymmetric coupling of coordinates d and d+1.  The functions H_d
are built from nested line integrals anchored at the origin, evaluated here with
composite Simpson quadrature.  This is a correctness oracle for small D, not a
production path: cost grows with the nesting depth.

Sign: the line integrals below produce functions ``K_d`` with ``g = -sum J_d grad K_d``;
``H_d = -K_d`` is what is stored so that the reconstruction carries a plus sign.

Also here: grid residual checks that a learned model's stationary flux is
divergence-free, which is the structural premise of the decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ModelState, evaluate

Field = Callable[[np.ndarray], np.ndarray]

_CHUNK = 32


def simpson_weights(n: int) -> np.ndarray:
    """Composite Simpson weights for ``n`` (odd) equispaced nodes on [0, 1]."""
    if n < 3 or n % 2 == 0:
        raise ValueError("quadrature_n must be odd and >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / (3.0 * (n - 1))


def _line_integral(fn: Field, Z: np.ndarray, axis: int, upper: np.ndarray,
                   weights: np.ndarray, base: np.ndarray | None = None) -> np.ndarray:
    """``int_0^upper fn(z with z[axis] = s) ds`` for each row of Z.

    ``base`` (optional) overrides the other coordinates of the integration line.
    """
    n = len(weights)
    t = np.linspace(0.0, 1.0, n)
    line = (Z if base is None else base)[:, None, :].repeat(n, axis=1)
    line[:, :, axis] = upper[:, None] * t[None, :]
    vals = np.asarray(fn(line.reshape(-1, Z.shape[1]))).reshape(len(Z), n)
    return upper * (vals @ weights)


def _partial(fn: Callable[[np.ndarray], np.ndarray], Z: np.ndarray, axis: int, h: float) -> np.ndarray:
    e = np.zeros(Z.shape[1])
    e[axis] = h
    return (fn(Z + e) - fn(Z - e)) / (2.0 * h)


def _chunked(fn):
    def wrapped(Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return np.concatenate([fn(Z[i:i + _CHUNK]) for i in range(0, len(Z), _CHUNK)])
    return wrapped


@dataclass
class HamiltonianSet:
    """``H[d](Z)`` evaluates the d-th function on a batch ``(N, D)``."""

    dim: int
    H: list
    quadrature_n: int

    def __call__(self, d: int, Z) -> np.ndarray:
        return self.H[d](Z)


def numerical_divergence(g: Field, Z, h: float = 1e-5) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return sum(_partial(lambda X: np.asarray(g(X))[:, k], Z, k, h) for k in range(Z.shape[1]))


def eh_decompose(g: Field, dim: int, quadrature_n: int = 129, *, probe_points=None,
                 h: float = 1e-4, div_tol: float = 1e-6, seed: int = 0) -> HamiltonianSet:
    """Decompose a divergence-free field ``g`` (batched: ``(N, D) -> (N, D)``).

    Raises ``ValueError`` if ``g`` fails the divergence check on the probe points.
    """
    if dim not in (2, 3):
        raise ValueError("eh_decompose supports dim 2 or 3")
    if probe_points is None:
        probe_points = np.random.default_rng(seed).uniform(-1, 1, size=(32, dim))
    probe_points = np.atleast_2d(probe_points)
    scale = max(1.0, float(np.max(np.abs(np.asarray(g(probe_points))))))
    div = numerical_divergence(g, probe_points)
    if np.max(np.abs(div)) > div_tol * scale:
        raise ValueError(f"field is not divergence-free (max |div g| = {np.max(np.abs(div)):.3e})")

    w = simpson_weights(quadrature_n)
    comp = lambda k: (lambda X: np.asarray(g(X))[:, k])  # noqa: E731
    D = dim
    K: list = []

    if D == 3:
        def K12(Z):
            return -_line_integral(comp(0), Z, 1, Z[:, 1], w)
        K.append(K12)

    prev = K[-1] if K else None

    def K_last(Z):
        # int_0^{z_D} (d_{D-2} K_prev - g_{D-1})(.., s) ds + int_0^{z_{D-1}} g_D(.., t, 0) dt
        if prev is None:
            inner = lambda X: -comp(D - 2)(X)  # noqa: E731
        else:
            inner = lambda X: _partial(prev, X, D - 3, h) - comp(D - 2)(X)  # noqa: E731
        first = _line_integral(inner, Z, D - 1, Z[:, D - 1], w)
        base = Z.copy()
        base[:, D - 1] = 0.0
        second = _line_integral(comp(D - 1), Z, D - 2, Z[:, D - 2], w, base=base)
        return first + second

    K.append(K_last)
    H = [_chunked(lambda Z, k=k: -k(Z)) for k in K]
    return HamiltonianSet(D, H, quadrature_n)


def eh_reconstruct(hset: HamiltonianSet, Z, h: float = 1e-4) -> np.ndarray:
    """``sum_d J_d grad H_d`` with central-difference gradients."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    out = np.zeros_like(Z)
    for d in range(hset.dim - 1):
        Hd = hset.H[d]
        out[:, d] += _partial(Hd, Z, d + 1, h)
        out[:, d + 1] -= _partial(Hd, Z, d, h)
    return out


def hamiltonian_field(grad_fns) -> Field:
    """Forward construction ``g = sum_d J_d grad P_d`` from batched gradient callables."""
    def g(Z):
        Z = np.atleast_2d(Z)
        out = np.zeros_like(Z, dtype=np.float64)
        for d, grad in enumerate(grad_fns):
            G = np.asarray(grad(Z))
            out[:, d] += G[:, d + 1]
            out[:, d + 1] -= G[:, d]
        return out
    return g


# --------------------------------------------------------------------------
# residual checks on a learned model


@dataclass
class ResidualReport:
    max_residual: float
    field_scale: float

    @property
    def relative(self) -> float:
        return self.max_residual / self.field_scale if self.field_scale > 0 else self.max_residual


def _grid_divergence(vector_fn: Field, Z: np.ndarray, h: float) -> np.ndarray:
    return sum(_partial(lambda X: vector_fn(X)[:, k], Z, k, h) for k in range(Z.shape[1]))


def verify_theorem1(model: ModelState, grid, h: float = 1e-4) -> ResidualReport:
    """Max |div(f_irr e^{-V})| over the grid against max |f_irr e^{-V}|."""
    Z = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    v0 = float(np.min(evaluate(model, Z)["V"]))

    def flux(X):
        out = evaluate(model, X)
        return out["f_irr"] * np.exp(-(out["V"] - v0))[:, None]

    res = _grid_divergence(flux, Z, h)
    return ResidualReport(float(np.max(np.abs(res))), float(np.max(np.linalg.norm(flux(Z), axis=1))))


def fokker_planck_residual(model: ModelState, grid, h: float = 1e-3) -> ResidualReport:
    """Max |div(f rho - div(M rho))| with rho = e^{-V}, all derivatives by central differences."""
    Z = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    v0 = float(np.min(evaluate(model, Z)["V"]))
    D = Z.shape[1]

    def M_rho(X):
        out = evaluate(model, X)
        return out["M"] * np.exp(-(out["V"] - v0))[:, None, None]

    def flux(X):
        out = evaluate(model, X)
        rho = np.exp(-(out["V"] - v0))
        div_m_rho = sum(_partial(lambda Y: M_rho(Y)[:, :, j], X, j, h) for j in range(D))
        return out["drift"] * rho[:, None] - div_m_rho

    res = _grid_divergence(flux, Z, h)
    return ResidualReport(float(np.max(np.abs(res))), float(np.max(np.linalg.norm(flux(Z), axis=1))))


__all__ = [
    "HamiltonianSet", "ResidualReport", "eh_decompose", "eh_reconstruct", "fokker_planck_residual",
    "hamiltonian_field", "numerical_divergence", "simpson_weights", "verify_theorem1",
]
