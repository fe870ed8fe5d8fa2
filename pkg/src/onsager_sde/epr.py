"""Entropy production estimators.

Model-based quantities use the irreversible drift ``f_irr = -W grad V + div W``:
the local rate ``f_irr^T M^-1 f_irr``, its average over the stationary law (global
rate), and the system rate ``-f_irr . grad V``.  ``histogram_epr`` is a
model-free plug-in estimate from bin-to-bin transition counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .model import ModelState, evaluate
from .simulate import Trajectory


@dataclass
class EprReport:
    global_epr: float
    mc_std_error: float
    n_samples: int
    samples: np.ndarray | None = None
    local_values: np.ndarray | None = None

    def consistent_with_nonnegative(self) -> bool:
        return self.global_epr >= -3.0 * self.mc_std_error - 1e-12

    def to_dict(self) -> dict:
        return {"global_epr": self.global_epr, "mc_std_error": self.mc_std_error,
                "n_samples": self.n_samples}


def _quadratic_form_spd(M: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``f^T M^-1 f`` row by row via Cholesky solves; shapes (N, D, D), (N, D)."""
    L = np.linalg.cholesky(M)
    y = np.stack([scipy.linalg.solve_triangular(Li, fi, lower=True) for Li, fi in zip(L, f)])
    return np.sum(y * y, axis=1)


def local_epr(model: ModelState, z) -> float | np.ndarray:
    """Local total entropy production rate at one state or a batch of states."""
    z = np.asarray(z, dtype=np.float64)
    out = evaluate(model, np.atleast_2d(z))
    s = _quadratic_form_spd(out["M"], out["f_irr"])
    return float(s[0]) if z.ndim == 1 else s


def global_epr_mc(model: ModelState, samples, keep_local: bool = False) -> EprReport:
    """Monte Carlo average of the local rate over (caller-supplied) stationary samples."""
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.size == 0 or len(X) == 0:
        raise ValueError("global_epr_mc needs at least one sample")
    s = local_epr(model, X)
    n = len(s)
    err = float(s.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return EprReport(float(s.mean()), err, n,
                     samples=X if keep_local else None,
                     local_values=s if keep_local else None)


def system_epr(model: ModelState, z, method: str = "gradient", h: float = 1e-5):
    """System entropy production rate.

    ``method="gradient"`` evaluates ``-f_irr . grad V``. ``method="divergence"`` uses
    central differences of ``f_irr`` instead: since ``f_irr exp(-V)`` is divergence-free,
    ``div f_irr = f_irr . grad V`` (divergence taken over the last index of ``W``), so the
    same value is ``-div f_irr``.
    """
    z = np.asarray(z, dtype=np.float64)
    Z = np.atleast_2d(z)
    if method == "gradient":
        out = evaluate(model, Z)
        s = -np.sum(out["f_irr"] * out["grad_V"], axis=1)
    elif method == "divergence":
        D = Z.shape[1]
        s = np.zeros(len(Z))
        for k in range(D):
            e = np.zeros(D)
            e[k] = h
            s -= (evaluate(model, Z + e)["f_irr"][:, k] - evaluate(model, Z - e)["f_irr"][:, k]) / (2 * h)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(s[0]) if z.ndim == 1 else s


def linear_epr_exact(Mmat, Wmat, Smat) -> float:
    """``-Tr(M^-1 W S W)`` for constant matrices."""
    Mmat, Wmat, Smat = (np.asarray(a, dtype=np.float64) for a in (Mmat, Wmat, Smat))
    if not np.allclose(Wmat, -Wmat.T):
        raise ValueError("W must be antisymmetric")
    c = scipy.linalg.cho_factor(Mmat)
    scipy.linalg.cho_factor(Smat)
    return float(-np.trace(scipy.linalg.cho_solve(c, Wmat @ Smat @ Wmat)))


# --------------------------------------------------------------------------
# histogram estimator


def default_bounds(trajectories: Sequence[Trajectory], pad: float = 0.05) -> np.ndarray:
    X = np.concatenate([t.states for t in trajectories])
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.stack([lo - pad * span, hi + pad * span], axis=1)


def _bin_index(X: np.ndarray, bounds: np.ndarray, n_bins: int) -> np.ndarray:
    lo, hi = bounds[:, 0], bounds[:, 1]
    k = np.floor((X - lo) / (hi - lo) * n_bins).astype(np.int64)
    k = np.clip(k, 0, n_bins - 1)
    return np.ravel_multi_index(tuple(k.T), (n_bins,) * X.shape[1])


def histogram_epr(trajectories: Sequence[Trajectory], n_bins_per_dim: int = 20,
                  bounds=None) -> float:
    """Plug-in EPR from forward vs time-reversed bin-to-bin transition frequencies.

    Reverse transitions never observed get ``min(observed reverse frequency) / 10``.
    The log-ratio is averaged over every observed forward transition and divided by dt.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories")
    D = trajectories[0].dim
    if D > 3:
        raise ValueError(f"histogram_epr supports at most 3 dimensions, got {D}")
    dts = np.concatenate([t.increments for t in trajectories])
    if dts.size == 0:
        raise ValueError("no transitions")
    if not np.allclose(dts, dts[0], rtol=1e-9):
        raise ValueError("histogram_epr needs a uniform time step")
    dt = float(dts[0])
    bounds = default_bounds(trajectories) if bounds is None else np.asarray(bounds, dtype=np.float64)
    if bounds.shape != (D, 2) or np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ValueError("bounds must be a (D, 2) array of increasing intervals")

    nb = n_bins_per_dim ** D
    src, dst = [], []
    for t in trajectories:
        b = _bin_index(t.states, bounds, n_bins_per_dim)
        src.append(b[:-1])
        dst.append(b[1:])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    fwd_codes = src * nb + dst
    # the reversed sequences contain exactly the swapped transitions
    rev_codes = dst * nb + src
    codes, fwd_counts = np.unique(fwd_codes, return_counts=True)
    rev_unique, rev_counts = np.unique(rev_codes, return_counts=True)
    total = len(fwd_codes)
    p_fwd = fwd_counts / total
    rev_lookup = dict(zip(rev_unique.tolist(), (rev_counts / total).tolist()))
    floor = min(rev_lookup.values()) / 10.0
    p_rev = np.array([rev_lookup.get(c, floor) for c in codes.tolist()])
    return float(np.sum(fwd_counts * np.log(p_fwd / p_rev)) / total / dt)


def project(trajectories: Sequence[Trajectory], coords) -> list[Trajectory]:
    coords = list(coords)
    return [Trajectory(t.dt, t.states[:, coords]) for t in trajectories]


def projected_epr_check(trajectories: Sequence[Trajectory], coordinate_subset,
                        n_bins_per_dim: int = 20, bounds=None) -> tuple[float, float]:
    """``(full, projected)`` histogram EPR; projection uses the full grid's bin edges."""
    trajectories = list(trajectories)
    bounds = default_bounds(trajectories) if bounds is None else np.asarray(bounds, dtype=np.float64)
    full = histogram_epr(trajectories, n_bins_per_dim, bounds)
    coords = list(coordinate_subset)
    proj = histogram_epr(project(trajectories, coords), n_bins_per_dim, bounds[coords])
    return full, proj
