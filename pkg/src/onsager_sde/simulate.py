"""Euler-Maruyama integration and the trajectory file format."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

BLOWUP_NORM = 1e8
_NOISE_BLOCK = 256


class IntegrationBlowupError(RuntimeError):
    def __init__(self, message: str, traj_index: int | None = None, step: int | None = None):
        super().__init__(message)
        self.traj_index = traj_index
        self.step = step


@dataclass
class SdeSystem:
    """``dZ = drift(Z) dt + diffusion(Z) dB`` on R^dim.

    ``drift``/``diffusion`` act on a single state.  ``batch`` optionally maps an
    ``(N, dim)`` array to ``(drifts (N, dim), diffusions (N, dim, dim))`` and is
    used by ``simulate_ensemble`` when present.
    """

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    batch: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None
    name: str = "sde"

    def evaluate_batch(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.batch is not None:
            f, s = self.batch(Z)
            return np.asarray(f), np.asarray(s)
        f = np.stack([np.asarray(self.drift(z), dtype=np.float64) for z in Z])
        s = np.stack([np.asarray(self.diffusion(z), dtype=np.float64) for z in Z])
        return f, s


@dataclass
class Trajectory:
    """Recorded states ``(n, D)`` with either one ``dt`` or one increment per step."""

    dt: float | np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        if len(self.states) < 1:
            raise ValueError("a trajectory needs at least one state")
        if np.ndim(self.dt) == 0:
            self.dt = float(self.dt)
            if self.dt <= 0:
                raise ValueError("dt must be positive")
        else:
            self.dt = np.asarray(self.dt, dtype=np.float64)
            if self.dt.shape != (len(self.states) - 1,) or np.any(self.dt <= 0):
                raise ValueError("per-step dt must be positive with one entry per transition")

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def increments(self) -> np.ndarray:
        if np.ndim(self.dt) == 0:
            return np.full(self.n_steps, self.dt)
        return self.dt

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.increments)])


def em_step(sys: SdeSystem, z, dt: float, gaussian_draw) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = np.asarray(z, dtype=np.float64)
    out = (z + dt * np.asarray(sys.drift(z))
           + np.sqrt(dt) * np.asarray(sys.diffusion(z)) @ np.asarray(gaussian_draw))
    if not np.all(np.isfinite(out)) or np.linalg.norm(out) > BLOWUP_NORM:
        raise IntegrationBlowupError(f"Euler-Maruyama step left the finite range: {out}")
    return out


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index``; does not depend on ensemble order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def simulate_ensemble(
    sys: SdeSystem,
    inits: Sequence,
    dt: float,
    steps: int,
    seed: int,
    thin: int = 1,
    index_offset: int = 0,
) -> list[Trajectory]:
    """Integrate all initial states jointly; trajectory i draws noise from stream (seed, i).

    Every ``thin``-th state is recorded, starting with the initial one.
    """
    if thin < 1:
        raise ValueError("thin must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be positive")
    Z = np.array(np.atleast_2d(inits), dtype=np.float64)
    N, D = Z.shape
    if D != sys.dim:
        raise ValueError(f"initial states have dimension {D}, system has {sys.dim}")
    rngs = [trajectory_rng(seed, index_offset + i) for i in range(N)]
    record = [Z.copy()]
    sqdt = np.sqrt(dt)
    step = 0
    while step < steps:
        k = min(_NOISE_BLOCK, steps - step)
        noise = np.stack([g.standard_normal((k, D)) for g in rngs], axis=1)
        for j in range(k):
            f, s = sys.evaluate_batch(Z)
            Z = Z + dt * f + sqdt * np.einsum("nij,nj->ni", s, noise[j])
            step += 1
            bad = ~np.isfinite(Z).all(axis=1) | (np.linalg.norm(Z, axis=1) > BLOWUP_NORM)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise IntegrationBlowupError(
                    f"trajectory {index_offset + i} blew up at step {step}",
                    traj_index=index_offset + i, step=step,
                )
            if step % thin == 0:
                record.append(Z.copy())
    states = np.stack(record, axis=1)
    return [Trajectory(dt * thin, states[i]) for i in range(N)]


def stationary_samples(trajs: Sequence[Trajectory], burn_in: int = 0) -> np.ndarray:
    """Pool recorded states after dropping the first ``burn_in`` of each trajectory."""
    return np.concatenate([t.states[burn_in:] for t in trajs], axis=0)


def model_system(model) -> SdeSystem:
    """The learned SDE of a ``ModelState`` as an integrable system."""
    from .model import drift_and_sigma

    def one(z):
        f, s = drift_and_sigma(model, np.atleast_2d(z))
        return f[0], s[0]

    return SdeSystem(model.dim, lambda z: one(z)[0], lambda z: one(z)[1],
                     batch=lambda Z: drift_and_sigma(model, Z), name="learned")


def sample_model_stationary(model, n_paths: int, seed: int, dt: float = 0.01, steps: int = 3000,
                            thin: int = 100, burn_in: int = 20, init_std: float = 2.0,
                            center=None) -> np.ndarray:
    """Approximate draws from the learned invariant law by long Euler-Maruyama runs.

    Paths start from ``center + init_std * N(0, I)``; the first ``burn_in`` recorded
    states of each path are dropped.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    c = np.zeros(model.dim) if center is None else np.asarray(center, dtype=np.float64)
    inits = c + init_std * rng.standard_normal((n_paths, model.dim))
    trajs = simulate_ensemble(model_system(model), inits, dt, steps, seed, thin=thin)
    return stationary_samples(trajs, burn_in)


# --------------------------------------------------------------------------
# trajectory CSV + metadata sidecar


def metadata_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def write_trajectories(path, trajs: Sequence[Trajectory], metadata: dict | None = None,
                       thin: int = 1) -> None:
    path = Path(path)
    D = trajs[0].dim
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "step", "t"] + [f"z{k}" for k in range(D)])
        for i, tr in enumerate(trajs):
            for j, (t, z) in enumerate(zip(tr.times, tr.states)):
                w.writerow([i, j * thin, repr(float(t))] + [repr(float(x)) for x in z])
    meta = {"dim": D, "n_traj": len(trajs), "thin": thin}
    if np.ndim(trajs[0].dt) == 0:
        meta["record_dt"] = float(trajs[0].dt)
    if metadata:
        meta.update(metadata)
    metadata_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_trajectories(path) -> tuple[list[Trajectory], dict]:
    path = Path(path)
    with path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["traj_id", "step", "t"] or len(header) < 4:
            raise ValueError(f"{path}: not a trajectory CSV (header {header[:4]})")
        rows = np.array([[float(x) for x in r] for r in reader if r])
    meta_file = metadata_path(path)
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    if rows.size == 0:
        raise ValueError(f"{path}: no trajectory rows")
    trajs = []
    ids = rows[:, 0].astype(int)
    for tid in dict.fromkeys(ids):
        block = rows[ids == tid]
        t = block[:, 2]
        states = block[:, 3:]
        dts = np.diff(t)
        # the sidecar carries the exact recorded step; time columns only approximate it
        if len(dts) and np.allclose(dts, dts[0], rtol=1e-9, atol=0):
            dt = float(meta.get("record_dt", dts[0]))
        elif len(dts):
            dt = dts
        else:
            dt = float(meta.get("record_dt", 1.0))
        trajs.append(Trajectory(dt, states))
    return trajs, meta
