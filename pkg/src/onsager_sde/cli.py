"""Command-line front end: ``onsager-sde <command> [flags]``.

Every run writes into ``--out-dir``: the artifacts, ``config.json`` (the resolved
settings) and ``run.log``.  Settings come from flags, then ``--config`` (JSON), then
the defaults below.  Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("onsager_sde")


class UsageError(Exception):
    pass


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(",") if x.strip())


# (flag, default, converter, help); ``None`` default means required
COMMON = {
    "seed": ("--seed", 0, int, "random seed"),
    "out_dir": ("--out-dir", "run", str, "output directory"),
    "threads": ("--threads", 0, int, "cap on worker threads (0 = library default)"),
}

COMMANDS: dict[str, dict] = {
    "generate": {
        "generator": ("--generator", None, str, "linear or sgld-lsq"),
        "lam": ("--lambda", 1.0, float, "[linear] antisymmetric strength"),
        "n_traj": ("--n-traj", 2000, int, "[linear] trajectories / [sgld-lsq] independent runs"),
        "t_end": ("--t-end", 1.0, float, "[linear] time horizon"),
        "dt": ("--dt", 0.01, float, "[linear] integration step"),
        "thin": ("--thin", 0, int, "record every thin-th state (0: 1 for linear, 50 for sgld-lsq)"),
        "init_std": ("--init-std", 2.0, float, "[linear] std of the initial states"),
        "batch_size": ("--batch-size", 1, int, "[sgld-lsq] minibatch size b"),
        "eta": ("--eta", 1e-3, float, "[sgld-lsq] step size"),
        "steps": ("--steps", 1000, int, "[sgld-lsq] SGLD steps per run"),
        "n_rows": ("--n-rows", 66, int, "[sgld-lsq] rows of the design matrix"),
        "dim": ("--dim", 12, int, "[sgld-lsq] number of unknowns"),
        "rhs_noise": ("--rhs-noise", 0.5, float, "[sgld-lsq] std of the right-hand-side noise"),
        "problem_seed": ("--problem-seed", 0, int, "[sgld-lsq] seed of the synthetic problem"),
    },
    "train": {
        "data": ("--data", None, str, "trajectory CSV"),
        "epochs": ("--epochs", 100, int, "training epochs"),
        "batch_size": ("--batch-size", 4096, int, "transition pairs per step"),
        "lr": ("--lr", 1e-3, float, "Adam learning rate"),
        "final_lr_factor": ("--final-lr-factor", 1.0, float, "cosine decay to lr * factor"),
        "adam_beta2": ("--adam-beta2", 0.999, float, "Adam second-moment decay"),
        "m": ("--m", 32, int, "width of the potential feature map"),
        "u_hidden": ("--u-hidden", "128", _ints, "hidden widths of U, comma separated"),
        "h_hidden": ("--h-hidden", "128,128", _ints, "hidden widths of H"),
        "sigma_hidden": ("--sigma-hidden", "32,32", _ints, "hidden widths of the diffusion nets"),
        "activation": ("--activation", "tanh", str, "tanh, requ or recu"),
        "diffusion": ("--diffusion", "state", str, "state or diag"),
        "standardize": ("--standardize", 0, int, "1: fit on standardized coordinates"),
    },
    "simulate": {
        "checkpoint": ("--checkpoint", None, str, "model checkpoint"),
        "n_paths": ("--n-paths", 100, int, "number of paths"),
        "dt": ("--dt", 0.01, float, "integration step"),
        "steps": ("--steps", 1000, int, "steps per path"),
        "thin": ("--thin", 1, int, "record every thin-th state"),
        "init_std": ("--init-std", 1.0, float, "std of the initial states"),
    },
    "epr": {
        "checkpoint": ("--checkpoint", None, str, "model checkpoint"),
        "samples": ("--samples", 1000, int, "number of stationary samples"),
        "dt": ("--dt", 0.01, float, "integration step of the sampler"),
        "steps": ("--steps", 3000, int, "sampler steps per path"),
        "thin": ("--thin", 100, int, "sampler recording stride"),
        "burn_in": ("--burn-in", 20, int, "recorded states dropped per path"),
        "local_csv": ("--local-csv", 0, int, "1: also write per-sample local EPR"),
    },
    "landscape": {
        "checkpoint": ("--checkpoint", None, str, "model checkpoint"),
        "seed_a": ("--seed-a", None, _floats, "first seed point, comma separated"),
        "seed_b": ("--seed-b", None, _floats, "second seed point"),
        "n_starts": ("--n-starts", 8, int, "GAD launch points between the minima"),
        "gad_step": ("--gad-step", 1e-3, float, "GAD Euler step"),
        "grid_n": ("--grid-n", 0, int, "points per axis of the V-grid CSV (0: none; 2-D only)"),
        "grid_range": ("--grid-range", "-2,2", _floats, "lo,hi of the V grid"),
    },
    "report": {
        "checkpoint": ("--checkpoint", None, str, "model checkpoint"),
        "compare_checkpoint": ("--compare-checkpoint", "", str, "second seed's checkpoint"),
        "data": ("--data", "", str, "trajectory CSV (grid bounds, exact EPR from metadata)"),
        "samples": ("--samples", 2000, int, "stationary samples for the global EPR"),
        "seed_a": ("--seed-a", "", _floats, "landscape seed point A (optional)"),
        "seed_b": ("--seed-b", "", _floats, "landscape seed point B"),
        "grid_n": ("--grid-n", 41, int, "points per axis of the grid dumps (2-D only)"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onsager-sde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON file with settings for this command")
        for dest, (flag, default, _, help_) in {**COMMON, **opts}.items():
            extra = {"choices": ["linear", "sgld-lsq"]} if dest == "generator" else {}
            p.add_argument(flag, dest=dest, default=None, help=f"{help_} (default: {default})", **extra)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Flags over config file over defaults; unknown config keys are a usage error."""
    opts = {**COMMON, **COMMANDS[args.command]}
    from_file = {}
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(from_file) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    cfg = {}
    for dest, (flag, default, conv, _) in opts.items():
        raw = getattr(args, dest)
        if raw is None:
            raw = from_file.get(dest, default)
        if raw is None:
            raise UsageError(f"{flag} is required")
        try:
            cfg[dest] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {flag}: {raw!r}") from exc
    cfg["command"] = args.command
    return cfg


def _limit_threads(n: int) -> None:
    if n > 0:
        os.environ["XLA_FLAGS"] = (os.environ.get("XLA_FLAGS", "")
                                   + f" --xla_cpu_multi_thread_eigen={'false' if n == 1 else 'true'}"
                                   + f" intra_op_parallelism_threads={n}").strip()
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _grid(bounds, n: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, n) for lo, hi in bounds]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(bounds))


def _activation(name: str):
    from .nets import Activation
    if name not in ("tanh", "requ", "recu"):
        raise UsageError(f"unknown activation {name!r}")
    return getattr(Activation, name)()


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict, out: Path) -> None:
    from . import datagen
    from .epr import linear_epr_exact
    from .simulate import write_trajectories

    if cfg["generator"] == "linear":
        thin = cfg["thin"] or 1
        ds, system = datagen.gen_linear_dataset(cfg["seed"], cfg["lam"], cfg["n_traj"], cfg["t_end"],
                                                cfg["dt"], thin, cfg["init_std"])
        meta = {"generator": "linear", "seed": cfg["seed"], "dt": cfg["dt"], **system.to_dict(),
                "exact_epr": linear_epr_exact(system.Mmat, system.Wmat, system.Smat)}
        trajs = ds.trajectories
    elif cfg["generator"] == "sgld-lsq":
        thin = cfg["thin"] or 50
        problem = datagen.synthetic_lsq_problem(cfg["problem_seed"], cfg["n_rows"], cfg["dim"],
                                                rhs_noise=cfg["rhs_noise"], eta=cfg["eta"],
                                                batch_b=cfg["batch_size"])
        trajs = datagen.sgld_lsq_ensemble(problem, cfg["seed"], cfg["n_traj"], cfg["steps"], thin)
        mean, cov = problem.gibbs_mean_cov()
        meta = {"generator": "sgld-lsq", "seed": cfg["seed"], "dt": cfg["eta"], "eta": cfg["eta"],
                "batch_size": cfg["batch_size"], "A": problem.A.tolist(), "v": problem.v.tolist(),
                "gibbs_mean": mean.tolist(), "gibbs_cov": cov.tolist()}
    else:  # pragma: no cover - argparse restricts the choices
        raise UsageError(f"unknown generator {cfg['generator']!r}")
    write_trajectories(out / "trajectories.csv", trajs, meta, thin=thin)
    log.info("wrote %d trajectories to %s", len(trajs), out / "trajectories.csv")


def cmd_train(cfg: dict, out: Path) -> None:
    from .datagen import Standardizer
    from .model import build_model, save_checkpoint
    from .simulate import read_trajectories
    from .training import TrainConfig, TrajectoryDataset, train

    trajs, meta = read_trajectories(_require_file(cfg["data"]))
    extra = {"data": str(cfg["data"])}
    if cfg["standardize"]:
        st = Standardizer.fit(trajs)
        trajs = st.apply(trajs)
        extra["standardizer"] = st.to_dict()
    ds = TrajectoryDataset(trajs)
    act = _activation(cfg["activation"])
    model = build_model(ds.dim, m=cfg["m"], u_hidden=cfg["u_hidden"], h_hidden=cfg["h_hidden"],
                        sigma_hidden=cfg["sigma_hidden"], u_activation=act, h_activation=act,
                        diffusion=cfg["diffusion"], seed=cfg["seed"])
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                     final_lr_factor=cfg["final_lr_factor"], adam_beta2=cfg["adam_beta2"], seed=cfg["seed"], log_every=10)
    result = train(ds, model, tc)
    save_checkpoint(out / "checkpoint.json", result.model, seed=cfg["seed"],
                    dataset_fingerprint=ds.fingerprint(), extra=extra)
    _write_rows(out / "loss_history.csv", ["epoch", "mean_nll"],
                [(k, v) for k, v in enumerate(result.history)])
    if result.history:
        log.info("final mean NLL %.6f", result.history[-1])


def cmd_simulate(cfg: dict, out: Path) -> None:
    from .model import load_checkpoint
    from .simulate import model_system, simulate_ensemble, write_trajectories

    model, _ = load_checkpoint(_require_file(cfg["checkpoint"]))
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0x1417]))
    inits = cfg["init_std"] * rng.standard_normal((cfg["n_paths"], model.dim))
    trajs = simulate_ensemble(model_system(model), inits, cfg["dt"], cfg["steps"], cfg["seed"],
                              thin=cfg["thin"])
    write_trajectories(out / "trajectories.csv", trajs,
                       {"generator": "learned", "checkpoint": cfg["checkpoint"], "dt": cfg["dt"]},
                       thin=cfg["thin"])


def _stationary(model, n: int, seed: int, dt=0.01, steps=3000, thin=100, burn_in=20) -> np.ndarray:
    from .simulate import sample_model_stationary

    per_path = steps // thin + 1 - burn_in
    if per_path < 1:
        raise UsageError("burn-in removes every recorded state")
    X = sample_model_stationary(model, math.ceil(n / per_path), seed, dt, steps, thin, burn_in)
    return X[:n]


def cmd_epr(cfg: dict, out: Path) -> None:
    from .epr import global_epr_mc
    from .model import load_checkpoint

    model, _ = load_checkpoint(_require_file(cfg["checkpoint"]))
    X = _stationary(model, cfg["samples"], cfg["seed"], cfg["dt"], cfg["steps"], cfg["thin"],
                    cfg["burn_in"])
    rep = global_epr_mc(model, X, keep_local=True)
    _json_dump(out / "epr_report.json", rep.to_dict())
    if cfg["local_csv"]:
        D = model.dim
        _write_rows(out / "local_epr.csv", [f"z{k}" for k in range(D)] + ["s_tot"],
                    [(*z, s) for z, s in zip(X, rep.local_values)])
    log.info("global EPR %.6g +- %.2g (%d samples)", rep.global_epr, rep.mc_std_error, rep.n_samples)


def cmd_landscape(cfg: dict, out: Path) -> None:
    from .landscape import PotentialField, barrier_heights
    from .model import evaluate, load_checkpoint

    model, _ = load_checkpoint(_require_file(cfg["checkpoint"]))
    for key in ("seed_a", "seed_b"):
        if len(cfg[key]) != model.dim:
            raise UsageError(f"--{key.replace('_', '-')} needs {model.dim} coordinates")
    rep = barrier_heights(PotentialField.from_model(model), np.array(cfg["seed_a"]),
                          np.array(cfg["seed_b"]), cfg["n_starts"], seed=cfg["seed"],
                          gad_step=cfg["gad_step"])
    _json_dump(out / "landscape_report.json", rep.to_dict())
    if cfg["grid_n"]:
        if model.dim != 2:
            raise UsageError("V-grid output needs a 2-D model")
        lo, hi = cfg["grid_range"]
        G = _grid([(lo, hi), (lo, hi)], cfg["grid_n"])
        _write_rows(out / "v_grid.csv", ["z0", "z1", "V"], [(*z, v) for z, v in zip(G, evaluate(model, G)["V"])])


def cmd_report(cfg: dict, out: Path) -> None:
    from .epr import global_epr_mc, local_epr
    from .landscape import DistinctMinimaError, NonConvergenceError, PotentialField, barrier_heights
    from .model import evaluate, load_checkpoint
    from .simulate import read_trajectories

    model, doc = load_checkpoint(_require_file(cfg["checkpoint"]))
    D = model.dim
    report: dict = {"checkpoint": cfg["checkpoint"], "dim": D}
    bounds = np.array([[-2.0, 2.0]] * D)
    if cfg["data"]:
        trajs, meta = read_trajectories(_require_file(cfg["data"]))
        X = np.concatenate([t.states for t in trajs])
        st = (doc.get("extra") or {}).get("standardizer")
        if st:
            X = (X - np.array(st["mean"])) / np.array(st["scale"])
        bounds = np.stack([np.quantile(X, 0.01, axis=0), np.quantile(X, 0.99, axis=0)], axis=1)
        if "exact_epr" in meta:
            report["exact_epr"] = meta["exact_epr"]

    rep = global_epr_mc(model, _stationary(model, cfg["samples"], cfg["seed"]))
    report["global_epr"] = rep.global_epr
    report["global_epr_std_error"] = rep.mc_std_error
    report["n_samples"] = rep.n_samples
    if "exact_epr" in report:
        report["epr_relative_error"] = rep.global_epr / report["exact_epr"] - 1.0

    G = _grid(bounds, cfg["grid_n"]) if D == 2 else None
    if cfg["compare_checkpoint"]:
        other, _ = load_checkpoint(_require_file(cfg["compare_checkpoint"]))
        probe = G if G is not None else np.random.default_rng(cfg["seed"]).uniform(
            bounds[:, 0], bounds[:, 1], size=(2000, D))
        V1 = evaluate(model, probe)["V"]
        V2 = evaluate(other, probe)["V"]
        report["seed_variation"] = float(np.std(V1 - V2) / np.ptp(V1))

    if cfg["seed_a"] and cfg["seed_b"]:
        try:
            land = barrier_heights(PotentialField.from_model(model), np.array(cfg["seed_a"]),
                                   np.array(cfg["seed_b"]), seed=cfg["seed"])
            report["landscape"] = land.to_dict()
        except (DistinctMinimaError, NonConvergenceError) as exc:
            report["landscape"] = {"error": str(exc)}

    if G is not None:
        out_fields = evaluate(model, G)
        _write_rows(out / "v_grid.csv", ["z0", "z1", "V"], [(*z, v) for z, v in zip(G, out_fields["V"])])
        _write_rows(out / "epr_grid.csv", ["z0", "z1", "s_tot"],
                    [(*z, s) for z, s in zip(G, local_epr(model, G))])
    _json_dump(out / "report.json", report)


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "simulate": cmd_simulate,
            "epr": cmd_epr, "landscape": cmd_landscape, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"onsager-sde: error: {exc}", file=sys.stderr)
        return 2
    _limit_threads(cfg["threads"])

    out = Path(cfg["out_dir"])
    handler = None
    try:
        out.mkdir(parents=True, exist_ok=True)
        _json_dump(out / "config.json", {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()})
        handler = logging.FileHandler(out / "run.log", mode="w")
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        HANDLERS[cfg["command"]](cfg, out)
    except UsageError as exc:
        print(f"onsager-sde: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"onsager-sde: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
