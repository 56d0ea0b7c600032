"""Command-line entry point: ``hybridloc {run,bench-assoc,bench-opt,check-jacobians}``.

Exit codes: 0 success, 1 failed Jacobian audit, 2 configuration error,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import jaccheck
from .association import associate_projection_baseline, associate_raycast
from .config import RunConfig, load, with_workers
from .errors import ConfigError, LocalizationError
from .factors import Observation
from .gmm_map import build_voxel_index, load_map
from .pipeline import optimize_window, run_sequence
from .sim import evaluate, generate_trajectory, generate_world, rng_for, simulate, write_tum
from .state import StateVector

EXIT_OK, EXIT_JACOBIAN, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
STREAM_BENCH = 101


# ---------------------------------------------------------------- run

def _dataset(cfg: RunConfig):
    ds = simulate(cfg.sim)
    if cfg.map_path:
        try:
            mixture = load_map(cfg.map_path)
        except OSError as exc:
            raise ConfigError("map.path", f"cannot read {cfg.map_path}: {exc.strerror}") from None
        ds.world = replace(ds.world, mixture=mixture)
    return ds


def cmd_run(cfg: RunConfig, out: Path) -> dict:
    """Simulate, localize, evaluate; writes metrics.json, est.tum and gt.tum."""
    ds = _dataset(cfg)
    res = run_sequence(ds, cfg.loc)
    ev = evaluate(res.positions(), ds.truth, res.localized())
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "est.tum", [f.stamp for f in res.frames],
              [f.state.R_WB for f in res.frames], [f.state.p_W for f in res.frames])
    tr = ds.truth.frames
    write_tum(out / "gt.tum", [f.stamp for f in tr], [f.R_WB for f in tr], [f.p_W for f in tr])
    metrics = {
        "mode": cfg.mode,
        "backend": cfg.loc.backend,
        "seed": cfg.sim.rng_seed,
        "n_frames": len(res.frames),
        "mape_m": ev.mape_m,
        "rmse_m": ev.rmse_m,
        "recall_pct": ev.recall_pct,
        "seeds_created": res.seeds_created,
        "per_stage_timing": res.timing_table(),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


# ---------------------------------------------------------------- benchmarks

def _time_call(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _summary(samples) -> tuple[float, float]:
    v = np.asarray(samples) * 1e3
    return float(v.mean()), float(v.std())


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] for h in header])


def assoc_inputs(cfg: RunConfig, n_components: int):
    """Camera poses and feature sets for one component count.

    Poses and features depend only on the seed, so every count and every
    method sees the same inputs.
    """
    b = cfg.bench
    sim = replace(cfg.sim, world=replace(cfg.sim.world, n_components=n_components))
    traj = generate_trajectory(sim)
    world = generate_world(sim)
    grid = build_voxel_index(world.mixture, cfg.loc.voxel_size, cfg.loc.voxel_rel_mass)
    cam, extr = sim.camera, sim.extrinsics
    rng = rng_for(sim.rng_seed, STREAM_BENCH)
    frames = []
    for t in np.linspace(0.0, sim.duration, b.assoc_frames, endpoint=False):
        R_WB, p_W, _ = traj.state(t)
        R_CW, t_CW = extr.camera_pose(StateVector.from_world(R_WB, p_W))
        pose = (R_CW.T, -R_CW.T @ t_CW)
        u = rng.uniform([0, 0], [cam.width, cam.height], size=(b.assoc_features, 2))
        score = rng.uniform(size=b.assoc_features)
        feats = [Observation(u=u[i], feature_id=i, frame_id=0, score=float(score[i]))
                 for i in range(b.assoc_features)]
        frames.append((pose, feats))
    return world.mixture, grid, cam, frames


def bench_assoc(cfg: RunConfig) -> list[dict]:
    b = cfg.bench
    calls = {}
    for n in b.assoc_components:
        mixture, grid, cam, frames = assoc_inputs(cfg, n)
        calls[("raycast", n)] = (frames, lambda pose, f, cam=cam, grid=grid, mixture=mixture:
                                 associate_raycast(pose, f, cam, grid, mixture, cfg.loc.assoc))
        calls[("projection", n)] = (frames, lambda pose, f, cam=cam, mixture=mixture:
                                    associate_projection_baseline(pose, f, cam, mixture,
                                                                  cfg.loc.assoc))
    samples = {k: [] for k in calls}
    for _ in range(b.warmup):
        for frames, fn in calls.values():
            for pose, feats in frames:
                fn(pose, feats)
    # every repetition cycles through all (method, count) pairs so slow
    # drift in machine load does not bias one row
    for _ in range(b.reps):
        for k, (frames, fn) in calls.items():
            for pose, feats in frames:
                samples[k].append(_time_call(lambda: fn(pose, feats)))
    rows = []
    for method in ("raycast", "projection"):
        for n in b.assoc_components:
            mean, std = _summary(samples[(method, n)])
            rows.append({"method": method, "components": n, "mean_ms": mean, "std_ms": std})
    return rows


def bench_opt(cfg: RunConfig) -> list[dict]:
    """Re-time identical captured windows with both backends.

    Windows are captured from the reference (visual) run; the RMSE column
    comes from a full run of each backend.
    """
    if cfg.mode == "V":
        raise ConfigError("mode", "bench-opt needs an inertial mode (V+I, V+I+L or V+I+P)")
    b = cfg.bench
    ds = _dataset(cfg)
    rmse, captured = {}, []
    for backend in ("visual", "prior"):
        res = run_sequence(ds, replace(cfg.loc, backend=backend),
                           capture=captured if backend == "visual" else None)
        rmse[backend] = evaluate(res.positions(), ds.truth, res.localized()).rmse_m
    full = [w for w in captured if len(w.states) == cfg.loc.window.size] or captured
    pick = np.unique(np.linspace(0, len(full) - 1, min(b.opt_windows, len(full))).round())
    windows = [full[int(i)] for i in pick]
    samples = {"visual": [], "prior": []}
    for _ in range(b.warmup):
        for w in windows:
            for backend in samples:
                optimize_window(w, backend, cfg.loc.window)
    # interleave backends so machine-load drift hits both equally
    for _ in range(b.reps):
        for w in windows:
            for backend in samples:
                samples[backend].append(
                    _time_call(lambda: optimize_window(w, backend, cfg.loc.window)))
    rows = []
    for backend in samples:
        mean, std = _summary(samples[backend])
        rows.append({"backend": backend, "mean_ms": mean, "std_ms": std,
                     "final_rmse_m": rmse[backend]})
    return rows


# ---------------------------------------------------------------- driver

def _origin(exc: BaseException) -> str:
    """Dotted module of the innermost package frame that raised ``exc``."""
    mod = "hybridloc"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("hybridloc"):
            mod = name
    return mod


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridloc",
                                description="Localization against a hybrid Gaussian map.")
    p.add_argument("command", choices=["run", "bench-assoc", "bench-opt", "check-jacobians"])
    p.add_argument("--config", type=Path, help="config file (key = value lines)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, help="override sim.seed")
    p.add_argument("--workers", type=int, help="association worker threads (default 1)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "check-jacobians":
        return EXIT_OK if jaccheck.main(seed=args.seed or 0) == 0 else EXIT_JACOBIAN
    try:
        if args.config is None:
            raise ConfigError("--config", "a config file is required for this command")
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers", "must be at least 1")
        overrides = {} if args.seed is None else {"sim.seed": str(args.seed)}
        cfg = load(args.config, overrides)
        cfg = with_workers(cfg, args.workers or 1)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            m = cmd_run(cfg, args.out)
            print(f"mape_m={m['mape_m']:.6g} recall_pct={m['recall_pct']:.1f} "
                  f"-> {args.out / 'metrics.json'}")
        elif args.command == "bench-assoc":
            rows = bench_assoc(cfg)
            _write_csv(args.out / "bench_assoc.csv",
                       ["method", "components", "mean_ms", "std_ms"], rows)
            for r in rows:
                print(f"{r['method']:<11} {r['components']:>5} {r['mean_ms']:9.3f} "
                      f"± {r['std_ms']:.3f} ms")
        else:
            rows = bench_opt(cfg)
            _write_csv(args.out / "bench_opt.csv",
                       ["backend", "mean_ms", "std_ms", "final_rmse_m"], rows)
            for r in rows:
                print(f"{r['backend']:<7} {r['mean_ms']:9.3f} ± {r['std_ms']:.3f} ms  "
                      f"rmse {r['final_rmse_m']:.4g} m")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LocalizationError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"runtime error in {_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
