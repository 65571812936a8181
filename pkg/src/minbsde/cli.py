"""Command line front end.

    minbsde run experiment.json [--out DIR] [--dump-paths] [--workers K]
    minbsde compare out1/summary.csv out2/summary.csv ...

``run`` exits 0 on success, 2 on an invalid config and 3 when the simulation
aborts. ``compare`` exits 1 if any monotonicity or dual-domination flag
fails and 2 on a malformed file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bsde import (PROJECTION, export_surface_csv, penalized_backward_sweep,
                   projection_backward_sweep)
from .dual import (constant_tilt, dual_value_estimate, extract_bang_bang_tilt, import_tilt_csv,
                   toward_atom_tilt)
from .forward import SimulationAborted, TimeGrid, simulate_paths, write_paths_csv
from .model import CatalogError, NumericError, make_catalog_problem
from .pde import CFLError, export_fd_csv, fd_solve_hjb, fd_value_at, make_fd_grid
from .regression import BasisSpec

logger = logging.getLogger("minbsde")

SUMMARY_COLUMNS = ["scheme", "penalty", "mean", "stderr", "n_paths", "wall_time"]
CONSTRAINT_COLUMNS = ["penalty", "k", "t", "positive_part", "positive_part_integral",
                      "max_violation"]
SCHEMES = ("penalized", "projection", "dual", "fd")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: str
    params: dict
    n_steps: int
    x0: float | list
    i0: int
    paths: int
    seed: int
    basis: BasisSpec = field(default_factory=BasisSpec)
    penalties: list = field(default_factory=lambda: [0.0])
    schemes: list = field(default_factory=lambda: ["penalized"])
    tilts: list = field(default_factory=list)
    fd: dict = field(default_factory=dict)
    surface: object = None
    continuation: str = "coupled"
    workers: int = 1
    out: str | None = None


def _need(doc, key, where=""):
    if key not in doc:
        raise ConfigError(f"{where}{key}: required field is missing")
    return doc[key]


def _int(value, name, lo=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{name}: must be >= {lo}")
    return int(value)


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document; raises ConfigError naming the field."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    prob = _need(doc, "problem")
    if isinstance(prob, str):
        name, params = prob, {}
    else:
        name, params = _need(prob, "name", "problem."), dict(prob.get("params", {}))
    grid = _need(doc, "grid")
    n_steps = _int(_need(grid, "N", "grid."), "grid.N", 1)
    if "T" in grid:
        if "T" in params and float(params["T"]) != float(grid["T"]):
            raise ConfigError("grid.T: differs from problem.params.T")
        params["T"] = grid["T"]
    if "seed" not in doc:
        raise ConfigError("seed: required field is missing (no clock seeding)")
    seed = _int(doc["seed"], "seed", 0)
    paths = _int(_need(doc, "paths"), "paths", 1)
    i0 = _int(doc.get("i0", 0), "i0", 0)

    bdoc = doc.get("basis", {})
    try:
        basis = BasisSpec(**bdoc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"basis: {exc}") from None

    schemes = list(doc.get("schemes", ["penalized"]))
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"schemes: unknown scheme {s!r}; choose from {SCHEMES}")
    penalties = doc.get("penalties", [0.0])
    if not isinstance(penalties, list):
        raise ConfigError("penalties: expected a list")
    try:
        penalties = [float(p) for p in penalties]
    except (TypeError, ValueError):
        raise ConfigError("penalties: entries must be numbers") from None
    if any(p < 0 or not math.isfinite(p) for p in penalties):
        raise ConfigError("penalties: levels must be finite and >= 0")

    tilts = doc.get("tilts", [])
    for t_ in tilts:
        kind = t_.get("kind") if isinstance(t_, dict) else None
        if kind not in ("constant", "toward", "bang_bang", "table"):
            raise ConfigError(f"tilts: unknown tilt {t_!r}")
        required = {"constant": ("kappa",), "toward": ("atom", "kappa"), "table": ("file",),
                    "bang_bang": ("n",)}[kind]
        for key in required:
            _need(t_, key, f"tilts[{kind}].")
        for key in ("kappa", "n"):
            if key in t_ and not (isinstance(t_[key], (int, float)) and t_[key] >= 0):
                raise ConfigError(f"tilts[{kind}].{key}: must be a number >= 0")
        if "kappa" in t_ and t_["kappa"] < 1:
            raise ConfigError(f"tilts[{kind}].kappa: tilts must be >= 1")
    continuation = doc.get("continuation", "coupled")
    if continuation not in ("coupled", "partition"):
        raise ConfigError("continuation: expected 'coupled' or 'partition'")

    cfg = ExperimentConfig(name, params, n_steps, doc.get("x0", 0.0), i0, paths, seed, basis,
                           penalties, schemes, tilts, dict(doc.get("fd", {})),
                           doc.get("surface"), continuation,
                           _int(doc.get("workers", 1), "workers", 1), doc.get("out"))
    _check_stability(cfg)
    return cfg


def _check_stability(cfg: ExperimentConfig):
    T = float(cfg.params.get("T", 1.0))
    dt = T / cfg.n_steps
    levels = list(cfg.penalties) if "penalized" in cfg.schemes else []
    if "dual" in cfg.schemes:
        levels += [float(t["n"]) for t in cfg.tilts if t["kind"] == "bang_bang"]
    for n in levels:
        if n * dt > 1.0 + 1e-12:
            raise ConfigError(f"penalties: stability rule n*dt <= 1 violated for n={n:g} "
                              f"with dt={dt:g} (use N >= {math.ceil(n * T)})")


def _build_tilt(spec, regimes, surfaces, base_dir):
    kind = spec["kind"]
    if kind == "constant":
        return constant_tilt(regimes, float(spec["kappa"]))
    if kind == "toward":
        atom = int(spec["atom"])
        if not 0 <= atom < regimes.size:
            raise ConfigError(f"tilts[toward].atom: {atom} out of range")
        return toward_atom_tilt(regimes, atom, float(spec["kappa"]))
    if kind == "table":
        return import_tilt_csv(base_dir / spec["file"], regimes, spec.get("label"))
    return extract_bang_bang_tilt(surfaces[float(spec["n"])], float(spec["n"]))


def _fmt(v):
    return repr(float(v))


def run_experiment(cfg: ExperimentConfig, out_dir: Path, dump_paths=False,
                   base_dir: Path = Path(".")) -> list[dict]:
    """Run every requested scheme and write the CSV artifacts into ``out_dir``."""
    try:
        model, regimes = make_catalog_problem(cfg.problem, cfg.params)
    except CatalogError as exc:
        raise ConfigError(f"problem: {exc}") from None
    if not cfg.i0 < regimes.size:
        raise ConfigError(f"i0: atom {cfg.i0} out of range (M={regimes.size})")
    x0 = np.broadcast_to(np.asarray(cfg.x0, dtype=float), (model.dim_x,))
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = TimeGrid.uniform(model.horizon, cfg.n_steps)
    rows, constraint_rows = [], []

    need_paths = any(s in cfg.schemes for s in ("penalized", "projection", "dual"))
    bundle = None
    if need_paths:
        bundle = simulate_paths(model, regimes, grid, x0, cfg.i0, cfg.paths, cfg.seed,
                                cfg.workers)
        if dump_paths:
            write_paths_csv(bundle, out_dir / "paths.csv")

    kw = dict(continuation=cfg.continuation, workers=cfg.workers)
    surfaces = {}
    if "penalized" in cfg.schemes:
        for n in cfg.penalties:
            t0 = time.perf_counter()
            surf, est, rep = penalized_backward_sweep(bundle, model, regimes, cfg.basis, n, **kw)
            surfaces[n] = surf
            rows.append(dict(scheme="penalized", penalty=_fmt(n), mean=_fmt(est.mean),
                             stderr=_fmt(est.stderr), n_paths=est.n_paths,
                             wall_time=f"{time.perf_counter() - t0:.3f}"))
            for k, p in enumerate(rep.profile):
                constraint_rows.append([_fmt(n), k, _fmt(grid.times[k]), _fmt(p),
                                        _fmt(rep.positive_part_integral),
                                        _fmt(rep.max_violation)])
    if "projection" in cfg.schemes:
        t0 = time.perf_counter()
        surf, est = projection_backward_sweep(bundle, model, regimes, cfg.basis, **kw)
        surfaces[PROJECTION] = surf
        rows.append(dict(scheme="projection", penalty="inf", mean=_fmt(est.mean),
                         stderr=_fmt(est.stderr), n_paths=est.n_paths,
                         wall_time=f"{time.perf_counter() - t0:.3f}"))
    if "dual" in cfg.schemes:
        for spec in cfg.tilts:
            t0 = time.perf_counter()
            if spec["kind"] == "bang_bang" and float(spec["n"]) not in surfaces:
                n = float(spec["n"])
                surfaces[n] = penalized_backward_sweep(bundle, model, regimes, cfg.basis, n,
                                                       **kw)[0]
            tilt = _build_tilt(spec, regimes, surfaces, base_dir)
            est = dual_value_estimate(bundle, model, regimes, tilt, cfg.workers)
            rows.append(dict(scheme=f"dual:{tilt.label}", penalty=_fmt(tilt.bound - 1.0),
                             mean=_fmt(est.mean), stderr=_fmt(est.stderr),
                             n_paths=est.n_paths,
                             wall_time=f"{time.perf_counter() - t0:.3f}"))
    if "fd" in cfg.schemes:
        if model.dim_x != 1:
            raise ConfigError("schemes: fd needs a one-dimensional problem")
        t0 = time.perf_counter()
        fd = cfg.fd
        try:
            fgrid = make_fd_grid(model, regimes, float(fd.get("x_min", x0[0] - 4.0)),
                                 float(fd.get("x_max", x0[0] + 4.0)), int(fd.get("nx", 400)),
                                 fd.get("boundary", "linear_extrapolation"), fd.get("nt"))
        except (CFLError, ValueError) as exc:
            raise ConfigError(f"fd: {exc}") from None
        sol = fd_solve_hjb(model, regimes, fgrid)
        export_fd_csv(sol, out_dir / "fd.csv")
        rows.append(dict(scheme="fd", penalty="inf", mean=_fmt(fd_value_at(sol, 0.0, x0[0])),
                         stderr=_fmt(0.0), n_paths=0,
                         wall_time=f"{time.perf_counter() - t0:.3f}"))

    if cfg.surface is not None:
        key = PROJECTION if cfg.surface == PROJECTION else float(cfg.surface)
        if key not in surfaces:
            raise ConfigError(f"surface: no sweep was run for {cfg.surface!r}")
        export_surface_csv(surfaces[key], out_dir / "surface.csv")

    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        wr.writeheader()
        wr.writerows(rows)
    with open(out_dir / "constraint.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(CONSTRAINT_COLUMNS)
        wr.writerows(constraint_rows)
    return rows


# ---------------------------------------------------------------- compare

def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SUMMARY_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(SUMMARY_COLUMNS)}")
        rows = []
        for line, r in enumerate(reader, start=2):
            try:
                r["mean"], r["stderr"] = float(r["mean"]), float(r["stderr"])
                r["penalty"] = float(r["penalty"]) if r["penalty"] else math.nan
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{line}: non-numeric field") from None
            rows.append(r)
    return rows


def compare_flags(rows: list[dict]) -> list[str]:
    """Monotonicity-in-n and dual-domination failures within one summary."""
    flags = []
    primal = sorted((r for r in rows if r["scheme"] in ("penalized", "projection")),
                    key=lambda r: r["penalty"])
    for a, r1 in enumerate(primal):
        for r2 in primal[a + 1:]:
            if r1["penalty"] < r2["penalty"] and \
                    r2["mean"] < r1["mean"] - 3.0 * (r1["stderr"] + r2["stderr"]):
                flags.append(f"monotonicity: n={r2['penalty']:g} below n={r1['penalty']:g}")
    proj = [r for r in rows if r["scheme"] == "projection"]
    for r in rows:
        if r["scheme"].startswith("dual") and proj:
            p = proj[0]
            if r["mean"] > p["mean"] + 3.0 * (r["stderr"] + p["stderr"]):
                flags.append(f"domination: {r['scheme']} exceeds projection")
    return flags


def compare_report(paths, stream=None) -> int:
    stream = stream or sys.stdout
    failed = False
    stream.write(f"{'file':<28}{'scheme':<26}{'penalty':>9}{'mean':>12}{'stderr':>11}\n")
    for p in paths:
        rows = read_summary(p)
        for r in rows:
            stream.write(f"{str(p)[-27:]:<28}{r['scheme']:<26}{r['penalty']:>9g}"
                         f"{r['mean']:>12.6f}{r['stderr']:>11.6f}\n")
        for f in compare_flags(rows):
            failed = True
            stream.write(f"FLAG {p}: {f}\n")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="minbsde", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", type=Path)
    run.add_argument("--out", type=Path, default=None)
    run.add_argument("--dump-paths", action="store_true", help="also write paths.csv")
    run.add_argument("--workers", type=int, default=None)
    cmp_ = sub.add_parser("compare", help="merge summaries and check flags")
    cmp_.add_argument("files", nargs="+", type=Path)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "compare":
        try:
            return compare_report(args.files)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2

    try:
        doc = json.loads(args.config.read_text(encoding="utf-8"))
        cfg = parse_config(doc)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers: must be >= 1")
            cfg.workers = args.workers
        out = args.out or Path(cfg.out or Path("runs") / args.config.stem)
        rows = run_experiment(cfg, Path(out), args.dump_paths, args.config.parent)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationAborted, NumericError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    for r in rows:
        print(f"{r['scheme']:<26} n={r['penalty']:<8} mean={float(r['mean']):.6f} "
              f"se={float(r['stderr']):.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
