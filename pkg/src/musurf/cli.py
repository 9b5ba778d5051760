"""Batch driver: ``musurf run <config.json> [--out DIR] [--stages s1,s2,...]``.

The config is a single JSON object::

    {
      "density":  {"kind": "minimal" | "mu" | "mu_hat", "mu": 3.0,
                   "unit_slope": false, "normalize": false},
      "grid":     {"x0": -1.2, "y0": -1.2, "x1": 1.2, "y1": 1.2, "nx": 33, "ny": 33},
      "boundary": {"name": "scherk", "params": {}},
      "solve":    {"tol_gradient": 1e-11, "max_iters": 100},
      "stages":   ["solve", "forms", "potential", "reparam", "identities", "decay"],
      "outputs":  "out"
    }

``grid`` may also be a list of grids (a refinement series); ``"n"`` is
shorthand for ``nx = ny = n``.  Exit codes: 0 success, 1 I/O or config
error, 2 density validation failure, 3 solver non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import densities, forms, potential, reparam, solver
from .fields import GridSpec, interpolate

log = logging.getLogger("musurf")

STAGES = ("solve", "forms", "potential", "reparam", "identities", "decay")
REQUIRES = {"forms": ("solve",), "potential": ("forms",), "reparam": ("potential",)}
GRID_STAGES = ("solve", "forms", "potential", "reparam")

EXIT_OK, EXIT_IO, EXIT_DENSITY, EXIT_SOLVER = 0, 1, 2, 3
DEFAULT_IDENTITY_SAMPLES = (0.5, 1.0, 2.0, 5.0, 10.0)


class ConfigError(ValueError):
    pass


# -- config -------------------------------------------------------------------

def close_stages(requested) -> list[str]:
    """Requested stages plus everything they depend on, in pipeline order."""
    want = set()
    stack = list(requested)
    while stack:
        s = stack.pop()
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}; expected a subset of {STAGES}")
        if s not in want:
            want.add(s)
            stack.extend(REQUIRES.get(s, ()))
    return [s for s in STAGES if s in want]


def _grid_from(obj: dict, base: dict) -> GridSpec:
    merged = {**base, **obj}
    if "n" in merged:
        merged.setdefault("nx", merged["n"])
        merged.setdefault("ny", merged["n"])
    try:
        return GridSpec(float(merged["x0"]), float(merged["y0"]), float(merged["x1"]),
                        float(merged["y1"]), int(merged["nx"]), int(merged["ny"]))
    except KeyError as exc:
        raise ConfigError(f"grid is missing field {exc.args[0]!r}") from None


@dataclass
class RunConfig:
    density: dict
    grids: list
    boundary: dict
    solve: solver.SolveConfig
    outputs: str
    stages: list
    anchor: tuple | None = None
    convention: str = "param"
    decay: dict = field(default_factory=dict)
    identity_samples: tuple = DEFAULT_IDENTITY_SAMPLES
    seed: int = 0
    probes: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, out: str | None = None, stages=None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a single JSON object")
        if "density" not in raw:
            raise ConfigError("config needs a 'density' entry")
        stage_list = stages if stages is not None else raw.get("stages", list(STAGES))
        stage_list = close_stages(stage_list)
        grids = []
        if any(s in GRID_STAGES for s in stage_list):
            g = raw.get("grid")
            if g is None:
                raise ConfigError("grid stages need a 'grid' entry")
            if isinstance(g, list):
                if not g:
                    raise ConfigError("grid list is empty")
                base = {k: v for k, v in g[0].items()}
                grids = [_grid_from(item, base) for item in g]
            else:
                grids = [_grid_from(g, {})]
            if "boundary" not in raw:
                raise ConfigError("grid stages need a 'boundary' entry")
        sc = raw.get("solve", {})
        known = set(solver.SolveConfig.__dataclass_fields__)
        extra = set(sc) - known
        if extra:
            raise ConfigError(f"unknown solve settings {sorted(extra)}")
        anchor = raw.get("anchor")
        return cls(
            density=dict(raw["density"]),
            grids=grids,
            boundary=dict(raw.get("boundary", {})),
            solve=solver.SolveConfig(**sc),
            outputs=out if out is not None else raw.get("outputs", "musurf_out"),
            stages=stage_list,
            anchor=tuple(anchor) if anchor is not None else None,
            convention=raw.get("convention", "param"),
            decay=dict(raw.get("decay", {})),
            identity_samples=tuple(raw.get("identity_samples", DEFAULT_IDENTITY_SAMPLES)),
            seed=int(raw.get("seed", 0)),
            probes=dict(raw.get("probes", {})),
        )


# -- output helpers -----------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_rows(path: Path, header, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*(np.ravel(c) for c in columns)):
            w.writerow([f"{float(v):.17g}" for v in row])


def export_csv(outdir: Path, stage: str, data: dict) -> list[str]:
    """Write the CSV files of one stage; returns the file names."""
    if stage == "solve":
        sol = data["solution"]
        X, Y = sol.spec.mesh()
        _write_rows(outdir / "solution.csv", ["x", "y", "u"], [X, Y, sol.u.values])
        return ["solution.csv"]
    if stage == "forms":
        rep = data["closedness"]
        X, Y = rep.d_alpha.spec.mesh()
        _write_rows(outdir / "closedness.csv", ["x", "y", "d_alpha", "d_beta", "d_gamma"],
                    [X, Y, rep.d_alpha.values, rep.d_beta.values, rep.d_gamma.values])
        return ["closedness.csv"]
    if stage == "potential":
        data["potential"].to_csv(outdir / "potential.csv")
        return ["potential.csv"]
    if stage == "reparam":
        rr = data["reparam"]
        X, Y = rr.spec.mesh()
        _write_rows(outdir / "reparam.csv",
                    ["x", "y", "lambda1", "lambda2", "det_dl", "margin_det_lower_bound",
                     "margin_det_linear_bound", "defect_dot", "defect_diff"],
                    [X, Y, rr.lambda1.values, rr.lambda2.values, rr.detDL.values,
                     rr.lower_bound_margin.values, rr.linear_bound_margin.values, rr.defect_dot.values,
                     rr.defect_diff.values])
        chi = np.array(rr.chi_samples, dtype=float).reshape(-1, 5)
        _write_rows(outdir / "chi.csv", ["xhat", "yhat", "chi1", "chi2", "chi3"], chi.T)
        return ["reparam.csv", "chi.csv"]
    if stage == "decay":
        fit = data["decay"]
        _write_rows(outdir / "decay.csv", ["t", "theta", "fit_envelope"],
                    [fit.t, fit.theta, fit.envelope])
        return ["decay.csv"]
    if stage == "identities":
        ts = np.concatenate([[0.0], np.logspace(-3, 4, 71)])
        densities.write_diagnostics_csv(data["density"], ts, outdir / "density.csv")
        return ["density.csv"]
    raise KeyError(f"stage {stage!r} has no CSV export")


def _orders(values) -> list:
    out = []
    for a, b in zip(values, values[1:]):
        out.append(math.log2(a / b) if a > 0 and b > 0 else float("nan"))
    return out


# -- pipeline -----------------------------------------------------------------

def _build_density(cfg: dict):
    d = densities.density_from_config(cfg)
    report = densities.validate(d)
    if report.passed and cfg.get("normalize", False):
        d = densities.normalize(d)
    return d, report


def _run_grid(cfg: RunConfig, d, spec: GridSpec, outdir: Path, timings: dict) -> tuple[dict, bool]:
    rec: dict = {"grid": {"x0": spec.x0, "y0": spec.y0, "x1": spec.x1, "y1": spec.y1,
                          "nx": spec.nx, "ny": spec.ny, "h": spec.h}}
    data = {}
    bname = cfg.boundary.get("name")
    bparams = cfg.boundary.get("params", {})
    bfun = solver.boundary_function(bname, bparams)

    t0 = time.perf_counter()
    sol = solver.solve_dirichlet(d, spec, bfun, cfg.solve)
    timings["solve"] = time.perf_counter() - t0
    hist = np.asarray(sol.energy_history)
    srep = {
        "converged": bool(sol.converged), "iterations": sol.iterations,
        "newton_steps": sol.newton_steps, "gradient_steps": sol.gradient_steps,
        "energy": sol.energy, "grad_norm": sol.grad_norm, "residual_norm": sol.residual_norm,
        "energy_monotone": bool(np.all(np.diff(hist) <= 0.0)),
    }
    if bname in ("scherk", "affine"):
        if bname == "scherk":
            exact = solver.oracle_solution("scherk", spec)
        else:
            p = bparams
            exact = solver.oracle_solution(("affine", p.get("a", 0.0), p.get("b", 0.0),
                                            p.get("c", 0.0)), spec)
        srep["oracle_error_max"] = float(np.max(np.abs(sol.u.values - exact.values)))
    rec["solve"] = srep
    data["solution"] = sol
    rec["files"] = export_csv(outdir, "solve", data)
    if not sol.converged:
        rec["status"] = "not_converged"
        return rec, False

    if "forms" in cfg.stages:
        t0 = time.perf_counter()
        fa = forms.assemble_forms(sol)
        clo = forms.closedness_residuals(fa)
        timings["forms"] = time.perf_counter() - t0
        rec["forms"] = {"closedness": clo.to_json(),
                        "phi_identity_error": fa.meta["phi_identity_error"]}
        data["forms"], data["closedness"] = fa, clo
        rec["files"] += export_csv(outdir, "forms", data)

    if "potential" in cfg.stages:
        t0 = time.perf_counter()
        ps = potential.recover_xstar(sol, data["forms"], cfg.anchor, cfg.convention)
        hrep = potential.check_hessE(ps, sol)
        timings["potential"] = time.perf_counter() - t0
        rec["potential"] = {"anchor": list(ps.anchor), "convention": ps.convention,
                            "path_discrepancy": ps.meta["path_discrepancy"],
                            "grad_E_mismatch": ps.meta["grad_E_mismatch"],
                            "hess": hrep.to_json(), "hess_min_margin": hrep.min_margin}
        data["potential"] = ps
        rec["files"] += export_csv(outdir, "potential", data)

    if "reparam" in cfg.stages:
        t0 = time.perf_counter()
        ps = data["potential"]
        if ps.convention != "param":
            # the map is defined from the param-convention pair in any case
            ps = potential.recover_xstar(sol, data["forms"], cfg.anchor, "param")
        dec = cfg.decay
        rr = reparam.build_reparam(sol, ps, (dec.get("t_min", 1e2), dec.get("t_max", 1e4)),
                                   int(dec.get("n_samples", 200)))
        pr = cfg.probes
        seed = cfg.seed
        exp = reparam.expansivity_probe(rr, int(pr.get("n_pairs", 1000)), seed)
        rt = reparam.roundtrip_probe(rr, ps, int(pr.get("n_roundtrips", 200)), seed)
        cx, cy = 0.5 * (spec.x0 + spec.x1), 0.5 * (spec.y0 + spec.y1)
        ball = reparam.ball_inclusion_probe(rr, ps, (cx, cy), int(pr.get("n_ball", 64)), seed)
        rng = np.random.default_rng(seed)
        chi_mismatch = 0.0
        for _ in range(int(pr.get("n_chi", 5))):
            p = (rng.uniform(spec.x0 + 0.25 * (spec.x1 - spec.x0), spec.x1 - 0.25 * (spec.x1 - spec.x0)),
                 rng.uniform(spec.y0 + 0.25 * (spec.y1 - spec.y0), spec.y1 - 0.25 * (spec.y1 - spec.y0)))
            tgt = (float(interpolate(rr.lambda1, *p)), float(interpolate(rr.lambda2, *p)))
            cs = reparam.chi_and_jacobian(rr, ps, sol, tgt)
            rr.chi_samples.append((tgt[0], tgt[1], *cs.chi))
            chi_mismatch = max(chi_mismatch, cs.fd_mismatch)
        timings["reparam"] = time.perf_counter() - t0
        inner = (slice(1, -1), slice(1, -1))
        rec["reparam"] = {
            "det_fd_mismatch": rr.meta["det_fd_mismatch"],
            "det_min": float(np.min(rr.detDL.values)),
            "c_constant": rr.c_constant,
            "bound_violations": rr.bound_violations(),
            "defect_dot_max": float(np.max(np.abs(rr.defect_dot.values[inner]))),
            "defect_diff_max": float(np.max(np.abs(rr.defect_diff.values[inner]))),
            "inverse_jacobian_error": reparam.inverse_jacobian_error(d, sol.ux.values, sol.uy.values),
            "expansivity": exp, "roundtrip": rt, "ball_inclusion": ball,
            "chi_fd_mismatch_max": chi_mismatch,
            "image_bounds": list(rr.image_bounds),
        }
        data["reparam"] = rr
        rec["files"] += export_csv(outdir, "reparam", data)
    rec["status"] = "ok"
    return rec, True


def run_pipeline(cfg: RunConfig, create: bool = True) -> tuple[dict, dict, int]:
    """Run the configured stages; returns ``(report, timings, exit_code)``."""
    outdir = Path(cfg.outputs)
    if not outdir.is_dir():
        if not create:
            raise OSError(f"output directory {outdir} does not exist")
        outdir.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    report: dict = {"stages": list(cfg.stages), "status": {}}

    d, vrep = _build_density(cfg.density)
    report["density"] = {"kind": d.kind, "params": dict(d.params),
                         "normalization_shift": d.normalization_shift,
                         "validation": vrep.to_dict()}
    if not vrep.passed:
        for s in cfg.stages:
            report["status"][s] = "skipped"
        report["status"]["density"] = "invalid"
        return report, timings, EXIT_DENSITY
    report["status"]["density"] = "ok"

    code = EXIT_OK
    grid_stages = [s for s in cfg.stages if s in GRID_STAGES]
    if grid_stages:
        runs = []
        multi = len(cfg.grids) > 1
        all_ok = True
        for spec in cfg.grids:
            sub = outdir / f"grid_{spec.nx}x{spec.ny}" if multi else outdir
            sub.mkdir(exist_ok=True)
            t_grid: dict = {}
            log.info("grid %dx%d", spec.nx, spec.ny)
            rec, ok = _run_grid(cfg, d, spec, sub, t_grid)
            if multi:
                rec["directory"] = sub.name
            runs.append(rec)
            timings[f"grid_{spec.nx}x{spec.ny}"] = t_grid
            all_ok &= ok
        report["grids"] = runs
        for s in grid_stages:
            report["status"][s] = "ok" if all_ok else ("not_converged" if s == "solve" else "skipped")
        if not all_ok:
            code = EXIT_SOLVER
        if multi and all_ok:
            report["refinement"] = _refinement_orders(runs)

    if "identities" in cfg.stages:
        t0 = time.perf_counter()
        irep = forms.density_identities(d, cfg.identity_samples)
        tt = np.logspace(-3, 4, 400)
        report["identities"] = {**irep.to_dict(),
                                "theta_tilde_error": reparam.theta_tilde_error(d, tt)}
        export_csv(outdir, "identities", {"density": d})
        timings["identities"] = time.perf_counter() - t0
        report["status"]["identities"] = "ok"

    if "decay" in cfg.stages:
        t0 = time.perf_counter()
        dec = cfg.decay
        fit = reparam.decay_fit(d, (dec.get("t_min", 1e2), dec.get("t_max", 1e4)),
                                int(dec.get("n_samples", 200)))
        report["decay"] = {"d1": fit.d1, "d2": fit.d2, "slope": fit.slope,
                           "identically_zero": fit.identically_zero,
                           "t_min": float(fit.t[0]), "t_max": float(fit.t[-1])}
        export_csv(outdir, "decay", {"decay": fit})
        timings["decay"] = time.perf_counter() - t0
        report["status"]["decay"] = "ok"
    return report, timings, code


def _refinement_orders(runs: list) -> dict:
    out = {"h": [r["grid"]["h"] for r in runs]}
    if all("forms" in r for r in runs):
        for key in ("max_d_alpha", "max_d_beta", "max_d_gamma"):
            out[f"order_{key}"] = _orders([r["forms"]["closedness"][key] for r in runs])
    if all("oracle_error_max" in r["solve"] for r in runs):
        out["order_oracle_error"] = _orders([r["solve"]["oracle_error_max"] for r in runs])
    if all("potential" in r for r in runs):
        out["order_path_discrepancy_E"] = _orders([r["potential"]["path_discrepancy"]["E"] for r in runs])
    return out


def write_report(outdir: Path, report: dict, timings: dict, code: int) -> Path:
    doc = dict(report)
    doc["exit_code"] = code
    doc["timings"] = timings
    path = outdir / "report.json"
    with open(path, "w") as fh:
        json.dump(_clean(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return path


# -- entry point --------------------------------------------------------------

def _thread_limit():
    raw = os.environ.get("MUSURF_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    n = int(raw)
    if n < 1:
        raise ValueError("MUSURF_THREADS must be a positive integer")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="musurf", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the pipeline on a JSON config")
    run.add_argument("config", help="path to the JSON config")
    run.add_argument("--out", help="output directory (overrides 'outputs' in the config)")
    run.add_argument("--stages", help="comma separated stages; dependencies are added")
    run.add_argument("--no-create", action="store_true",
                     help="fail instead of creating a missing output directory")
    run.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        stages = [s.strip() for s in args.stages.split(",") if s.strip()] if args.stages else None
        cfg = RunConfig.from_dict(raw, out=args.out, stages=stages)
        limit = _thread_limit()
    except (OSError, ValueError, TypeError) as exc:
        print(f"musurf: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        with limit:
            report, timings, code = run_pipeline(cfg, create=not args.no_create)
    except (OSError, ConfigError) as exc:
        print(f"musurf: {exc}", file=sys.stderr)
        return EXIT_IO
    except densities.DensityValidationError as exc:
        print(f"musurf: density rejected: {exc}", file=sys.stderr)
        return EXIT_DENSITY
    except (ValueError, KeyError) as exc:
        # raised from config contents (bad boundary name, anchor, domain ...)
        print(f"musurf: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        path = write_report(Path(cfg.outputs), report, timings, code)
    except OSError as exc:
        print(f"musurf: {exc}", file=sys.stderr)
        return EXIT_IO
    if code == EXIT_DENSITY:
        fails = report["density"]["validation"]["failures"]
        print(f"musurf: density failed validation: {', '.join(fails)}", file=sys.stderr)
    elif code == EXIT_SOLVER:
        print("musurf: solver did not converge; partial outputs kept", file=sys.stderr)
    log.info("wrote %s", path)
    return code


if __name__ == "__main__":
    sys.exit(main())
