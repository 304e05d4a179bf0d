"""Batch experiment driver.

    heisenberg-obs <command> --config <file> [--threads N] [--out DIR]

The config is a YAML mapping validated against the command's schema.  Each
run writes its CSV/JSON artifacts plus ``manifest.json`` atomically into the
output directory and echoes the manifest on stdout.  Exit codes: 0 success,
2 schema or parameter error, 3 numeric failure, 4 resource limit.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy
import yaml
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from . import __version__
from .config import SCHEMAS, config_hash, estimate, parse_config
from .errors import NumericError, ParameterError

EXIT_OK, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_RESOURCE = 0, 2, 3, 4


class Artifacts:
    """Named outputs of one run: CSV tables and JSON summaries."""

    def __init__(self):
        self.tables: dict[str, str] = {}
        self.summaries: dict[str, dict] = {}

    def table(self, name: str, text: str) -> None:
        self.tables[name] = text

    def summary(self, name: str, data: dict) -> None:
        self.summaries[name] = data


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------- handlers

def _eig(cfg, threads, out):
    from .mode_operator import Grid1D, ModeParams, lowest_eigenvalues

    lam = lowest_eigenvalues(ModeParams(cfg.n, cfg.p), Grid1D(cfg.m), cfg.count)
    out.table("eig", _rows_csv(["n", "p", "m", "k", "lambda"],
                               [(cfg.n, cfg.p, cfg.m, k, float(v)) for k, v in enumerate(lam)]))
    out.summary("eig", {"n": cfg.n, "p": cfg.p, "m": cfg.m, "lambda": float(lam[0]),
                        "eigenvalues": [float(v) for v in lam]})


def _dissipation(cfg, threads, out):
    from .mode_operator import Grid1D, verify_dissipation_bounds

    rep = verify_dissipation_bounds(cfg.n_max, cfg.p_max, Grid1D(cfg.m), cfg.tolerance)
    out.table("dissipation", rep.to_csv())
    out.summary("dissipation", {"ok": rep.ok, "modes": len(rep.rows),
                                "violations": [(r.n, r.p) for r in rep.violations]})


def _evolve(cfg, threads, out):
    from .evolution import SourceSpec, evolve_mode
    from .mode_operator import Grid1D, ModeParams

    grid = Grid1D(cfg.m)
    x = grid.interior
    g0 = np.sin(cfg.initial_sine * np.pi * (x + 1) / 2) if cfg.initial_sine else np.zeros(x.size)
    src = None
    if cfg.source_amplitude:
        src = SourceSpec.separable(lambda t, x: np.ones_like(x),
                                   cfg.source_amplitude * np.cos(np.pi * x / 2))
    traj = evolve_mode(ModeParams(cfg.n, cfg.p), g0, src, cfg.T, cfg.output_times, grid)
    out.table("evolve", traj.to_csv())
    out.summary("evolve", traj.summary())


def _region(cfg):
    from .observability import ObservationRegion

    arcs = getattr(cfg, "y_arcs", None)
    return ObservationRegion(cfg.a, cfg.b, None if arcs is None else tuple(map(tuple, arcs)))


def _obs_constant(cfg, threads, out):
    from .mode_operator import Grid1D
    from .observability import obs_constant_truncated

    res = obs_constant_truncated(_region(cfg), cfg.T, cfg.N, cfg.P, Grid1D(cfg.m), cfg.K_x,
                                 z_length=cfg.z_length)
    out.summary("obs_constant", res.to_json())


def _spectral_ineq(cfg, threads, out):
    from .observability import ObservationRegion, spectral_inequality_constant

    arcs = ObservationRegion(y_arcs=None if cfg.y_arcs is None else tuple(map(tuple, cfg.y_arcs))).y_arcs
    if cfg.N_max < cfg.N_min:
        raise ParameterError("need N_min <= N_max")
    res = [spectral_inequality_constant(arcs, N) for N in range(cfg.N_min, cfg.N_max + 1)]
    Ns = np.array([r.N for r in res], dtype=float)
    y = np.array([-math.log(r.sigma_min) for r in res])
    fit = {}
    if len(res) >= 2:
        slope, icpt = np.polyfit(Ns, y, 1)
        ss = float(np.sum((y - y.mean()) ** 2))
        resid = float(np.sum((y - (slope * Ns + icpt)) ** 2))
        fit = {"slope": float(slope), "intercept": float(icpt),
               "r2": 1.0 - resid / ss if ss > 0 else 1.0}
    out.table("spectral_ineq", _rows_csv(
        ["N", "sigma_min", "implied_constant", "log_inv_sigma", "refined"],
        [(r.N, r.sigma_min, r.implied_constant, float(v), r.refined) for r, v in zip(res, y)]))
    out.summary("spectral_ineq", {"arcs": [list(a) for a in arcs], "fit": fit})


def _envelope_fit(cfg, threads, out):
    from .mode_operator import Grid1D
    from .observability import fit_observability_envelope

    sweep = [(n, p) for n in cfg.n_values for p in cfg.p_values]
    fit = fit_observability_envelope(cfg.a, cfg.b, cfg.T, sweep, Grid1D(cfg.m), cfg.K_x)
    out.table("envelope_fit", fit.to_csv())
    out.summary("envelope_fit", fit.summary())


def _lr_schedule(cfg, threads, out):
    from .lr_machinery import build_schedule

    s = build_schedule(cfg.T, cfg.p, cfg.rho)
    j_max = max(cfg.j_max, s.j0)
    out.table("lr_schedule", s.to_csv(j_max))
    out.summary("lr_schedule", {"T": cfg.T, "p": cfg.p, "rho": cfg.rho, "j0": s.j0, "K": s.K,
                                "bracket": s.bracket()})


def _lr_recursion(cfg, threads, out):
    from .lr_machinery import k_star, recursion_grid_check, run_constant_recursion

    if cfg.grid:
        rows = recursion_grid_check(j_max=cfg.j_max)
        cols = ["C8", "C9", "Kstar", "T", "p", "rho", "bounded", "log_sup_Btilde_over_T",
                "log_sup_A_over_T2"]
        table = [[r["inputs"][c] for c in cols[:6]] + [r[c] for c in cols[6:]] for r in rows]
        out.table("lr_recursion_grid", _rows_csv(cols, table))
        out.summary("lr_recursion", {"points": len(rows), "all_bounded": all(r["bounded"] for r in rows)})
        return
    Kstar = k_star(cfg.rho) if cfg.Kstar is None else cfg.Kstar
    st = run_constant_recursion(cfg.C8, cfg.C9, Kstar, cfg.T, cfg.p, cfg.rho, cfg.j_max)
    out.table("lr_recursion", st.to_csv())
    out.summary("lr_recursion", {**st.summary(), "bounded": st.bounded})


def _quasimode(cfg, threads, out):
    from .mode_operator import Grid1D
    from .quasimode import (CutoffPair, build_quasimode, cex_mode, cex_quotient, error_bound_sweep,
                            quasimode_error, quasimode_grid)

    n, p = cex_mode(cfg.a, cfg.k)
    grid = Grid1D(cfg.m) if cfg.m else quasimode_grid(p)
    r = cex_quotient(cfg.a, cfg.T, cfg.k, grid)
    qm = build_quasimode(n, p, CutoffPair.for_region(cfg.a), cfg.T, grid)
    summary = {"a": cfg.a, "k": cfg.k, "n": n, "p": p, "T": cfg.T, "m": grid.m,
               "log_obs_energy": r.log_obs_energy, "log_final_energy": r.log_final_energy,
               "log_ratio": r.log_ratio, "quasimode_error_T": quasimode_error(qm, cfg.T)}
    if cfg.error_k_list:
        rep = error_bound_sweep(cfg.a, cfg.error_k_list, cfg.T)
        summary["error_bound"] = {**rep.summary(), "ok": rep.ok}
        out.table("quasimode_error", _rows_csv(list(rep.rows[0]), [list(row.values()) for row in rep.rows]))
    out.summary("quasimode", summary)


def _scan_common(cfg, threads, out, name, scan_fn, **kw):
    threshold = (1 + cfg.a) ** 2 / 8
    T_list = cfg.T_list if cfg.T_list else [threshold * f for f in cfg.T_factors]
    scan = scan_fn(cfg.a, cfg.k_list, T_list, log_term=cfg.log_term, workers=threads, **kw)
    out.table(name, scan.to_csv())
    out.summary(name, {**scan.summary(), "theoretical_threshold": threshold})


def _tmin_scan(cfg, threads, out):
    from .quasimode import tmin_scan

    _scan_common(cfg, threads, out, "tmin_scan", tmin_scan)


def _unbounded_scan(cfg, threads, out):
    from .quasimode import unbounded_scan

    _scan_common(cfg, threads, out, "unbounded_scan", unbounded_scan, nodes=cfg.nodes)


def _carleman(cfg, threads, out):
    from .carleman import build_corpus, build_weight, carleman_check

    corpus = build_corpus(cfg.corpus_size, m=cfg.m, nodes=cfg.nodes, seed=cfg.seed)
    w = build_weight(cfg.a, cfg.b)
    rep = carleman_check(corpus, cfg.a, cfg.b, w, cfg.C2, cfg.fit_mode, seed=cfg.split_seed)
    out.table("carleman_weight", w.to_csv())
    out.summary("carleman", {**rep.to_json(), "ok": rep.ok, "corpus_seed": cfg.seed})


def _stability_mode(cfg, threads, out):
    from .fourier_stack import ModeField
    from .mode_operator import Grid1D, ModeParams, eigensystem
    from .stability import SourceModel, mode_stability_terms, uniform_stability_sweep

    grid = Grid1D(cfg.m)
    region = (cfg.a, cfg.b)
    if cfg.sweep_n_max is not None:
        sweep = [(n, float(p)) for n in range(-cfg.sweep_n_max, cfg.sweep_n_max + 1)
                 for p in range(-cfg.sweep_p_max, cfg.sweep_p_max + 1)]
        rep = uniform_stability_sweep(region, cfg.T0, cfg.T1, sweep, grid, K_x=cfg.K_x,
                                      workers=threads)
        out.table("stability_sweep", rep.to_csv())
        out.summary("stability_sweep", rep.summary())
        return
    params = ModeParams(cfg.n, cfg.p)
    if cfg.h_mode >= grid.size:
        raise ParameterError(f"h_mode must be below {grid.size}")
    v = eigensystem(params, grid).eigenvectors[:, cfg.h_mode]
    model = SourceModel.constant_one(ModeField(grid, v), cfg.R)
    t = mode_stability_terms(params, model, region, cfg.T0, cfg.T1)
    out.summary("stability_mode", {"n": cfg.n, "p": cfg.p, "h_mode": cfg.h_mode, "ratio": t.ratio,
                                   "numerator": t.numerator, "observation": t.observation,
                                   "final": t.final, "violation_candidate": t.violation_candidate})


def _stability_3d(cfg, threads, out):
    from .mode_operator import Grid1D
    from .stability import SourceModel, random_stack, stability_3d

    h = random_stack(Grid1D(cfg.m), cfg.N, cfg.P, cfg.seed, cfg.modes)
    rep = stability_3d(_region(cfg), SourceModel.constant_one(h, cfg.R), cfg.T0, cfg.T1,
                       T_star=cfg.T_star, C10=cfg.C10, workers=threads, seeds={"h": cfg.seed})
    out.table("stability_3d_modes", rep.to_csv())
    out.summary("stability_3d", rep.to_json())


HANDLERS = {
    "eig": _eig,
    "dissipation": _dissipation,
    "evolve": _evolve,
    "obs-constant": _obs_constant,
    "spectral-ineq": _spectral_ineq,
    "envelope-fit": _envelope_fit,
    "lr-schedule": _lr_schedule,
    "lr-recursion": _lr_recursion,
    "quasimode": _quasimode,
    "tmin-scan": _tmin_scan,
    "unbounded-scan": _unbounded_scan,
    "carleman": _carleman,
    "stability-mode": _stability_mode,
    "stability-3d": _stability_3d,
}
assert set(HANDLERS) == set(SCHEMAS)


# ---------------------------------------------------------------- plumbing

def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_text(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    return str(o)


def versions() -> dict:
    return {"heisenberg_obs": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _validation_errors(exc: ValidationError) -> list[dict]:
    return [{"field": ".".join(str(p) for p in e["loc"]) or "<root>", "message": e["msg"]}
            for e in exc.errors()]


def _load_yaml(path: str):
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping of keys to values")
    return data


def _err(msg: str, **extra) -> None:
    print(json.dumps({"error": msg, **extra}, sort_keys=True, default=_json_default), file=sys.stderr)


def validate(data: dict) -> dict:
    """Dry run: schema check plus resource estimate.  Never raises."""
    command = data.get("command")
    if command is None:
        return {"ok": False, "errors": [{"field": "command", "message": "Field required"}]}
    if command not in SCHEMAS:
        return {"ok": False, "errors": [{"field": "command",
                                         "message": f"unknown command {command!r}"}]}
    try:
        cfg = parse_config(command, data)
    except ValidationError as exc:
        return {"ok": False, "command": command, "errors": _validation_errors(exc)}
    est = estimate(cfg)
    return {"ok": True, "command": command, "config_hash": config_hash(cfg), "estimate": est,
            "warnings": est["warnings"]}


def run(command: str, data: dict, out_dir: Path, threads: int = 1) -> tuple[int, dict]:
    """Validate, execute and write artifacts.  Returns ``(exit_code, manifest_or_error)``."""
    try:
        cfg = parse_config(command, data)
    except ValidationError as exc:
        return EXIT_SCHEMA, {"error": "schema violation", "errors": _validation_errors(exc)}
    except ValueError as exc:
        return EXIT_SCHEMA, {"error": str(exc)}
    est = estimate(cfg)
    if est["exceeds_memory"]:
        return EXIT_RESOURCE, {"error": "resource limit", "estimate": est}

    out = Artifacts()
    try:
        with threadpool_limits(limits=threads):
            HANDLERS[command](cfg, threads, out)
    except ParameterError as exc:
        return EXIT_SCHEMA, {"error": f"{type(exc).__name__}: {exc}"}
    except NumericError as exc:
        return EXIT_NUMERIC, {"error": f"{type(exc).__name__}: {exc}", "diagnostics": exc.diagnostics}
    except MemoryError:
        return EXIT_RESOURCE, {"error": "out of memory", "estimate": est}

    h = config_hash(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in sorted(out.tables.items()):
        path = out_dir / f"{name}.csv"
        _atomic_write(path, f"# config_hash={h}\n" + text)
        written.append(path.name)
    for name, data_ in sorted(out.summaries.items()):
        path = out_dir / f"{name}.json"
        _atomic_write(path, _json_text({"config_hash": h, "command": command, **data_}))
        written.append(path.name)
    manifest = {"command": command, "config_hash": h, "config": cfg.model_dump(mode="json"),
                "versions": versions(), "seeds": {"seed": cfg.seed}, "threads": threads,
                "outputs": written, "warnings": est["warnings"]}
    _atomic_write(out_dir / "manifest.json", _json_text(manifest))
    return EXIT_OK, manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heisenberg-obs", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=sorted(SCHEMAS) + ["validate"])
    ap.add_argument("--config", required=True, help="YAML experiment config")
    ap.add_argument("--threads", type=int, default=1, help="cap for BLAS and worker threads")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _err("--threads must be at least 1")
        return EXIT_SCHEMA
    try:
        data = _load_yaml(args.config)
    except (OSError, yaml.YAMLError, ValueError) as exc:
        _err(f"cannot read config: {exc}")
        return EXIT_SCHEMA
    if args.command == "validate":
        print(_json_text(validate(data)), end="")
        return EXIT_OK
    code, payload = run(args.command, data, Path(args.out), args.threads)
    if code == EXIT_OK:
        for w in payload["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
        print(_json_text(payload), end="")
    else:
        _err(payload.pop("error", "failed"), **payload)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
