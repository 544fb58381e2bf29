"""Batch front end: run / diagnose / ladder / fixtures regenerate.

Exit codes: 0 ok, 2 config error, 3 data error, 4 solver failure,
5 diagnostic FAIL -- so CI can gate on the verification suite.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    PreparedRun,
    load_config,
    prepare_run,
    resolve_outdir,
    write_manifest,
)
from .coupling import (
    TrajectoryState,
    regularization_ladder,
    solve_fixed_point,
    trajectory_distance,
)
from .diagnostics import (
    TruncationOperator,
    bogovskii_pressure_test,
    cz_flux,
    effective_viscous_flux,
    energy_balance,
    flux_bmo_certificate,
    renormalized_identity_residual,
)
from .errors import (
    ConfigError,
    CsntError,
    DiagnosticFailure,
    SnapshotFormatError,
    SolverError,
)
from .fields import read_snapshot, write_snapshot
from .fixtures import generate_fixtures, fixtures_path, load_fixtures, save_fixtures

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SOLVER = 4
EXIT_DIAGNOSTIC = 5

ALL_CHECKS = ("divpsi", "flux_match", "energy_balance", "pk_identity",
              "mass", "bmo", "gronwall")


def _auto_threads() -> int:
    try:
        import psutil

        n = psutil.cpu_count(logical=False)
    except ImportError:
        import os

        n = os.cpu_count()
    return max(int(n or 1), 1)


def _g(x: float) -> str:
    return f"{x:.17g}"


def _write_wide_series(path: Path, series: dict):
    keys = [k for k in ("t", "mass", "energy", "rho_l2gamma", "dissipation",
                        "u_max", "u_w1inf") if k in series]
    rows = len(series["t"])
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for i in range(rows):
            fh.write(",".join(_g(float(series[k][i])) for k in keys) + "\n")


def _write_snapshots(outdir: Path, traj: TrajectoryState, every: int):
    snapdir = outdir / "snapshots"
    snapdir.mkdir(parents=True, exist_ok=True)
    last = len(traj.times) - 1
    levels = {0, last}
    if every > 0:
        levels.update(range(0, last + 1, every))
    for n in sorted(levels):
        t = float(traj.times[n])
        write_snapshot(snapdir / f"rho_{n:06d}.snap", traj.rho[n], t)
        write_snapshot(snapdir / f"u_{n:06d}.snap", traj.u[n], t)
    return snapdir


class _MomentumDiagWriter:
    """Appends `solve_id,iter,energy,residual` rows per momentum iterate."""

    def __init__(self, path: Path):
        self.fh = open(path, "w")
        self.fh.write("solve_id,iter,energy,residual\n")

    def __call__(self, solve_id, iteration, energy, residual):
        self.fh.write(f"{solve_id},{iteration},{_g(energy)},{_g(residual)}\n")

    def close(self):
        self.fh.close()


def _run_single(prepared: PreparedRun, outdir: Path) -> int:
    diag = _MomentumDiagWriter(outdir / "momentum_diag.csv")
    try:
        traj = solve_fixed_point(prepared.coupled, prepared.rho0, momentum_diag=diag)
    finally:
        diag.close()
    _write_wide_series(outdir / "series.csv", traj.series)
    _write_snapshots(outdir, traj, prepared.config.snapshot_every)
    for flag in traj.flags:
        print(f"flag: {flag}", file=sys.stderr)
    print(f"run ok: {len(traj.times)} levels, clamp events {traj.clamp_events}, "
          f"outputs in {outdir}")
    return EXIT_OK


def _run_fixed_point_study(prepared: PreparedRun, outdir: Path) -> int:
    from dataclasses import replace

    base = prepared.coupled
    opts = base.fixed_point
    cfg_ps = replace(base, fixed_point=replace(opts, mode="per_step"))
    cfg_gl = replace(base, fixed_point=replace(opts, mode="global"))
    traj_ps = solve_fixed_point(cfg_ps, prepared.rho0)
    traj_gl = solve_fixed_point(cfg_gl, prepared.rho0)
    p = 2.0 * prepared.coupled.model.gamma
    dist = trajectory_distance(traj_ps.rho, traj_gl.rho, p)
    with open(outdir / "fixed_point_report.csv", "w") as fh:
        fh.write("iter,residual\n")
        for i, r in enumerate(traj_gl.fixed_point_residuals):
            fh.write(f"{i},{_g(float(r))}\n")
        fh.write(f"# cross_mode_distance,{_g(dist)}\n")
    _write_wide_series(outdir / "series.csv", traj_gl.series)
    _write_snapshots(outdir, traj_gl, prepared.config.snapshot_every)
    print(f"fixed-point study ok: {len(traj_gl.fixed_point_residuals)} global "
          f"iterations, cross-mode distance {dist:.3e}, outputs in {outdir}")
    return EXIT_OK


def _run_ladder(prepared: PreparedRun, outdir: Path, threads: int) -> int:
    cfg = prepared.config
    deltas = cfg.ladder_deltas
    epsilons = cfg.ladder_epsilons or [d / 10.0 for d in deltas]
    report = regularization_ladder(prepared.coupled, prepared.rho0,
                                   deltas, epsilons, max_workers=threads)
    rows = report.rows()
    cols = ("delta", "epsilon", "status", "sqrt_eps_delta_m_u",
            "sqrt_delta_grad_rho", "rho_dist_to_next", "grad_u_dist_to_next",
            "error")
    with open(outdir / "ladder_report.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            cells = []
            for c in cols:
                v = row[c]
                cells.append(_g(v) if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")
    failures = [r for r in rows if r["status"] != "ok"]
    for r in failures:
        print(f"rung delta={r['delta']:g} failed: {r['error']}", file=sys.stderr)
    finest = report.rungs[-1].trajectory
    if finest is not None:
        _write_wide_series(outdir / "series.csv", finest.series)
        _write_snapshots(outdir, finest, cfg.snapshot_every)
    print(f"ladder ok: {len(rows)} rungs ({len(failures)} failed), "
          f"report in {outdir / 'ladder_report.csv'}")
    return EXIT_SOLVER if len(failures) == len(rows) else EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.kind:
        cfg.kind = args.kind
        from .config import _validate

        _validate(cfg)
    if args.threads is not None:
        cfg.threads = args.threads
    threads = cfg.threads if cfg.threads > 0 else _auto_threads()
    prepared = prepare_run(cfg)
    outdir = resolve_outdir(cfg, args.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        probe = outdir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {outdir} is not writable: {exc}") from exc
    write_manifest(cfg, outdir / "manifest.toml", prepared.mollification)
    if cfg.kind == "single":
        return _run_single(prepared, outdir)
    if cfg.kind == "fixed_point_study":
        return _run_fixed_point_study(prepared, outdir)
    return _run_ladder(prepared, outdir, threads)


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def _load_snapshot_trajectory(snapdir: Path):
    from .config import load_config as _load
    from .config import prepare_run as _prep

    manifest = None
    for cand in (snapdir / "manifest.toml", snapdir.parent / "manifest.toml"):
        if cand.is_file():
            manifest = cand
            break
    if manifest is None:
        raise SnapshotFormatError(
            f"{snapdir}: no manifest.toml found (needed for model parameters)"
        )
    cfg = _load(manifest)
    prepared = _prep(cfg)

    rho_files = sorted(snapdir.glob("rho_*.snap"))
    if not rho_files:
        sub = snapdir / "snapshots"
        rho_files = sorted(sub.glob("rho_*.snap"))
        snapdir = sub if rho_files else snapdir
    if not rho_files:
        raise SnapshotFormatError(f"{snapdir}: no rho_*.snap files")

    rho, u, times = [], [], []
    have_u = True
    for rf in rho_files:
        field, t = read_snapshot(rf)
        rho.append(field)
        times.append(t)
        uf = snapdir / rf.name.replace("rho_", "u_")
        if uf.is_file():
            uv, tu = read_snapshot(uf)
            if abs(tu - t) > 1e-12 * max(1.0, abs(t)):
                raise SnapshotFormatError(f"{uf}: time differs from {rf}")
            u.append(uv)
        else:
            have_u = False
    times = np.asarray(times)
    if not np.all(np.diff(times) > 0):
        raise SnapshotFormatError(f"{snapdir}: snapshot times are not increasing")
    traj = TrajectoryState(
        times=times,
        rho=rho,
        u=u if have_u else [None] * len(rho),
        series={},
        fixed_point_residuals=np.array([]),
        flags=[],
        clamp_events=0,
    ) if have_u else None
    return prepared, rho, u if have_u else None, times, traj


def _diag_rows(prepared: PreparedRun, rho, u, times, traj, checks, fixtures):
    model = prepared.coupled.model
    params = prepared.coupled.params
    rows = []

    def row(name, t, value, bound, ok):
        rows.append((name, t, value, bound, "PASS" if ok else "FAIL"))

    def skipped(name):
        rows.append((name, "", "", "", "SKIPPED"))

    for name in checks:
        needs_u = name in ("divpsi", "flux_match", "energy_balance", "pk_identity")
        if needs_u and traj is None:
            skipped(name)
            continue
        if name == "divpsi":
            rep = bogovskii_pressure_test(traj, model, params, theta=2.0)
            series = rep["series"]["divpsi_residual"]
            i = int(np.argmax(series))
            row(name, times[i], float(series[i]), 1e-10, series[i] <= 1e-10)
        elif name == "flux_match":
            worst, tworst = 0.0, times[0]
            for r, v, t in zip(rho, u, times):
                evf = effective_viscous_flux(v, r, model)
                zm = evf.values - np.mean(evf.values)
                gap = float(np.max(np.abs(zm - cz_flux(v, model, params).values)))
                if gap > worst:
                    worst, tworst = gap, t
            row(name, tworst, worst, 1e-6, worst <= 1e-6)
        elif name == "energy_balance":
            if len(times) < 2:
                skipped(name)
                continue
            eb = energy_balance(traj, model, params)
            i = int(np.argmax(eb["residual_rel"]))
            val = float(eb["residual_rel"][i])
            row(name, float(eb["t"][i]), val, 1e-6, val <= 1e-6)
        elif name == "pk_identity":
            if len(times) < 2:
                skipped(name)
                continue
            op = TruncationOperator(2.0)
            rr = renormalized_identity_residual(traj, op, 2.0, model, params)
            i = int(np.argmax(rr["residual_rel"]))
            val = float(rr["residual_rel"][i])
            row(name, float(rr["t"][i]), val, 1e-5, val <= 1e-5)
        elif name == "mass":
            if len(times) < 2:
                skipped(name)
                continue
            bound = fixtures.get("mass_residual_bound")
            if bound is None:
                skipped(name)
                continue
            vol = rho[0].grid.volume
            mass = np.array([float(np.mean(r.values)) * vol for r in rho])
            sink = np.array([
                params.delta * float(np.mean(r.values ** params.beta)) * vol
                for r in rho
            ])
            resid = np.abs(np.diff(mass) / np.diff(times)
                           + 0.5 * (sink[:-1] + sink[1:]))
            i = int(np.argmax(resid))
            row(name, float(times[1 + i]), float(resid[i]), float(bound),
                resid[i] <= bound)
        elif name == "bmo":
            bound = fixtures.get("flux_bmo_bound")
            if bound is None or traj is None:
                skipped(name)
                continue
            cert = flux_bmo_certificate(traj, model)
            i = int(np.argmax(cert["bmo"]))
            row(name, float(times[i]), float(cert["bmo_sup"]), float(bound),
                cert["bmo_sup"] <= bound)
        elif name == "gronwall":
            # needs two regularization rungs; a single snapshot set cannot
            # provide the defect series
            skipped(name)
        else:
            raise ConfigError(f"unknown check: {name}")
    return rows


def cmd_diagnose(args) -> int:
    snapdir = Path(args.snapshot_dir)
    if not snapdir.is_dir():
        raise SnapshotFormatError(f"snapshot directory not found: {snapdir}")
    checks = ALL_CHECKS if not args.checks else tuple(args.checks.split(","))
    for c in checks:
        if c not in ALL_CHECKS:
            raise ConfigError(f"unknown check: {c} (choose from {', '.join(ALL_CHECKS)})")
    try:
        fixtures = load_fixtures(args.fixtures)
    except FileNotFoundError:
        fixtures = {}
    prepared, rho, u, times, traj = _load_snapshot_trajectory(snapdir)
    rows = _diag_rows(prepared, rho, u, times, traj, checks, fixtures)
    outpath = Path(args.out) if args.out else snapdir / "diagnostics.csv"
    with open(outpath, "w") as fh:
        fh.write("name,t,value,bound,verdict\n")
        for name, t, value, bound, verdict in rows:
            tcell = _g(float(t)) if t != "" else ""
            vcell = _g(float(value)) if value != "" else ""
            bcell = _g(float(bound)) if bound != "" else ""
            fh.write(f"{name},{tcell},{vcell},{bcell},{verdict}\n")
    for name, t, value, bound, verdict in rows:
        print(f"{name}: {verdict}")
    if any(r[4] == "FAIL" for r in rows):
        raise DiagnosticFailure(f"diagnostics failed; see {outpath}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    if args.action != "regenerate":
        raise ConfigError(f"unknown fixtures action: {args.action}")
    values = generate_fixtures(quick=args.quick, progress=lambda m: print(f"... {m}"))
    out = Path(args.out) if args.out else fixtures_path()
    save_fixtures(values, out)
    print(f"wrote {len(values)} fixture values to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="csnt",
        description="Pseudo-spectral simulator and estimate-verification "
                    "harness for the regularized compressible non-Newtonian "
                    "Stokes system on the periodic torus.",
    )
    ap.add_argument("--version", action="version", version=f"csnt {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--kind", choices=("single", "fixed_point_study", "ladder"))
    p_run.add_argument("--out", help="output directory (overrides config/env)")
    p_run.add_argument("--threads", type=int, help="worker cap (0 = physical cores)")
    p_run.set_defaults(func=cmd_run)

    p_lad = sub.add_parser("ladder", help="shorthand for run --kind ladder")
    p_lad.add_argument("--config", required=True)
    p_lad.add_argument("--out")
    p_lad.add_argument("--threads", type=int)
    p_lad.set_defaults(func=cmd_run, kind="ladder")

    p_diag = sub.add_parser("diagnose", help="run estimate checks on snapshots")
    p_diag.add_argument("snapshot_dir")
    p_diag.add_argument("--checks", help=f"comma list from: {','.join(ALL_CHECKS)}")
    p_diag.add_argument("--fixtures", help="fixture JSON path (default: packaged)")
    p_diag.add_argument("--out", help="diagnostics.csv path")
    p_diag.set_defaults(func=cmd_diagnose)

    p_fix = sub.add_parser("fixtures", help="manage pinned regression constants")
    p_fix.add_argument("action", choices=("regenerate",))
    p_fix.add_argument("--out", help="output JSON path (default: packaged file)")
    p_fix.add_argument("--quick", action="store_true",
                       help="short horizon; for smoke tests, not for pinning")
    p_fix.set_defaults(func=cmd_fixtures)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SnapshotFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DiagnosticFailure as exc:
        print(f"diagnostic failure: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTIC
    except CsntError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
