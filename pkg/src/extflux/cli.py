"""Command-line entry point: parse scenarios, dispatch runs, write artifacts.

Exit codes follow the usual triad: 0 when every verdict passes, 1 when a
check fails or a solver gives up, 2 for usage and configuration errors
(each of which names the offending flag, key, or file).  Every run that
writes files also writes a manifest sufficient to reproduce the numbers:
scenario hash, seeds, mesh and step resolutions, tool version.  Results
are additionally stored as JSON so `report` can regenerate the tables
and plots byte-for-byte without recomputing anything.

The dispatcher is single threaded; `--threads` is handed down to the
sampling engine, whose batch streams are keyed by index so the thread
count never changes any emitted number.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .closedform import bound_constants, hit_prob_ball
from .geometry import Ball, boundary_quadrature
from .harness import (
    BlowupReport,
    BoundReport,
    BoundRow,
    ConfigError,
    GreenSymmetryReport,
    ScenarioConfig,
    emit_report,
    load_scenario,
    run_shell_blowup_study,
    verify_green_symmetry,
    verify_laplace_envelope,
    verify_weighted_envelope,
)
from .montecarlo import (
    BallRegion,
    CircuitStats,
    circuit_decomposition,
    estimate_hit_prob,
    estimate_occupation,
    simulate_reflected_path,
)
from .pde_solver import SolverError, TruncationDivergenceError, solve_minimal

__all__ = ["build_parser", "dispatch", "main"]

_GAMMA_GRID = (1.5, 2.0, 3.0, 4.0, 6.0, 10.0, 20.0, 50.0, 100.0)
_BLOWUP_NS = (4, 8, 16, 32)


# ---------------------------------------------------------------------------
# argument plumbing


def _u64(raw: str) -> int:
    value = int(raw)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {raw}")
    return value


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {raw}")
    return value


def _add_run_flags(sp: argparse.ArgumentParser, *, scenario_required: bool) -> None:
    sp.add_argument(
        "--scenario", metavar="PATH", required=scenario_required,
        help="scenario file (sectioned key-value text)",
    )
    sp.add_argument(
        "--seed", type=_u64, metavar="U64",
        help="override the sampling seed from the scenario",
    )
    sp.add_argument(
        "--threads", type=_positive_int, metavar="K",
        help="worker threads for the sampling engine (results are thread-count independent)",
    )
    sp.add_argument(
        "--out", metavar="DIR",
        help="output directory (default: scenario's, under $EXTFLUX_OUT if set)",
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="extflux",
        description="Exterior-domain flux bounds: solve, sample, verify, report.",
    )
    p.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = p.add_subparsers(dest="command", required=True)

    bounds = sub.add_parser(
        "bounds", help="print the envelope-constant table as CSV"
    )
    bounds.add_argument("--d", type=int, default=3, help="space dimension (>= 3)")
    bounds.add_argument(
        "--gamma", type=float, default=None,
        help="single probe ratio; omit for the built-in grid",
    )
    bounds.set_defaults(func=cmd_bounds)

    solve = sub.add_parser(
        "solve", help="run the deterministic exterior solve for a scenario"
    )
    _add_run_flags(solve, scenario_required=True)
    solve.add_argument(
        "--dump-domain", action="store_true",
        help="also write the boundary point cloud (node, normal, weight per line)",
    )
    solve.set_defaults(func=cmd_solve)

    mc = sub.add_parser("mc", help="run the sampling estimators for a scenario")
    _add_run_flags(mc, scenario_required=True)
    mc.add_argument(
        "--dump-paths", type=_positive_int, default=0, metavar="K",
        help="write the first K trajectories as plain-text polylines",
    )
    mc.set_defaults(func=cmd_mc)

    verify = sub.add_parser(
        "verify", help="run the envelope and symmetry checks for a scenario"
    )
    _add_run_flags(verify, scenario_required=True)
    verify.set_defaults(func=cmd_verify)

    blowup = sub.add_parser(
        "blowup", help="run the pinched-shell growth study"
    )
    _add_run_flags(blowup, scenario_required=False)
    blowup.set_defaults(func=cmd_blowup)

    report = sub.add_parser(
        "report", help="regenerate tables and plots from stored results"
    )
    _add_run_flags(report, scenario_required=False)
    report.set_defaults(func=cmd_report)
    return p


def _load_scenario(args: argparse.Namespace) -> ScenarioConfig:
    cfg = load_scenario(args.scenario)
    mc = cfg.mc
    if args.seed is not None:
        mc = replace(mc, seed=args.seed)
    if args.threads is not None:
        mc = replace(mc, threads=args.threads)
    if mc != cfg.mc:
        cfg = replace(cfg, mc=mc)
    return cfg


def _resolve_out(args: argparse.Namespace, scenario_dir: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("EXTFLUX_OUT")
    if root:
        return Path(root) / scenario_dir
    return Path(scenario_dir)


def _run_info(args: argparse.Namespace, cfg: ScenarioConfig | None) -> dict:
    """Everything needed to reproduce the run, minus wall time."""
    info: dict = {"subcommand": args.command, "tool_version": __version__}
    if getattr(args, "scenario", None):
        digest = hashlib.sha256(Path(args.scenario).read_bytes()).hexdigest()
        info["config_sha256"] = digest
    if cfg is not None:
        info["seeds"] = {"mc": cfg.mc.seed}
        info["resolutions"] = {
            "mesh": asdict(cfg.mesh),
            "dt": cfg.mc.dt,
            "samples": cfg.mc.samples,
            "truncation_radius": cfg.mc.truncation_radius,
            "solver_tol": cfg.solver_tol,
        }
        info["threads"] = cfg.mc.threads
    return info


def _manifest_extra(run: dict, t0: float) -> dict:
    return {"run": {**run, "wall_time_s": round(time.time() - t0, 3)}}


def _write_manifest(out: Path, extra: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps({"version": 1, **extra}, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# result storage (read back by `report`)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _encode_result(obj) -> dict:
    if isinstance(obj, BoundReport):
        return {
            "type": "bound_report",
            "scenario": obj.scenario,
            "kind": obj.kind,
            "flux_integral": obj.flux_integral,
            "rows": [asdict(r) for r in obj.rows],
            "diagnostics": _jsonable(obj.diagnostics),
        }
    if isinstance(obj, BlowupReport):
        return {
            "type": "blowup",
            "ns": obj.ns,
            "interior_values": obj.interior_values,
            "exterior_sup": {str(k): v for k, v in obj.exterior_sup.items()},
            "envelope_caps": {str(k): v for k, v in obj.envelope_caps.items()},
            "surface_areas": obj.surface_areas,
            "area_bound": obj.area_bound,
            "largest_trusted_n": obj.largest_trusted_n,
            "diagnostics": _jsonable(obj.diagnostics),
        }
    if isinstance(obj, GreenSymmetryReport):
        return {
            "type": "green_symmetry",
            "probes": obj.probes.tolist(),
            "plain_asymmetry": obj.plain_asymmetry,
            "weighted_asymmetry": obj.weighted_asymmetry,
            "symmetrized_gap": obj.symmetrized_gap,
            "tolerance": obj.tolerance,
        }
    if isinstance(obj, CircuitStats):
        return {
            "type": "circuit_stats",
            "samples": obj.samples,
            "outer_level": obj.outer_level,
            "survival_counts": [int(c) for c in obj.survival_counts],
            "occupation_by_circuit": list(map(float, obj.occupation_by_circuit)),
            "contained_occupation": obj.contained_occupation,
            "entry_points": obj.entry_points.tolist(),
            "escapes": obj.escapes,
            "budget_exhausted": obj.budget_exhausted,
        }
    raise TypeError(f"cannot store result of type {type(obj).__name__}")


def _decode_result(d: dict):
    kind = d.get("type")
    if kind == "bound_report":
        return BoundReport(
            scenario=d["scenario"],
            kind=d["kind"],
            flux_integral=d["flux_integral"],
            rows=[BoundRow(**r) for r in d["rows"]],
            diagnostics=d["diagnostics"],
        )
    if kind == "blowup":
        return BlowupReport(
            ns=d["ns"],
            interior_values=d["interior_values"],
            exterior_sup={float(k): v for k, v in d["exterior_sup"].items()},
            envelope_caps={float(k): v for k, v in d["envelope_caps"].items()},
            surface_areas=d["surface_areas"],
            area_bound=d["area_bound"],
            largest_trusted_n=d["largest_trusted_n"],
            diagnostics=d["diagnostics"],
        )
    if kind == "green_symmetry":
        return GreenSymmetryReport(
            probes=np.asarray(d["probes"], dtype=float),
            plain_asymmetry=d["plain_asymmetry"],
            weighted_asymmetry=d["weighted_asymmetry"],
            symmetrized_gap=d["symmetrized_gap"],
            tolerance=d["tolerance"],
        )
    if kind == "circuit_stats":
        entries = np.asarray(d["entry_points"], dtype=float).reshape(-1, 3)
        return CircuitStats(
            samples=d["samples"],
            outer_level=d["outer_level"],
            survival_counts=np.asarray(d["survival_counts"], dtype=np.int64),
            occupation_by_circuit=np.asarray(d["occupation_by_circuit"], dtype=float),
            contained_occupation=d["contained_occupation"],
            entry_points=entries,
            escapes=d["escapes"],
            budget_exhausted=d["budget_exhausted"],
        )
    raise ConfigError(f"unknown result type {kind!r} in results file")


def _store_results(
    out: Path, results: list, summary_lines: list[str] | None, run: dict
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "results": [_encode_result(r) for r in results],
        "summary_lines": summary_lines,
        "run": run,
    }
    (out / "results.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_bounds(args: argparse.Namespace) -> int:
    if args.d < 3:
        raise ConfigError(f"--d must be at least 3 (transient regime), got {args.d}")
    gammas = (args.gamma,) if args.gamma is not None else _GAMMA_GRID
    if any(g <= 1.0 for g in gammas):
        raise ConfigError(f"--gamma must exceed 1, got {args.gamma}")
    print("gamma,circuit_ratio,c_minus,c_plus")
    for g in gammas:
        c = bound_constants(g, args.d)
        print(f"{g:g},{c.circuit_ratio:.6f},{c.lower:.6f},{c.upper:.6f}")
    return 0


def cmd_solve(args: argparse.Namespace) -> int:
    t0 = time.time()
    cfg = _load_scenario(args)
    out = _resolve_out(args, cfg.out_dir)
    radii = [g * cfg.domain.bounding_radius for g in cfg.gammas]
    sol = solve_minimal(
        cfg.domain, cfg.operator, cfg.flux, radii,
        mesh_spec=cfg.mesh, tol=cfg.solver_tol,
    )
    out.mkdir(parents=True, exist_ok=True)

    lines = ["radius,value_min,value_max,value_mean"]
    print("radius      min           max           mean")
    for r in radii:
        lo, hi = sol.field.sphere_minmax(r)
        mean = float(np.mean(sol.field.at_radius(r)))
        lines.append(f"{r:.6g},{lo:.10g},{hi:.10g},{mean:.10g}")
        print(f"{r:<10.4g}  {lo:<12.6g}  {hi:<12.6g}  {mean:<12.6g}")
    (out / "solution.csv").write_text("\n".join(lines) + "\n")

    if args.dump_domain:
        quad = boundary_quadrature(cfg.domain)
        np.savetxt(
            out / "domain.txt",
            np.column_stack([quad.nodes, quad.normals, quad.weights]),
            header="x y z nx ny nz weight",
        )

    run = _run_info(args, cfg)
    run["solve"] = {
        "outer_radii": sol.outer_radii,
        "increments": sol.increments,
        "converged": sol.converged,
    }
    _write_manifest(out, _manifest_extra(run, t0))
    if not sol.converged:
        print("solve did not reach the requested truncation tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_mc(args: argparse.Namespace) -> int:
    t0 = time.time()
    cfg = _load_scenario(args)
    out = _resolve_out(args, cfg.out_dir)
    dom, op, mc = cfg.domain, cfg.operator, cfg.mc
    R = dom.bounding_radius
    start = np.array([0.0, 0.0, 2.0 * R])

    # estimator, estimate, reference (closed form when the operator is plain)
    rows: list[tuple] = []
    verdicts: list[bool] = []

    hit = estimate_hit_prob(dom, op, start, R, mc)
    ref = hit_prob_ball(2.0 * R, R, 3) if op.is_laplacian else None
    if ref is not None:
        verdicts.append(abs(hit.mean - ref) <= 4.0 * hit.stderr + 1e-3)
    rows.append(("hit_prob", hit, ref))

    region = BallRegion(np.array([0.0, 0.0, 3.0 * R]), 0.5 * R)
    occ = estimate_occupation(dom, op, start, region, mc)
    rows.append(("occupation", occ, None))

    stats = None
    if isinstance(dom, Ball):
        stats = circuit_decomposition(
            dom, op, np.array([0.0, 0.0, R]), 2.0, R, None, mc, max_circuits=4
        )
        if op.is_laplacian:
            verdicts.append(
                abs(stats.survival_freq(2) - 0.5) <= 4.0 * stats.survival_se(2) + 1e-3
            )

    out.mkdir(parents=True, exist_ok=True)
    lines = ["estimator,value,stderr,bias_bound,samples,reference,verdict"]
    print("estimator    value         stderr        reference")
    for name, est, reference in rows:
        ok = (
            ""
            if reference is None
            else ("pass" if abs(est.mean - reference) <= 4 * est.stderr + 1e-3 else "fail")
        )
        ref_txt = "" if reference is None else f"{reference:.10g}"
        lines.append(
            f"{name},{est.mean:.10g},{est.stderr:.6g},{est.bias_bound:.6g},"
            f"{est.samples},{ref_txt},{ok}"
        )
        print(f"{name:<12} {est.mean:<13.6g} {est.stderr:<13.3g} {ref_txt}")
    if stats is not None:
        for n in range(1, len(stats.survival_counts) + 1):
            freq, se = stats.survival_freq(n), stats.survival_se(n)
            ref_txt = f"{0.5 ** (n - 1):.10g}" if op.is_laplacian else ""
            lines.append(f"circuit_{n},{freq:.10g},{se:.6g},0,{stats.samples},{ref_txt},")
            print(f"circuit_{n:<5} {freq:<13.6g} {se:<13.3g} {ref_txt}")
    (out / "mc.csv").write_text("\n".join(lines) + "\n")

    path_seeds = []
    for i in range(args.dump_paths):
        seed = mc.seed + i
        path_seeds.append(seed)
        rec = simulate_reflected_path(
            dom, op, start,
            replace(mc, seed=seed, max_steps=min(mc.max_steps, 20_000)),
            record_every=10,
        )
        rec.dump(str(out / f"path_{i:03d}.txt"))

    run = _run_info(args, cfg)
    run["counts"] = {"hit_samples": hit.samples, "occupation_samples": occ.samples}
    if path_seeds:
        run["seeds"]["path_dumps"] = path_seeds
    if stats is not None:
        emit_report([stats], out, manifest_extra=_manifest_extra(run, t0))
        _store_results(out, [stats], None, run)
    else:
        _write_manifest(out, _manifest_extra(run, t0))

    failed = [ok for ok in verdicts if not ok]
    if failed:
        print(f"{len(failed)} sampling check(s) outside tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    t0 = time.time()
    cfg = _load_scenario(args)
    out = _resolve_out(args, cfg.out_dir)

    if cfg.operator.is_laplacian:
        envelope = verify_laplace_envelope(cfg)
    else:
        envelope = verify_weighted_envelope(cfg)
    symmetry = verify_green_symmetry(cfg.domain, cfg.operator, mesh=cfg.mesh)

    results = [envelope, symmetry]
    summary = [
        f"envelope[{envelope.kind}] {cfg.name}: {'PASS' if envelope.passed else 'FAIL'}",
        f"green symmetry {cfg.name}: {'PASS' if symmetry.passed else 'FAIL'}",
    ]
    for line in summary:
        print(line)
    for row in envelope.rows:
        print(
            f"  ratio {row.gamma:<6g} value [{row.value_min:.6g}, {row.value_max:.6g}]"
            f"  envelope [{row.lower:.6g}, {row.upper:.6g}]  tol {row.tol:.2g}"
        )

    run = _run_info(args, cfg)
    _store_results(out, results, summary, run)
    emit_report(results, out, summary_lines=summary, manifest_extra=_manifest_extra(run, t0))
    return 0 if envelope.passed and symmetry.passed else 1


def cmd_blowup(args: argparse.Namespace) -> int:
    t0 = time.time()
    cfg = _load_scenario(args) if args.scenario else None
    out = _resolve_out(args, cfg.out_dir if cfg else "out")

    kwargs = {}
    if cfg is not None:
        kwargs = {"flux": cfg.flux, "mesh": cfg.mesh, "tol": cfg.solver_tol}
    rep = run_shell_blowup_study(ns=_BLOWUP_NS, **kwargs)

    print("n      interior      area      largest exterior sup / cap")
    for i, n in enumerate(rep.ns):
        worst = max(
            rep.exterior_sup[r][i] / rep.envelope_caps[r][i] for r in rep.exterior_sup
        )
        print(
            f"{n:<6d} {rep.interior_values[i]:<13.6g} "
            f"{rep.surface_areas[i]:<9.4g} {worst:.4f}"
        )
    print(f"growth {'PASS' if rep.growth_ok else 'FAIL'}, "
          f"exterior {'PASS' if rep.exterior_ok else 'FAIL'}, "
          f"area {'PASS' if rep.area_ok else 'FAIL'}")

    run = _run_info(args, cfg)
    summary = [f"pinched-shell study: {'PASS' if rep.passed else 'FAIL'}"]
    _store_results(out, [rep], summary, run)
    emit_report([rep], out, summary_lines=summary, manifest_extra=_manifest_extra(run, t0))
    return 0 if rep.passed else 1


def cmd_report(args: argparse.Namespace) -> int:
    t0 = time.time()
    out = _resolve_out(args, "out")
    stored = out / "results.json"
    if not stored.exists():
        raise ConfigError(
            f"missing results file: {stored} (run verify, mc, or blowup first)"
        )
    payload = json.loads(stored.read_text())
    results = [_decode_result(d) for d in payload["results"]]
    run = dict(payload.get("run", {}))
    run["subcommand"] = "report"
    run["tool_version"] = __version__
    emit_report(
        results, out,
        summary_lines=payload.get("summary_lines"),
        manifest_extra=_manifest_extra(run, t0),
    )
    verdicts = [r.passed for r in results if hasattr(r, "passed")]
    print(f"regenerated {out} from {len(results)} stored result(s)")
    return 0 if all(verdicts) else 1


# ---------------------------------------------------------------------------
# dispatch


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors, --help, --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, TruncationDivergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
