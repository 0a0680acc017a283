"""Batch command-line interface.

Subcommands (each takes ``--config <path>`` plus dotted ``--key=value``
overrides):

- ``fom-run``     full-order continuation; writes the record CSV, run
  summary, snapshot containers, the mesh, and a curve figure
- ``rom-build``   offline phase for the configured reduction; writes the
  serialized basis / interpolation operator / element weights
- ``rom-run``     online reduced continuation; writes the record CSV and,
  when a reference is configured, the comparison JSON and overlay figure
- ``compare``     stand-alone curve comparison of two record CSVs
- ``optimize``    limit-load width optimization (three full-order seeds,
  then the reduced model in the root-finding loop)

Exit codes: 0 success, 2 usage/config error, 3 solver failure,
4 reduction-rank failure.  ``HYPERRED_THREADS`` caps worker-thread usage
(applied to the BLAS pools before the numerical modules load); results
are independent of the setting.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SOLVER = 3
EXIT_RANK = 4


def _apply_thread_cap() -> None:
    cap = os.environ.get("HYPERRED_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperred",
        description="Damage-plasticity FEM with field-decomposed hyper-reduction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("fom-run", "full-order continuation run"),
        ("rom-build", "offline reduction phase"),
        ("rom-run", "online reduced continuation run"),
        ("compare", "force-displacement curve comparison"),
        ("optimize", "limit-load width optimization"),
    ):
        cmd = sub.add_parser(name, help=doc)
        cmd.add_argument("--config", required=True, help="JSON configuration file")
    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    args, overrides = _parser().parse_known_args(argv)

    from .config import ConfigError, load_config

    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    from .linalg import RankError
    from .fom import SolverFailure
    from .mesh import MeshError
    from .optimize import OptimizationError

    handler = {
        "fom-run": _cmd_fom_run,
        "rom-build": _cmd_rom_build,
        "rom-run": _cmd_rom_run,
        "compare": _cmd_compare,
        "optimize": _cmd_optimize,
    }[args.command]
    try:
        return handler(cfg)
    except RankError as exc:
        print(f"reduction rank failure: {exc}", file=sys.stderr)
        return EXIT_RANK
    except (SolverFailure, OptimizationError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, MeshError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _outdir(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _write_record(cfg, record, name: str) -> str:
    from .io import write_json, write_record_csv
    from .metrics import timing_report

    out = _outdir(cfg)
    csv_path = os.path.join(out, f"{name}.csv")
    write_record_csv(csv_path, record.rows)
    summary = {**record.summary(), "timing": timing_report(record.rows)}
    write_json(os.path.join(out, f"{name}_summary.json"), summary)
    return csv_path


def _render_curve(cfg, record, name: str, title: str) -> None:
    if not cfg.figures:
        return
    from .report import render_record_figure

    render_record_figure(record.rows, os.path.join(cfg.output_dir, f"{name}.png"), title)


def _cmd_fom_run(cfg) -> int:
    from .workflow import build_problem, run_fom

    mesh, _ = build_problem(cfg)
    record, store = run_fom(cfg)
    out = _outdir(cfg)
    mesh.save(os.path.join(out, "mesh.json"))
    _write_record(cfg, record, "record")
    store.save(os.path.join(out, "snapshots_v.hrsnap"), os.path.join(out, "snapshots_r.hrsnap"))
    _render_curve(cfg, record, "curve", "full-order force-displacement")
    if record.flagged:
        print(f"continuation flagged: {record.termination} after {len(record.rows)} steps",
              file=sys.stderr)
        return EXIT_SOLVER
    print(f"fom-run: {len(record.rows)} steps, limit load {record.limit_load:.6g} N")
    return EXIT_OK


def _load_store(cfg):
    from .config import ConfigError
    from .fom import SnapshotStore

    if not cfg.snapshot_dir:
        raise ConfigError("paths.snapshot_dir is required for this command")
    return SnapshotStore.load(
        os.path.join(cfg.snapshot_dir, "snapshots_v.hrsnap"),
        os.path.join(cfg.snapshot_dir, "snapshots_r.hrsnap"),
    )


def _cmd_rom_build(cfg) -> int:
    from .config import ConfigError
    from .workflow import build_problem, build_reduction_artifacts

    if cfg.reduction.method == "fom":
        raise ConfigError("rom-build needs a reduced method (dpod, ddeim or decsw)")
    store = _load_store(cfg)
    mesh, layout = build_problem(cfg)
    if store.layout_fingerprint != layout.fingerprint():
        raise ConfigError("snapshots belong to a different mesh/layout than the config geometry")
    artifacts = build_reduction_artifacts(cfg, store, mesh, layout)
    out = _outdir(cfg)
    artifacts["basis"].save(os.path.join(out, "basis.hrsnap"), os.path.join(out, "basis.json"))
    if "deim" in artifacts:
        artifacts["deim"].save(os.path.join(out, "deim_omega.hrsnap"), os.path.join(out, "deim.json"))
    if "weights" in artifacts:
        artifacts["weights"].save(os.path.join(out, "weights.json"))
        if artifacts["weights"].tolerance_not_met:
            print("warning: weight solve hit its optimum before reaching tau", file=sys.stderr)
    print(f"rom-build[{cfg.reduction.method}]: basis {artifacts['basis'].m} columns")
    return EXIT_OK


def _load_artifacts(cfg):
    from .config import ConfigError
    from .ddeim import DeimOperator
    from .decsw import EcswWeights
    from .dpod import ReducedBasis

    adir = cfg.artifact_dir or cfg.output_dir
    basis_matrix = os.path.join(adir, "basis.hrsnap")
    if not os.path.exists(basis_matrix):
        raise ConfigError(f"no basis found under '{adir}' (run rom-build first)")
    artifacts = {"basis": ReducedBasis.load(basis_matrix, os.path.join(adir, "basis.json"))}
    if cfg.reduction.method == "ddeim":
        artifacts["deim"] = DeimOperator.load(
            os.path.join(adir, "deim_omega.hrsnap"), os.path.join(adir, "deim.json")
        )
    elif cfg.reduction.method == "decsw":
        artifacts["weights"] = EcswWeights.load(os.path.join(adir, "weights.json"))
    return artifacts


def _cmd_rom_run(cfg) -> int:
    from .config import ConfigError
    from .io import read_record_csv, read_json, write_json
    from .metrics import compare_runs
    from .workflow import build_problem, run_reduced

    if cfg.reduction.method == "fom":
        raise ConfigError("rom-run needs a reduced method (dpod, ddeim or decsw)")
    artifacts = _load_artifacts(cfg)
    mesh, layout = build_problem(cfg)
    if artifacts["basis"].layout_fingerprint and \
            artifacts["basis"].layout_fingerprint != layout.fingerprint():
        raise ConfigError("reduction artifacts belong to a different mesh/layout")
    record = run_reduced(cfg, artifacts, mesh, layout)
    _write_record(cfg, record, "rom_record")
    _render_curve(cfg, record, "rom_curve", f"{cfg.reduction.method} force-displacement")

    if cfg.reference_record:
        ref_rows = read_record_csv(cfg.reference_record)
        ref_summary = read_json(cfg.reference_summary) if cfg.reference_summary else None
        comparison = compare_runs(
            ref_rows, record, n_samples=1000,
            reference_summary=ref_summary, candidate_summary=record.summary(),
        )
        write_json(os.path.join(cfg.output_dir, "comparison.json"), comparison.to_json_dict())
        if cfg.figures:
            from .report import render_comparison_figure

            render_comparison_figure(
                ref_rows, record.rows, comparison.to_json_dict(),
                os.path.join(cfg.output_dir, "comparison.png"),
                labels=("full order", cfg.reduction.method),
            )
        print(f"rom-run[{cfg.reduction.method}]: {len(record.rows)} steps, "
              f"epsilon {comparison.epsilon:.3e}")
    else:
        print(f"rom-run[{cfg.reduction.method}]: {len(record.rows)} steps")
    if record.flagged:
        print(f"continuation flagged: {record.termination} after {len(record.rows)} steps",
              file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_compare(cfg) -> int:
    from .config import ConfigError
    from .io import read_json, read_record_csv, write_json
    from .metrics import compare_runs

    if cfg.compare is None:
        raise ConfigError("compare requires a 'compare' config section")
    cfg.compare.validate()
    ref_rows = read_record_csv(cfg.compare.reference_record)
    cand_rows = read_record_csv(cfg.compare.candidate_record)
    ref_summary = read_json(cfg.compare.reference_summary) if cfg.compare.reference_summary else None
    cand_summary = read_json(cfg.compare.candidate_summary) if cfg.compare.candidate_summary else None
    comparison = compare_runs(
        ref_rows, cand_rows, n_samples=cfg.compare.n_samples,
        reference_summary=ref_summary, candidate_summary=cand_summary,
    )
    out = _outdir(cfg)
    write_json(os.path.join(out, "comparison.json"), comparison.to_json_dict())
    if cfg.figures:
        from .report import render_comparison_figure

        render_comparison_figure(ref_rows, cand_rows, comparison.to_json_dict(),
                                 os.path.join(out, "comparison.png"))
    print(f"compare: epsilon {comparison.epsilon:.6e} over {comparison.sample_count} samples")
    return EXIT_OK


def _cmd_optimize(cfg) -> int:
    from .config import ConfigError
    from .io import format_float, write_json
    from .fom import SnapshotStore
    from .optimize import optimize_width
    from .workflow import (
        build_pooled_artifacts,
        build_problem,
        rebuild_deim_for_mesh,
        run_fom,
        run_reduced,
    )

    if cfg.optimize is None:
        raise ConfigError("optimize requires an 'optimize' config section")
    cfg.optimize.validate()
    opt = cfg.optimize
    if cfg.reduction.method not in ("fom", "ddeim", "decsw"):
        raise ConfigError("optimize supports reduction.method in {fom, ddeim, decsw}")

    seed_stores: list[SnapshotStore] = []
    seed_widths: list[float] = []
    counters = {"fom_element_evals": 0, "rom_element_evals": 0, "offline_element_evals": 0}

    def seed_eval(width: float) -> float:
        record, store = run_fom(cfg, width_b=width)
        counters["fom_element_evals"] += record.n_element_evals
        seed_stores.append(store)
        seed_widths.append(width)
        return record.limit_load

    def rom_factory():
        # Reduction artifacts are built once, from the three seed runs'
        # snapshots only, and never refreshed during the iteration.
        artifacts, offline = build_pooled_artifacts(cfg, seed_stores, seed_widths)
        counters["offline_element_evals"] += offline

        def rom_eval(width: float) -> float:
            mesh_w, layout_w = build_problem(cfg, width_b=width)
            arts = artifacts
            if cfg.reduction.method == "ddeim":
                arts = rebuild_deim_for_mesh(cfg, artifacts, mesh_w, layout_w)
            record = run_reduced(cfg, arts, mesh_w, layout_w)
            counters["rom_element_evals"] += record.n_element_evals
            return record.limit_load

        return rom_eval

    factory = None if cfg.reduction.method == "fom" else rom_factory
    result = optimize_width(
        seed_eval,
        factory,
        (opt.bracket_lo, opt.bracket_hi),
        opt.target_limit_load,
        opt.tol_width,
        opt.max_iterations,
    )

    out = _outdir(cfg)
    lines = ["iteration,width_mm,limit_load_N,sq_error,model"]
    for row in result.table:
        lines.append(
            f"{row['iteration']},{format_float(row['width'])},"
            f"{format_float(row['limit_load'])},{format_float(row['sq_error'])},{row['model']}"
        )
    with open(os.path.join(out, "optimize_table.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    write_json(
        os.path.join(out, "optimize.json"),
        {**result.to_json_dict(), "counters": counters, "method": cfg.reduction.method},
    )
    if cfg.figures:
        from .report import render_optimization_figure

        render_optimization_figure(result.table, opt.target_limit_load,
                                   os.path.join(out, "optimize.png"))
    print(f"optimize[{cfg.reduction.method}]: width {result.width:.6g} mm "
          f"({len(result.table)} evaluations)")
    return EXIT_OK if result.converged else EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
