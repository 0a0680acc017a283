"""Command-line interface: artifacts, exit codes, determinism, figures."""

import json
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from conftest import REFERENCE_MATERIAL

TINY_CONFIG = {
    "geometry": {"width_b": 5.0, "hole_radius": 2.0, "height": 5.0,
                 "nx": 4, "ny": 4, "thickness": 1.0, "traction": 500.0},
    "material": REFERENCE_MATERIAL,
    "solver": {"newton_tol": 1e-9, "max_newton_iters": 12,
               "initial_arc_length": 0.008, "min_arc_length": 0.008,
               "max_arc_length": 0.008, "target_iterations": 5, "max_steps": 10},
    "reduction": {"method": "fom"},
}


def run_cli(args, env_extra=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "hyperred.cli", *args],
        capture_output=True, text=True, env=env,
    )


def write_config(tmp_path, name="cfg.json", **patches):
    doc = json.loads(json.dumps(TINY_CONFIG))
    for key, value in patches.items():
        doc[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def mask_timing(csv_text: str) -> str:
    lines = csv_text.strip().splitlines()
    out = [lines[0]]
    for line in lines[1:]:
        parts = line.split(",")
        parts[5] = parts[6] = "0"
        out.append(",".join(parts))
    return "\n".join(out)


@pytest.fixture(scope="module")
def fom_artifacts(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_fom")
    cfg = write_config(tmp, paths={"output_dir": str(tmp / "out")})
    res = run_cli(["fom-run", "--config", cfg])
    assert res.returncode == 0, res.stderr
    return tmp, cfg, str(tmp / "out")


class TestUsageErrors:
    def test_missing_subcommand(self):
        assert run_cli([]).returncode == 2

    def test_missing_config_file(self, tmp_path):
        res = run_cli(["fom-run", "--config", str(tmp_path / "absent.json")])
        assert res.returncode == 2

    def test_invalid_override(self, tmp_path):
        cfg = write_config(tmp_path)
        res = run_cli(["fom-run", "--config", cfg, "--solver.max_steps"])
        assert res.returncode == 2

    def test_missing_b_kin(self, tmp_path):
        doc = json.loads(json.dumps(TINY_CONFIG))
        del doc["material"]["b_kin"]
        path = tmp_path / "nob.json"
        path.write_text(json.dumps(doc))
        res = run_cli(["fom-run", "--config", str(path)])
        assert res.returncode == 2
        assert "b_kin" in res.stderr

    def test_method_requirements(self, tmp_path):
        cfg = write_config(tmp_path)
        res = run_cli(["rom-build", "--config", cfg, "--reduction.method=decsw",
                       "--reduction.m_u=2", "--reduction.m_d=1"])
        assert res.returncode == 2  # tau missing

    def test_geometry_error(self, tmp_path):
        cfg = write_config(tmp_path)
        res = run_cli(["fom-run", "--config", cfg, "--geometry.hole_radius=9.0"])
        assert res.returncode == 2


class TestFomRun:
    def test_artifacts_written(self, fom_artifacts):
        _, _, out = fom_artifacts
        for name in ("record.csv", "record_summary.json", "snapshots_v.hrsnap",
                     "snapshots_r.hrsnap", "mesh.json", "curve.png"):
            assert os.path.exists(os.path.join(out, name)), name
        header = open(os.path.join(out, "record.csv")).readline().strip()
        assert header == "step,load_factor,u_control_mm,F_reaction_N,iters,t_assembly_s,t_solve_s"

    def test_elastic_curve_is_linear(self, tmp_path):
        material = dict(REFERENCE_MATERIAL, sigma0=1e9, y0=1e12)
        cfg = write_config(
            tmp_path, material=material,
            solver={"newton_tol": 1e-10, "max_newton_iters": 10,
                    "initial_arc_length": 2e-5, "min_arc_length": 2e-5,
                    "max_arc_length": 2e-5, "max_steps": 6},
            paths={"output_dir": str(tmp_path / "out")},
        )
        res = run_cli(["fom-run", "--config", cfg])
        assert res.returncode == 0, res.stderr
        rows = open(tmp_path / "out" / "record.csv").read().strip().splitlines()[1:]
        u = np.array([float(r.split(",")[2]) for r in rows])
        f = np.array([float(r.split(",")[3]) for r in rows])
        ratio = f / u
        assert np.abs(ratio - ratio[0]).max() / ratio[0] < 1e-5

    def test_solver_failure_exit_code(self, tmp_path):
        cfg = write_config(
            tmp_path,
            solver={"newton_tol": 1e-9, "max_newton_iters": 2,
                    "initial_arc_length": 5.0, "min_arc_length": 4.9,
                    "max_arc_length": 5.0, "max_steps": 5, "max_step_cuts": 1},
            paths={"output_dir": str(tmp_path / "out")},
        )
        assert run_cli(["fom-run", "--config", cfg]).returncode == 3


class TestRomPipeline:
    def test_dpod_build_run_compare(self, fom_artifacts, tmp_path):
        tmp, cfg, out = fom_artifacts
        build_dir = str(tmp_path / "dpod")
        res = run_cli([
            "rom-build", "--config", cfg, "--reduction.method=dpod",
            "--reduction.m_u=4", "--reduction.m_d=2",
            f"--paths.snapshot_dir={out}", f"--paths.output_dir={build_dir}",
        ])
        assert res.returncode == 0, res.stderr
        assert os.path.exists(os.path.join(build_dir, "basis.hrsnap"))
        meta = json.load(open(os.path.join(build_dir, "basis.json")))
        assert meta["m_u"] == 4 and meta["m_d"] == 2
        assert meta["column_fields"] == ["u"] * 4 + ["d"] * 2

        run_dir = str(tmp_path / "dpod_run")
        res = run_cli([
            "rom-run", "--config", cfg, "--reduction.method=dpod",
            "--reduction.m_u=4", "--reduction.m_d=2",
            f"--paths.artifact_dir={build_dir}", f"--paths.output_dir={run_dir}",
            f"--paths.reference_record={out}/record.csv",
            f"--paths.reference_summary={out}/record_summary.json",
        ])
        assert res.returncode == 0, res.stderr
        comparison = json.load(open(os.path.join(run_dir, "comparison.json")))
        assert comparison["epsilon"] < 1e-2
        assert os.path.exists(os.path.join(run_dir, "comparison.png"))
        assert os.path.exists(os.path.join(run_dir, "rom_record.csv"))

    def test_3_snapshot_store_gives_3_columns(self, fom_artifacts, tmp_path):
        tmp, cfg, out = fom_artifacts
        # rebuild a 3-column store from the run's snapshots
        from hyperred.fom import SnapshotStore

        store = SnapshotStore.load(os.path.join(out, "snapshots_v.hrsnap"),
                                   os.path.join(out, "snapshots_r.hrsnap"))
        import dataclasses

        # the last three snapshots carry both fields (damage already active)
        small = dataclasses.replace(
            store,
            solution_snapshots=store.solution_snapshots[:, -3:],
            force_snapshots=store.force_snapshots[:, -3:],
        )
        from hyperred.dpod import attainable_ranks

        ranks = attainable_ranks(small)
        assert ranks[0] >= 2 and ranks[1] >= 1, "fixture run too shallow for this test"
        snap_dir = tmp_path / "snaps3"
        snap_dir.mkdir()
        small.save(snap_dir / "snapshots_v.hrsnap", snap_dir / "snapshots_r.hrsnap")
        build_dir = str(tmp_path / "b3")
        res = run_cli([
            "rom-build", "--config", cfg, "--reduction.method=dpod",
            "--reduction.m_u=2", "--reduction.m_d=1",
            f"--paths.snapshot_dir={snap_dir}", f"--paths.output_dir={build_dir}",
        ])
        assert res.returncode == 0, res.stderr
        from hyperred.io import read_matrix

        phi, _ = read_matrix(os.path.join(build_dir, "basis.hrsnap"))
        assert phi.shape[1] == 3

    def test_rank_failure_exit_code(self, tmp_path):
        # elastic snapshots have rank-0 nonlinear content: ddeim must exit 4
        material = dict(REFERENCE_MATERIAL, sigma0=1e9, y0=1e12)
        cfg = write_config(
            tmp_path, material=material,
            solver={"newton_tol": 1e-10, "max_newton_iters": 10,
                    "initial_arc_length": 2e-5, "min_arc_length": 2e-5,
                    "max_arc_length": 2e-5, "max_steps": 5},
            paths={"output_dir": str(tmp_path / "out")},
        )
        assert run_cli(["fom-run", "--config", cfg]).returncode == 0
        res = run_cli([
            "rom-build", "--config", cfg, "--reduction.method=ddeim",
            "--reduction.m_u=2", "--reduction.m_d=1",
            "--reduction.k_u=2", "--reduction.k_d=1",
            f"--paths.snapshot_dir={tmp_path / 'out'}",
            f"--paths.output_dir={tmp_path / 'deim'}",
        ])
        assert res.returncode == 4
        # over-truncation is a rank failure as well
        res = run_cli([
            "rom-build", "--config", cfg, "--reduction.method=dpod",
            "--reduction.m_u=500", "--reduction.m_d=1",
            f"--paths.snapshot_dir={tmp_path / 'out'}",
            f"--paths.output_dir={tmp_path / 'dpod'}",
        ])
        assert res.returncode == 4

    def test_decsw_build_writes_weights_json(self, fom_artifacts, tmp_path):
        tmp, cfg, out = fom_artifacts
        build_dir = str(tmp_path / "ecsw")
        res = run_cli([
            "rom-build", "--config", cfg, "--reduction.method=decsw",
            "--reduction.m_u=3", "--reduction.m_d=2", "--reduction.tau=1e-3",
            f"--paths.snapshot_dir={out}", f"--paths.output_dir={build_dir}",
        ])
        assert res.returncode == 0, res.stderr
        payload = json.load(open(os.path.join(build_dir, "weights.json")))
        assert set(payload) >= {"tau", "elements", "weights", "residual_ratio"}
        assert len(payload["elements"]) == len(payload["weights"])
        assert all(w > 0 for w in payload["weights"])


class TestCompareCommand:
    def test_compare_outputs(self, fom_artifacts, tmp_path):
        _, cfg, out = fom_artifacts
        cmp_dir = str(tmp_path / "cmp")
        res = run_cli([
            "compare", "--config", cfg,
            f"--compare.reference_record={out}/record.csv",
            f"--compare.candidate_record={out}/record.csv",
            "--compare.n_samples=200",
            f"--paths.output_dir={cmp_dir}",
        ])
        assert res.returncode == 0, res.stderr
        payload = json.load(open(os.path.join(cmp_dir, "comparison.json")))
        assert payload["epsilon"] == 0.0
        assert payload["N"] == 200
        assert os.path.exists(os.path.join(cmp_dir, "comparison.png"))


class TestDeterminism:
    @pytest.mark.parametrize("threads", ["1", "2"])
    def test_identical_runs_byte_identical(self, tmp_path, threads):
        outs = []
        for tag in ("a", "b"):
            out = str(tmp_path / f"det_{threads}_{tag}")
            cfg = write_config(tmp_path, name=f"det_{threads}_{tag}.json",
                               paths={"output_dir": out}, figures=False)
            res = run_cli(["fom-run", "--config", cfg],
                          env_extra={"HYPERRED_THREADS": threads})
            assert res.returncode == 0, res.stderr
            outs.append(out)
        a = mask_timing(open(os.path.join(outs[0], "record.csv")).read())
        b = mask_timing(open(os.path.join(outs[1], "record.csv")).read())
        assert a == b


class TestOptimizeCommand:
    def test_missing_section_is_usage_error(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run_cli(["optimize", "--config", cfg]).returncode == 2

    def test_unbracketed_target_is_solver_failure(self, tmp_path):
        # three seed runs execute, then the bracket precondition fails
        cfg = write_config(
            tmp_path,
            solver={"newton_tol": 1e-9, "max_newton_iters": 12,
                    "initial_arc_length": 0.008, "min_arc_length": 1e-6,
                    "max_arc_length": 0.02, "max_steps": 12,
                    "stop_after_peak_drop": 0.95},
            optimize={"target_limit_load": 99999.0, "bracket_lo": 4.6,
                      "bracket_hi": 5.4, "tol_width": 1e-3},
            paths={"output_dir": str(tmp_path / "opt")},
        )
        res = run_cli(["optimize", "--config", cfg])
        assert res.returncode == 3
