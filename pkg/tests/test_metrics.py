"""Curve error metric, cost ratios and timing breakdowns."""

import numpy as np
import pytest

from hyperred.metrics import CurveComparison, MetricsError, compare_runs, curve_error, timing_report


def rows_from(u, f):
    return [
        {"u_control_mm": float(ui), "F_reaction_N": float(fi),
         "t_assembly_s": 0.0, "t_solve_s": 0.0}
        for ui, fi in zip(u, f)
    ]


def dense_resampling_oracle(u_ref, f_ref, u_cand, f_cand, n_dense=1_000_000):
    """Mean relative error via very dense sampling of both polylines."""
    hi = min(u_ref[-1], u_cand[-1])
    x = np.linspace(hi / n_dense, hi, n_dense)
    fr = np.interp(x, [0.0, *u_ref], [0.0, *f_ref])
    fc = np.interp(x, [0.0, *u_cand], [0.0, *f_cand])
    keep = fr != 0.0
    return float(np.mean(np.abs(fr[keep] - fc[keep]) / np.abs(fr[keep])))


class TestCurveError:
    def test_identical_curves(self):
        u = np.linspace(0.01, 1.0, 30)
        f = 100.0 * np.sqrt(u)
        eps, excluded, backtrack = curve_error(rows_from(u, f), rows_from(u, f), 1000)
        assert eps == 0.0
        assert excluded == 0
        assert not backtrack

    def test_uniform_relative_offset(self):
        u = np.linspace(0.02, 2.0, 50)
        f = 10.0 + 90.0 * u
        eps, _, _ = curve_error(rows_from(u, f), rows_from(u, 1.01 * f), 1000)
        assert eps == pytest.approx(0.01, rel=1e-6)

    def test_matches_dense_resampling_oracle(self):
        u_ref = np.array([0.2, 0.5, 0.9, 1.4, 2.0])
        f_ref = np.array([5.0, 11.0, 14.0, 13.0, 12.5])
        u_cand = np.array([0.3, 0.8, 1.3, 1.9])
        f_cand = np.array([7.0, 13.2, 13.4, 12.2])
        eps, _, _ = curve_error(rows_from(u_ref, f_ref), rows_from(u_cand, f_cand), 1000)
        oracle = dense_resampling_oracle(u_ref, f_ref, u_cand, f_cand)
        assert eps == pytest.approx(oracle, abs=1e-4)

    def test_reparametrization_invariance(self):
        u = np.linspace(0.05, 1.0, 20)
        f = 50.0 * u * (2.0 - u)
        dense = np.linspace(0.05, 1.0, 153)
        f_dense = np.interp(dense, u, f)
        eps, _, _ = curve_error(rows_from(u, f), rows_from(dense, f_dense), 2000)
        assert eps < 1e-12  # same polyline, different step density

    def test_interval_is_shared_overlap(self):
        u_ref = np.linspace(0.1, 2.0, 40)
        f_ref = 100.0 * u_ref
        u_cand = np.linspace(0.1, 1.0, 40)  # candidate terminates early
        f_cand = 100.0 * u_cand
        eps, _, _ = curve_error(rows_from(u_ref, f_ref), rows_from(u_cand, f_cand), 500)
        assert eps < 1e-12

    def test_no_overlap_raises(self):
        with pytest.raises(MetricsError):
            curve_error(rows_from([0.0], [1.0]), rows_from([0.0], [1.0]), 10)

    def test_zero_reference_samples_excluded(self):
        u = np.linspace(0.0, 1.0, 11)
        f = np.concatenate([[0.0, 0.0, 0.0], np.linspace(1.0, 8.0, 8)])
        eps, excluded, _ = curve_error(rows_from(u, f), rows_from(u, f * 1.02), 100)
        assert excluded > 0
        assert eps == pytest.approx(0.02, rel=1e-6)

    def test_backtracking_first_crossing(self):
        # path advances to 1.0, backs up to 0.6, re-advances to 1.5
        u_ref = [0.5, 1.0, 0.6, 1.5]
        f_ref = [5.0, 10.0, 6.0, 14.0]
        candidate = rows_from([0.5, 1.0, 1.5], [5.0, 10.0, 14.0])
        eps, _, backtrack = curve_error(rows_from(u_ref, f_ref), candidate, 2000)
        assert backtrack
        # (0, 1] agrees exactly (first crossing wins); the re-advance
        # segment differs, so the overall error is strictly positive
        assert eps > 1e-4
        # restricting the comparison to the pre-backtrack interval matches
        eps_pre, _, _ = curve_error(
            rows_from(u_ref, f_ref),
            rows_from([0.5, 1.0], [5.0, 10.0]),
            2000,
        )
        assert eps_pre < 1e-12

    def test_sample_count_validation(self):
        with pytest.raises(MetricsError):
            curve_error(rows_from([0.1, 1.0], [1.0, 2.0]),
                        rows_from([0.1, 1.0], [1.0, 2.0]), 0)


class TestCompareRuns:
    def test_ratios_from_summaries(self):
        u = np.linspace(0.1, 1.0, 10)
        f = 10.0 * u
        ref_summary = {"t_assembly_s": 8.0, "t_solve_s": 2.0,
                       "n_element_evals": 1000, "n_newton_iters": 10}
        cand_summary = {"t_assembly_s": 1.5, "t_solve_s": 0.5,
                        "n_element_evals": 150, "n_newton_iters": 10}
        cmp = compare_runs(rows_from(u, f), rows_from(u, f),
                           n_samples=100,
                           reference_summary=ref_summary,
                           candidate_summary=cand_summary)
        assert isinstance(cmp, CurveComparison)
        assert cmp.time_ratio == pytest.approx(0.2)
        assert cmp.element_fraction == pytest.approx(0.15)
        payload = cmp.to_json_dict()
        assert set(payload) == {"epsilon", "N", "time_ratio", "element_fraction",
                                "excluded_samples", "backtracking_detected"}


class TestTimingReport:
    def test_all_assembly(self):
        rows = [{"t_assembly_s": 1.0, "t_solve_s": 0.0} for _ in range(3)]
        rep = timing_report(rows)
        assert rep["solve_share"] == 0.0
        assert rep["assembly_share"] == 1.0
        assert not rep["clock_skew_flagged"]

    def test_two_phase_sum(self):
        rows = [{"t_assembly_s": 0.6, "t_solve_s": 0.4},
                {"t_assembly_s": 1.0, "t_solve_s": 0.5}]
        rep = timing_report(rows)
        assert rep["t_total_s"] == pytest.approx(2.5)
        assert rep["assembly_share"] + rep["solve_share"] == pytest.approx(1.0)

    def test_clock_skew_flagged(self):
        rows = [{"t_assembly_s": -0.1, "t_solve_s": 0.2}]
        assert timing_report(rows)["clock_skew_flagged"]
