"""Constitutive model: energies, return mapping, KKT, consistent tangents."""

import numpy as np
import pytest

from conftest import REFERENCE_MATERIAL, random_block_spd
from hyperred.material import (
    GaussPointState,
    MaterialDomainError,
    MaterialParams,
    StateBatch,
    energy_damage,
    energy_elastic,
    energy_micromorphic,
    energy_plastic,
    stress_update,
    update_batch,
    weakening,
)

KKT_TOL = 1e-8


def scalar_energy_oracle(c, lam, mu):
    """Direct transcription of the hyperelastic energy from eigenvalues."""
    ev = np.linalg.eigvalsh(c)
    tr = float(ev.sum())
    det = float(np.prod(ev))
    return 0.5 * mu * (tr - 3.0 - np.log(det)) + 0.25 * lam * (det - 1.0 - np.log(det))


class TestEnergies:
    def test_elastic_reference_is_zero(self, params):
        assert energy_elastic(np.eye(3), params) == 0.0

    def test_elastic_against_scalar_oracle(self, params):
        c = np.diag([1.21, 1.0 / 1.1**2, 1.0])
        val = energy_elastic(c, params)
        assert val == pytest.approx(
            scalar_energy_oracle(c, params.lambda_lame, params.mu), rel=1e-12
        )

    def test_elastic_vanishing_moduli(self):
        p = MaterialParams(**{**REFERENCE_MATERIAL, "mu": 1e-12, "lambda_lame": 1e-12})
        c = np.diag([1.3, 0.9, 1.05])
        assert abs(energy_elastic(c, p)) < 1e-11

    def test_elastic_rejects_non_spd(self, params):
        with pytest.raises(MaterialDomainError):
            energy_elastic(np.diag([1.0, -0.5, 1.0]), params)

    def test_plastic_reference_is_zero(self, params):
        assert energy_plastic(np.eye(3), 0.0, params) == 0.0

    def test_plastic_isotropic_asymptote(self, params):
        xi = 200.0
        val = energy_plastic(np.eye(3), xi, params)
        asym = params.e_iso * (xi - 1.0 / params.f_iso)
        assert val == pytest.approx(asym, rel=1e-9)

    def test_plastic_against_scalar_oracle(self, params):
        rng = np.random.default_rng(5)
        c = random_block_spd(rng, 0.1)
        xi = 0.4
        kin = scalar_energy_oracle(c, 0.0, params.a_kin)
        iso = params.e_iso * (xi + (np.exp(-params.f_iso * xi) - 1.0) / params.f_iso)
        assert energy_plastic(c, xi, params) == pytest.approx(kin + iso, rel=1e-12)

    def test_plastic_rejects_negative_hardening(self, params):
        with pytest.raises(MaterialDomainError):
            energy_plastic(np.eye(3), -0.1, params)

    def test_damage_energy(self, params):
        assert energy_damage(0.0, params) == 0.0
        xi = 0.37
        expect = params.r_dam * (xi + (np.exp(-params.s_dam * xi) - 1.0) / params.s_dam)
        assert energy_damage(xi, params) == pytest.approx(expect, rel=1e-12)

    def test_micromorphic_energy(self, params):
        assert energy_micromorphic(0.2, 0.2, np.zeros(2), params) == 0.0
        g = np.array([0.3, -0.1])
        val = energy_micromorphic(0.3, 0.2, g, params)
        expect = 0.5 * params.h_pen * 0.01 + 0.5 * params.a_grad * float(g @ g)
        assert val == pytest.approx(expect, rel=1e-12)


class TestWeakening:
    def test_reference_values(self):
        w, wp, wpp = weakening(0.0)
        assert (w, wp, wpp) == (1.0, -2.0, 2.0)
        assert weakening(0.5)[0] == 0.25

    def test_monotone_decreasing(self):
        for kind in ("quadratic", "cubic"):
            d = np.linspace(0.0, 0.99, 50)
            _, wp, _ = weakening(d, kind)
            assert np.all(wp <= 0.0)

    def test_derivatives_match_finite_differences(self):
        h = 1e-6
        for kind in ("quadratic", "cubic"):
            w0, wp, wpp = weakening(0.3, kind)
            wp_fd = (weakening(0.3 + h, kind)[0] - weakening(0.3 - h, kind)[0]) / (2 * h)
            wpp_fd = (weakening(0.3 + h, kind)[1] - weakening(0.3 - h, kind)[1]) / (2 * h)
            assert wp == pytest.approx(wp_fd, rel=1e-6)
            assert wpp == pytest.approx(wpp_fd, rel=1e-6)

    def test_domain(self):
        with pytest.raises(MaterialDomainError):
            weakening(1.0)
        with pytest.raises(MaterialDomainError):
            weakening(-0.01)


class TestStressUpdate:
    def test_virgin_reference_state(self, params):
        out = stress_update(np.eye(3), 0.0, np.zeros(2), GaussPointState(), params)
        assert np.abs(out.s).max() == 0.0
        assert out.dlam_p == 0.0 and out.dlam_d == 0.0
        assert out.a0 == 0.0
        assert np.array_equal(out.b0, np.zeros(2))

    def test_micromorphic_source_sign(self, params):
        # tiny dbar below the damage threshold: a0 = -H (D - dbar) = +H dbar
        dbar = 1e-5
        out = stress_update(np.eye(3), dbar, np.array([0.01, 0.0]), GaussPointState(), params)
        assert out.dlam_d == 0.0
        assert out.a0 == pytest.approx(params.h_pen * dbar, rel=1e-12)
        assert np.allclose(out.b0, params.a_grad * np.array([0.01, 0.0]))

    def test_small_strain_elastic_limit(self, params):
        eps = 1e-4
        c = np.diag([1.0, (1.0 + eps) ** 2, 1.0])
        out = stress_update(c, 0.0, np.zeros(2), GaussPointState(), params)
        s_lin = params.lambda_lame * eps * np.eye(3)
        s_lin[1, 1] += 2.0 * params.mu * eps
        err = np.abs(np.diag(out.s) - np.diag(s_lin)).max() / np.abs(s_lin).max()
        assert err < 1e-3  # 0.1 percent

    def test_monotone_stretch_past_yield(self, params):
        # just past yield the stored energy stays below the damage threshold
        c = np.diag([1.0, 1.004**2, 1.0])
        out = stress_update(c, 0.0, np.zeros(2), GaussPointState(), params)
        assert out.new_state.xi_p > 0.0
        assert abs(out.phi_p) < KKT_TOL * params.sigma0
        assert out.new_state.damage == 0.0
        assert out.phi_d < 0.0

    def test_plastic_incompressibility(self, params):
        out = stress_update(np.diag([1.0, 1.05**2, 1.0]), 0.0, np.zeros(2),
                            GaussPointState(), params)
        assert np.linalg.det(out.new_state.cp) == pytest.approx(1.0, abs=1e-10)
        assert np.linalg.det(out.new_state.cpi) == pytest.approx(1.0, abs=1e-10)

    def test_two_surface_activation(self, params):
        out = stress_update(np.diag([1.0, 1.1**2, 1.0]), 0.0, np.zeros(2),
                            GaussPointState(), params)
        assert out.dlam_p > 0.0 and out.dlam_d > 0.0
        assert abs(out.phi_p) < KKT_TOL * params.sigma0
        assert abs(out.phi_d) < KKT_TOL * max(params.y0, 1.0)

    def test_elastic_unload_idempotent(self, params):
        c = np.diag([1.0, 1.03**2, 1.0])
        first = stress_update(c, 0.0, np.zeros(2), GaussPointState(), params)
        second = stress_update(c, 0.0, np.zeros(2), first.new_state, params)
        assert second.dlam_p == 0.0 and second.dlam_d == 0.0
        assert np.array_equal(second.new_state.cp, first.new_state.cp)
        assert np.array_equal(second.s, first.s)

    def test_rate_independence(self, params):
        c = np.diag([1.0, 1.04**2, 1.0])
        a = stress_update(c, 0.0, np.zeros(2), GaussPointState(), params, dt_pseudo=1.0)
        b = stress_update(c, 0.0, np.zeros(2), GaussPointState(), params, dt_pseudo=1e-3)
        assert np.array_equal(a.s, b.s)

    def test_damage_disabled_equals_pure_plasticity(self):
        base = MaterialParams(**REFERENCE_MATERIAL)
        nodamage = MaterialParams(**{**REFERENCE_MATERIAL, "y0": 1e12})
        c = np.diag([1.0, 1.004**2, 1.0])
        a = stress_update(c, 0.0, np.zeros(2), GaussPointState(), base)
        b = stress_update(c, 0.0, np.zeros(2), GaussPointState(), nodamage)
        # below the damage threshold both parameter sets follow bit-identical paths
        assert a.new_state.damage == 0.0
        assert np.array_equal(a.s, b.s)
        assert np.array_equal(a.new_state.cp, b.new_state.cp)

    def test_damage_cap_flagged(self, params):
        # extreme stretch with the nonlocal field near unity drives D to the cap
        out = stress_update(np.diag([1.0, 1.2**2, 1.0]), 0.9999, np.zeros(2),
                            GaussPointState(), params)
        assert out.capped
        assert out.new_state.damage == pytest.approx(0.999)

    def test_domain_errors(self, params):
        with pytest.raises(MaterialDomainError):
            stress_update(np.diag([1.0, -1.0, 1.0]), 0.0, np.zeros(2),
                          GaussPointState(), params)
        with pytest.raises(MaterialDomainError):
            stress_update(np.eye(3), -0.1, np.zeros(2), GaussPointState(), params)
        bad = GaussPointState(damage=1.5)
        with pytest.raises(MaterialDomainError):
            stress_update(np.eye(3), 0.0, np.zeros(2), bad, params)


def random_paths_kkt(params, n_paths: int, n_steps: int, seed: int):
    """Drive a batch of random strain paths; check KKT at every update."""
    rng = np.random.default_rng(seed)
    states = StateBatch.virgin(n_paths)
    c3 = np.tile([1.0, 1.0, 0.0], (n_paths, 1))
    czz = np.ones(n_paths)
    dbar = np.zeros(n_paths)
    for _ in range(n_steps):
        c3 += rng.standard_normal((n_paths, 3)) * [0.012, 0.012, 0.006]
        czz *= 1.0 + 0.004 * rng.standard_normal(n_paths)
        dbar = np.abs(dbar + 0.01 * rng.standard_normal(n_paths))
        out = update_batch(c3, czz, dbar, states, params)
        yield out
        states = out.state


class TestDiscreteKkt:
    def test_randomized_paths(self, params):
        sig_tol = KKT_TOL * params.sigma0
        dam_tol = KKT_TOL * max(params.y0, 1.0)
        saw_plastic = saw_damage = False
        for out in random_paths_kkt(params, 50, 6, seed=101):
            ok = ~out.capped
            assert np.all(out.dlam_p >= 0.0)
            assert np.all(out.dlam_d >= 0.0)
            assert np.all(out.phi_p <= sig_tol)
            assert np.all(out.phi_d[ok] <= dam_tol)
            assert np.all(np.abs(out.dlam_p * out.phi_p) <= sig_tol)
            assert np.all(np.abs(out.dlam_d[ok] * out.phi_d[ok]) <= dam_tol)
            saw_plastic |= bool(np.any(out.dlam_p > 0.0))
            saw_damage |= bool(np.any(out.dlam_d > 0.0))
        assert saw_plastic and saw_damage

    def test_internal_variables_monotone(self, params):
        prev = None
        for out in random_paths_kkt(params, 30, 5, seed=7):
            if prev is not None:
                assert np.all(out.state.xi_p >= prev.xi_p - 1e-14)
                assert np.all(out.state.damage >= prev.damage - 1e-14)
                assert np.all(out.state.xi_d >= prev.xi_d - 1e-14)
            prev = out.state


class TestConsistentTangent:
    def fd_tangent_error(self, params, c3, dbar, states, h=1e-7):
        base = update_batch(c3, np.ones(c3.shape[0]), dbar, states, params)
        scale = max(1.0, np.abs(base.ds_dc).max())
        worst = 0.0
        for k in range(3):
            cp = c3.copy()
            cp[:, k] += h
            cm = c3.copy()
            cm[:, k] -= h
            sp = update_batch(cp, np.ones(c3.shape[0]), dbar, states, params, need_tangent=False)
            sm = update_batch(cm, np.ones(c3.shape[0]), dbar, states, params, need_tangent=False)
            fd = (sp.s3 - sm.s3) / (2 * h)
            worst = max(worst, np.abs(fd - base.ds_dc[:, :, k]).max() / scale)
            fd_d = (sp.damage - sm.damage) / (2 * h)
            worst = max(worst, np.abs(fd_d - base.dd_dc[:, k]).max() / max(1.0, np.abs(base.dd_dc).max()))
        dp = update_batch(c3, np.ones(c3.shape[0]), dbar + h, states, params, need_tangent=False)
        dm = update_batch(c3, np.ones(c3.shape[0]), dbar - h, states, params, need_tangent=False)
        fd = (dp.s3 - dm.s3) / (2 * h)
        worst = max(worst, np.abs(fd - base.ds_ddbar).max() / scale)
        return worst

    def test_tangents_match_finite_differences(self, params):
        # 100 randomized states covering elastic, plastic and damaging branches
        rng = np.random.default_rng(211)
        states = StateBatch.virgin(100)
        c3 = np.tile([1.0, 1.0, 0.0], (100, 1)) + rng.standard_normal((100, 3)) * [0.03, 0.03, 0.015]
        dbar = np.abs(0.005 * rng.standard_normal(100))
        pre = update_batch(c3, np.ones(100), dbar, states, params)
        states = pre.state  # converged (committed) reference states
        c3b = c3 * (1.0 + 0.002 * rng.standard_normal((100, 3)))
        err = self.fd_tangent_error(params, c3b, dbar, states)
        assert err < 1e-4

    def test_generalized_stress_tangents(self, params):
        c = np.diag([1.0, 1.06**2, 1.0])
        out = stress_update(c, 0.02, np.zeros(2), GaussPointState(), params)
        h = 1e-7
        up = stress_update(c, 0.02 + h, np.zeros(2), GaussPointState(), params)
        dn = stress_update(c, 0.02 - h, np.zeros(2), GaussPointState(), params)
        fd = (up.a0 - dn.a0) / (2 * h)
        assert out.da0_ddbar == pytest.approx(fd, rel=1e-5)
