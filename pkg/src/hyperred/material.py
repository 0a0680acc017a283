"""Gradient-extended two-surface damage-plasticity at a Gauss point.

Finite-strain model with multiplicative elastoplasticity, Armstrong-
Frederick kinematic hardening, Voce isotropic hardening, Voce damage
hardening, and a micromorphic (penalty-coupled) nonlocal damage field.
Free energy::

    psi = w(D) * (psi_e(C_e) + psi_p(C_pe, xi_p)) + psi_d(xi_d)
          + H/2 (D - dbar)^2 + A/2 grad(dbar).grad(dbar)

with a twice-differentiable, monotonically decreasing weakening function
``w`` (default ``(1 - D)**2``).  Yielding is driven by the effective
(undamaged) Mandel-type stress, damage by the energy release rate
``Y = -w'(D) (psi_e + psi_p) - H (D - dbar)``; both surfaces carry their
own multiplier and discrete KKT conditions.

Kinematic restriction: this build is 2D plane strain.  All tensors are
block-diagonal [[2x2 in-plane, 0], [0, zz]]; the out-of-plane normal
components are carried exactly (deviatoric plastic flow pushes into zz),
the in-plane/out-of-plane shears are identically zero.

Integration: implicit backward Euler with exponential-map updates of both
plastic metrics.  The flow exponents are trace-free, so plastic volume is
preserved up to the (higher-order small) symmetrization remainder, and
positive definiteness is inherited from the previous state.  Because the
effective driving stress contains no damage factor, the update splits
exactly: a coupled Newton on (C_p, C_pi, dxi_p) followed by a scalar
Newton on the damage consistency equation.  Consistent tangents come from
the implicit-function theorem with complex-step partial derivatives, so
they are exact to machine precision.

The batched entry point (:func:`update_batch`) vectorizes over an array
of Gauss points; :func:`stress_update` is the single-point wrapper.  Both
are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_CSTEP = 1e-20  # complex-step size; derivatives are exact to machine precision
_SQ32 = np.sqrt(1.5)

LOCAL_TOL = 1e-10  # scaled residual tolerance of the local solves
LOCAL_MAX_ITER = 50
ACTIVATION_TOL = 1e-9  # scaled trial threshold; above the solve tol so re-updates stay elastic
DAMAGE_CAP = 0.999


class MaterialDomainError(ValueError):
    """Input outside the constitutive model's domain."""


class LocalSolveError(RuntimeError):
    """Gauss-point return mapping failed to converge.

    ``residual_history`` carries the worst scaled residual per iteration,
    ``indices`` the offending batch slots (callers map them to element /
    Gauss-point ids and may cut the global step).
    """

    def __init__(self, message: str, residual_history: list[float], indices: np.ndarray):
        super().__init__(message)
        self.residual_history = residual_history
        self.indices = np.asarray(indices)


# ---------------------------------------------------------------------------
# parameters and weakening functions
# ---------------------------------------------------------------------------

WEAKENING_KINDS = ("quadratic", "cubic")


def _weakening_raw(d, kind: str):
    one = 1.0 - d
    if kind == "quadratic":
        return one**2, -2.0 * one, 2.0 * np.ones_like(d)
    if kind == "cubic":
        return one**3, -3.0 * one**2, 6.0 * one
    raise MaterialDomainError(f"unknown weakening kind '{kind}' (choose from {WEAKENING_KINDS})")


def weakening(d, kind: str = "quadratic"):
    """Weakening function ``w(D)`` with first and second derivatives.

    Both options are twice differentiable, monotonically decreasing on
    [0, 1) and equal 1 at D = 0.  Scalar or array input.
    """
    d_arr = np.asarray(d, dtype=float)
    if np.any((d_arr < 0.0) | (d_arr >= 1.0)):
        raise MaterialDomainError("damage must lie in [0, 1)")
    vals = _weakening_raw(d_arr, kind)
    if np.isscalar(d):
        return tuple(float(v) for v in vals)
    return vals


@dataclass(frozen=True)
class MaterialParams:
    """The twelve constitutive parameters (MPa / mm units).

    ``b_kin`` (dimensionless kinematic-hardening recall) has no published
    reference value for this parameter set; configs must state it
    explicitly.  ``weakening_kind`` selects ``w(D)``; the quadratic
    default is a standard choice, not a calibrated one.
    """

    lambda_lame: float  # first Lame parameter [MPa]
    mu: float  # shear modulus [MPa]
    sigma0: float  # initial yield stress [MPa]
    a_kin: float  # kinematic hardening modulus [MPa]
    b_kin: float  # kinematic hardening recall [-]
    e_iso: float  # isotropic hardening modulus [MPa]
    f_iso: float  # isotropic hardening saturation rate [-]
    y0: float  # damage threshold [MPa]
    r_dam: float  # damage hardening modulus [MPa]
    s_dam: float  # damage hardening saturation rate [-]
    a_grad: float  # gradient stiffness [MPa mm^2]
    h_pen: float  # micromorphic penalty [MPa]
    weakening_kind: str = "quadratic"

    def __post_init__(self) -> None:
        for name in ("lambda_lame", "mu", "sigma0", "a_kin", "b_kin", "e_iso",
                     "f_iso", "y0", "r_dam", "s_dam", "a_grad", "h_pen"):
            if not getattr(self, name) > 0.0:
                raise MaterialDomainError(f"material parameter '{name}' must be strictly positive")
        if not np.isfinite(self.internal_length):
            raise MaterialDomainError("internal length sqrt(a_grad / h_pen) must be finite")
        if self.weakening_kind not in WEAKENING_KINDS:
            raise MaterialDomainError(f"unknown weakening kind '{self.weakening_kind}'")

    @property
    def internal_length(self) -> float:
        """Localization limiter length sqrt(a_grad / h_pen) [mm]."""
        return float(np.sqrt(self.a_grad / self.h_pen))

    def weakening(self, d):
        return weakening(d, self.weakening_kind)


# ---------------------------------------------------------------------------
# state containers
# ---------------------------------------------------------------------------


def _check_block_spd(t: np.ndarray, name: str) -> None:
    t = np.asarray(t, dtype=float)
    if t.shape != (3, 3) or not np.allclose(t, t.T, atol=1e-10):
        raise MaterialDomainError(f"{name} must be a symmetric 3x3 matrix")
    if abs(t[0, 2]) > 1e-12 or abs(t[1, 2]) > 1e-12:
        raise MaterialDomainError(f"{name} must be plane-strain block-diagonal (zero 13/23 entries)")
    if np.linalg.eigvalsh(t).min() <= 0.0:
        raise MaterialDomainError(f"{name} must be symmetric positive definite")


@dataclass
class GaussPointState:
    """Internal variables at one integration point.

    ``cp``/``cpi`` are the plastic and irrecoverable-plastic metrics
    (symmetric positive definite, plane-strain block structure), ``xi_p``
    the accumulated plastic strain, ``damage`` the local damage in
    [0, 1), ``xi_d`` the damage hardening variable.  All of them are
    monotone non-decreasing across committed updates.
    """

    cp: np.ndarray = field(default_factory=lambda: np.eye(3))
    cpi: np.ndarray = field(default_factory=lambda: np.eye(3))
    xi_p: float = 0.0
    damage: float = 0.0
    xi_d: float = 0.0

    def validate(self) -> None:
        _check_block_spd(self.cp, "cp")
        _check_block_spd(self.cpi, "cpi")
        if self.xi_p < 0.0 or self.xi_d < 0.0:
            raise MaterialDomainError("hardening variables must be non-negative")
        if not 0.0 <= self.damage < 1.0:
            raise MaterialDomainError("damage must lie in [0, 1)")


def _sym4_from_mat(t: np.ndarray) -> np.ndarray:
    return np.array([t[0, 0], t[1, 1], t[0, 1], t[2, 2]], dtype=float)


def _mat_from_sym4(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[v[0], v[2], 0.0], [v[2], v[1], 0.0], [0.0, 0.0, v[3]]], dtype=float
    )


class StateBatch:
    """Struct-of-arrays Gauss-point state for the vectorized kernels.

    Packing per symmetric block tensor: ``[xx, yy, xy, zz]``.
    """

    __slots__ = ("cp", "cpi", "xi_p", "damage", "xi_d")

    def __init__(self, cp, cpi, xi_p, damage, xi_d):
        self.cp = cp
        self.cpi = cpi
        self.xi_p = xi_p
        self.damage = damage
        self.xi_d = xi_d

    @classmethod
    def virgin(cls, n: int) -> "StateBatch":
        ident = np.zeros((n, 4))
        ident[:, 0] = ident[:, 1] = ident[:, 3] = 1.0
        return cls(ident, ident.copy(), np.zeros(n), np.zeros(n), np.zeros(n))

    @classmethod
    def from_states(cls, states: list[GaussPointState]) -> "StateBatch":
        cp = np.stack([_sym4_from_mat(s.cp) for s in states])
        cpi = np.stack([_sym4_from_mat(s.cpi) for s in states])
        return cls(
            cp,
            cpi,
            np.array([s.xi_p for s in states], dtype=float),
            np.array([s.damage for s in states], dtype=float),
            np.array([s.xi_d for s in states], dtype=float),
        )

    def state(self, i: int) -> GaussPointState:
        return GaussPointState(
            cp=_mat_from_sym4(self.cp[i]),
            cpi=_mat_from_sym4(self.cpi[i]),
            xi_p=float(self.xi_p[i]),
            damage=float(self.damage[i]),
            xi_d=float(self.xi_d[i]),
        )

    def copy(self) -> "StateBatch":
        return StateBatch(
            self.cp.copy(), self.cpi.copy(), self.xi_p.copy(), self.damage.copy(), self.xi_d.copy()
        )

    def gather(self, idx: np.ndarray) -> "StateBatch":
        return StateBatch(
            self.cp[idx], self.cpi[idx], self.xi_p[idx], self.damage[idx], self.xi_d[idx]
        )

    def scatter_from(self, idx: np.ndarray, other: "StateBatch") -> None:
        self.cp[idx] = other.cp
        self.cpi[idx] = other.cpi
        self.xi_p[idx] = other.xi_p
        self.damage[idx] = other.damage
        self.xi_d[idx] = other.xi_d

    def __len__(self) -> int:
        return self.xi_p.shape[0]


# ---------------------------------------------------------------------------
# energies (undamaged / effective parts)
# ---------------------------------------------------------------------------


def _tr_det_sym(c: np.ndarray) -> tuple[float, float]:
    c = np.asarray(c, dtype=float)
    if c.shape != (3, 3) or not np.allclose(c, c.T, atol=1e-10):
        raise MaterialDomainError("expected a symmetric 3x3 matrix")
    eig = np.linalg.eigvalsh(c)
    if eig.min() <= 0.0:
        raise MaterialDomainError("expected a symmetric positive definite matrix")
    return float(np.trace(c)), float(np.prod(eig))


def energy_elastic(c_e: np.ndarray, params: MaterialParams) -> float:
    """Compressible Neo-Hookean energy of the elastic metric [MPa]."""
    tr, det = _tr_det_sym(c_e)
    logdet = float(np.log(det))
    return 0.5 * params.mu * (tr - 3.0 - logdet) + 0.25 * params.lambda_lame * (det - 1.0 - logdet)


def energy_plastic(c_pe: np.ndarray, xi_p: float, params: MaterialParams) -> float:
    """Kinematic (Neo-Hookean in C_pe) plus Voce isotropic hardening energy."""
    if xi_p < 0.0:
        raise MaterialDomainError("xi_p must be non-negative")
    tr, det = _tr_det_sym(c_pe)
    logdet = float(np.log(det))
    kin = 0.5 * params.a_kin * (tr - 3.0 - logdet)
    iso = params.e_iso * (xi_p + (np.exp(-params.f_iso * xi_p) - 1.0) / params.f_iso)
    return kin + float(iso)


def energy_damage(xi_d: float, params: MaterialParams) -> float:
    """Voce damage hardening energy [MPa]."""
    if xi_d < 0.0:
        raise MaterialDomainError("xi_d must be non-negative")
    return float(params.r_dam * (xi_d + (np.exp(-params.s_dam * xi_d) - 1.0) / params.s_dam))


def energy_micromorphic(d: float, dbar: float, grad_dbar: np.ndarray, params: MaterialParams) -> float:
    """Penalty coupling plus gradient energy of the nonlocal field [MPa]."""
    g = np.asarray(grad_dbar, dtype=float).reshape(-1)
    return float(0.5 * params.h_pen * (d - dbar) ** 2 + 0.5 * params.a_grad * (g @ g))


# ---------------------------------------------------------------------------
# block-tensor helpers (dtype generic so complex-step differentiation works)
# ---------------------------------------------------------------------------


def _unpack(v):
    """sym4 (..., 4) -> in-plane (..., 2, 2) and zz (...,)."""
    t2 = np.empty(v.shape[:-1] + (2, 2), dtype=v.dtype)
    t2[..., 0, 0] = v[..., 0]
    t2[..., 1, 1] = v[..., 1]
    t2[..., 0, 1] = v[..., 2]
    t2[..., 1, 0] = v[..., 2]
    return t2, v[..., 3]


def _det2(t2):
    return t2[..., 0, 0] * t2[..., 1, 1] - t2[..., 0, 1] * t2[..., 1, 0]


def _inv2(t2):
    det = _det2(t2)
    out = np.empty_like(t2)
    out[..., 0, 0] = t2[..., 1, 1]
    out[..., 1, 1] = t2[..., 0, 0]
    out[..., 0, 1] = -t2[..., 0, 1]
    out[..., 1, 0] = -t2[..., 1, 0]
    return out / det[..., None, None], det


def _mm2(a2, b2):
    return np.einsum("...ij,...jk->...ik", a2, b2)


def _exp_block(a2, azz):
    """Matrix exponential of a block tensor (closed form for the 2x2).

    Trace/deviator split: for the trace-free part N of the 2x2 block,
    N^2 = q2 * I with q2 = -det(N), so
    exp = e^(tr/2) (cosh(sqrt(q2)) I + sinh(sqrt(q2))/sqrt(q2) N).
    Both coefficient functions are entire in q2, which keeps the formula
    valid for negative q2 (trigonometric regime) and for complex-step
    perturbed inputs.
    """
    alpha = 0.5 * (a2[..., 0, 0] + a2[..., 1, 1])
    n2 = a2.copy()
    n2[..., 0, 0] -= alpha
    n2[..., 1, 1] -= alpha
    q2 = -_det2(n2)

    qc = q2.astype(complex)
    small = np.abs(qc) < 1e-12
    s = np.sqrt(np.where(small, 1.0, qc))
    c0 = np.where(small, 1.0 + qc / 2.0 + qc * qc / 24.0, np.cosh(s))
    c1 = np.where(small, 1.0 + qc / 6.0 + qc * qc / 120.0, np.sinh(s) / s)
    if not np.iscomplexobj(a2):
        c0 = c0.real
        c1 = c1.real

    eye = np.zeros_like(a2)
    eye[..., 0, 0] = 1.0
    eye[..., 1, 1] = 1.0
    scale = np.exp(alpha)[..., None, None]
    return scale * (c0[..., None, None] * eye + c1[..., None, None] * n2), np.exp(azz)


def _effective_driving(c2, czz, cp2, cpzz, cpi2, cpizz, p: MaterialParams):
    """Effective Mandel-type driving stress: deviator, norm, kinematic part.

    Returns ``(dev2, dev_zz, frobenius_norm, kin_dev2, kin_dev_zz,
    det_ce)``.  Every damage factor cancels out of the effective
    quantities, which is what decouples the plastic solve from the damage
    update.
    """
    cpinv2, detcp2 = _inv2(cp2)
    cpiinv2, _ = _inv2(cpi2)
    det_ce = (_det2(c2) * czz) / (detcp2 * cpzz)

    ccp2 = _mm2(c2, cpinv2)
    ccp_zz = czz / cpzz
    cpcpi2 = _mm2(cp2, cpiinv2)
    cpcpi_zz = cpzz / cpizz

    scal = p.a_kin - p.mu + 0.5 * p.lambda_lame * (det_ce - 1.0)
    y2 = p.mu * ccp2 - p.a_kin * cpcpi2
    y2[..., 0, 0] += scal
    y2[..., 1, 1] += scal
    yzz = p.mu * ccp_zz - p.a_kin * cpcpi_zz + scal

    tr = (y2[..., 0, 0] + y2[..., 1, 1] + yzz) / 3.0
    yd2 = y2.copy()
    yd2[..., 0, 0] -= tr
    yd2[..., 1, 1] -= tr
    ydzz = yzz - tr

    nrm = np.sqrt(np.einsum("...ij,...ij->...", yd2, yd2) + ydzz * ydzz)

    yk2 = p.a_kin * (cpcpi2)
    ykzz = p.a_kin * cpcpi_zz
    trk = (yk2[..., 0, 0] + yk2[..., 1, 1] + ykzz - 3.0 * p.a_kin) / 3.0
    ykd2 = yk2.copy()
    ykd2[..., 0, 0] -= p.a_kin + trk
    ykd2[..., 1, 1] -= p.a_kin + trk
    ykdzz = ykzz - p.a_kin - trk
    return yd2, ydzz, nrm, ykd2, ykdzz, det_ce


def _iso_hardening(xi_p, p: MaterialParams):
    return p.e_iso * (1.0 - np.exp(-p.f_iso * xi_p))


def _plastic_residual(z, cpn2, cpnzz, cpin2, cpinzz, xi_p_n, c2, czz, p: MaterialParams):
    """Residual of the coupled plastic update, shape (..., 9).

    Unknowns z: ``[cp_xx, cp_yy, cp_xy, cp_zz, cpi_xx, cpi_yy, cpi_xy,
    cpi_zz, dxi]``.  Rows 0-7 are the symmetrized exponential-map updates
    of the two plastic metrics; row 8 is the yield consistency scaled by
    the initial yield stress.
    """
    cp2, cpzz = _unpack(z[..., 0:4])
    cpi2, cpizz = _unpack(z[..., 4:8])
    dxi = z[..., 8]

    yd2, ydzz, nrm, ykd2, ykdzz, _ = _effective_driving(c2, czz, cp2, cpzz, cpi2, cpizz, p)

    coef_p = 2.0 * _SQ32 * dxi / nrm
    ap2 = coef_p[..., None, None] * yd2
    apzz = coef_p * ydzz
    coef_i = 2.0 * dxi * (p.b_kin / p.a_kin)
    api2 = coef_i[..., None, None] * ykd2
    apizz = coef_i * ykdzz

    ep2, epzz = _exp_block(ap2, apzz)
    ei2, eizz = _exp_block(api2, apizz)
    new_cp2 = _mm2(ep2, cpn2)
    new_cpi2 = _mm2(ei2, cpin2)

    res = np.empty_like(z)
    res[..., 0] = cp2[..., 0, 0] - new_cp2[..., 0, 0]
    res[..., 1] = cp2[..., 1, 1] - new_cp2[..., 1, 1]
    res[..., 2] = cp2[..., 0, 1] - 0.5 * (new_cp2[..., 0, 1] + new_cp2[..., 1, 0])
    res[..., 3] = cpzz - epzz * cpnzz
    res[..., 4] = cpi2[..., 0, 0] - new_cpi2[..., 0, 0]
    res[..., 5] = cpi2[..., 1, 1] - new_cpi2[..., 1, 1]
    res[..., 6] = cpi2[..., 0, 1] - 0.5 * (new_cpi2[..., 0, 1] + new_cpi2[..., 1, 0])
    res[..., 7] = cpizz - eizz * cpinzz
    res[..., 8] = (_SQ32 * nrm - (p.sigma0 + _iso_hardening(xi_p_n + dxi, p))) / p.sigma0
    return res


def _eff_stress(c3, czz, cp4, p: MaterialParams):
    """Effective second Piola-Kirchhoff stress, packed ``[xx, yy, xy, zz]``."""
    c2, czz_ = _unpack(np.concatenate([c3, np.asarray(czz)[..., None]], axis=-1))
    cp2, cpzz = _unpack(cp4)
    cinv2, detc2 = _inv2(c2)
    cpinv2, detcp2 = _inv2(cp2)
    det_ce = (detc2 * czz_) / (detcp2 * cpzz)
    fac = 0.5 * p.lambda_lame * (det_ce - 1.0)
    s2 = p.mu * (cpinv2 - cinv2) + fac[..., None, None] * cinv2
    szz = p.mu * (1.0 / cpzz - 1.0 / czz_) + fac / czz_
    out = np.empty(s2.shape[:-2] + (4,), dtype=s2.dtype)
    out[..., 0] = s2[..., 0, 0]
    out[..., 1] = s2[..., 1, 1]
    out[..., 2] = s2[..., 0, 1]
    out[..., 3] = szz
    return out


def _eff_energy(c3, czz, cp4, cpi4, xi_p, p: MaterialParams):
    """Undamaged psi_e + psi_p from the packed representations."""
    c2, czz_ = _unpack(np.concatenate([c3, np.asarray(czz)[..., None]], axis=-1))
    cp2, cpzz = _unpack(cp4)
    cpi2, cpizz = _unpack(cpi4)
    cpinv2, detcp2 = _inv2(cp2)
    cpiinv2, detcpi2 = _inv2(cpi2)
    detc = _det2(c2) * czz_
    det_ce = detc / (detcp2 * cpzz)
    tr_ce = np.einsum("...ij,...ji->...", c2, cpinv2) + czz_ / cpzz
    psi_e = 0.5 * p.mu * (tr_ce - 3.0 - np.log(det_ce)) + 0.25 * p.lambda_lame * (
        det_ce - 1.0 - np.log(det_ce)
    )
    det_cpe = (detcp2 * cpzz) / (detcpi2 * cpizz)
    tr_cpe = np.einsum("...ij,...ji->...", cp2, cpiinv2) + cpzz / cpizz
    psi_kin = 0.5 * p.a_kin * (tr_cpe - 3.0 - np.log(det_cpe))
    psi_iso = p.e_iso * (xi_p + (np.exp(-p.f_iso * xi_p) - 1.0) / p.f_iso)
    return psi_e + psi_kin + psi_iso


def _tile(arr: np.ndarray, reps: int) -> np.ndarray:
    return np.concatenate([arr] * reps, axis=0)


def _cstep_columns(fun, x: np.ndarray, n_out: int) -> np.ndarray:
    """Complex-step derivative d(fun)/dx, shape (B, n_out, n_in).

    ``fun`` must accept a stacked (reps * B, n_in) input and evaluate its
    captured constants tiled accordingly.
    """
    b, n_in = x.shape
    xc = np.repeat(x[None].astype(complex), n_in, axis=0)
    for k in range(n_in):
        xc[k, :, k] += 1j * _CSTEP
    out = fun(xc.reshape(n_in * b, n_in))
    if n_out == 1:
        out = out[..., None]
    return out.imag.reshape(n_in, b, n_out).transpose(1, 2, 0) / _CSTEP


# ---------------------------------------------------------------------------
# batched update
# ---------------------------------------------------------------------------


class BatchResult:
    """Outputs of :func:`update_batch` (struct of arrays, length B).

    Stress and tangents use the packed in-plane convention
    ``[xx, yy, xy]``; derivatives are with respect to the packed C
    components (the symmetric pair C_xy counts once) and the nonlocal
    damage value.  ``szz`` is carried for energy/reporting purposes; it
    does no work in plane strain.
    """

    __slots__ = (
        "s3", "szz", "ds_dc", "ds_ddbar", "damage", "dd_dc", "dd_ddbar",
        "state", "dlam_p", "dlam_d", "phi_p", "phi_d", "capped", "psi_eff",
    )

    def __init__(self, **kw):
        for name in self.__slots__:
            setattr(self, name, kw[name])


def update_batch(
    c3: np.ndarray,
    czz: np.ndarray,
    dbar: np.ndarray,
    states: StateBatch,
    params: MaterialParams,
    need_tangent: bool = True,
) -> BatchResult:
    """Vectorized elastic-predictor / two-surface return mapping.

    Parameters
    ----------
    c3 : (B, 3) packed in-plane right Cauchy-Green components
        ``[C_xx, C_yy, C_xy]``.
    czz : (B,) out-of-plane stretch squared (1 in plane strain).
    dbar : (B,) nonlocal damage at the Gauss points.
    states : StateBatch of length B with the committed (old) states.
    params : MaterialParams.
    need_tangent : skip the consistent-tangent work for residual-only
        assemblies.

    Raises
    ------
    LocalSolveError
        If any Gauss point's plastic Newton fails within
        ``LOCAL_MAX_ITER`` iterations.
    """
    b = c3.shape[0]
    p = params
    finite = np.isfinite(c3).all(axis=1) & np.isfinite(czz) & np.isfinite(dbar)
    if not finite.all():
        raise LocalSolveError(
            "non-finite Gauss-point input", [], np.flatnonzero(~finite)
        )
    c2, _ = _unpack(np.concatenate([c3, czz[:, None]], axis=1))

    cpn2, cpnzz = _unpack(states.cp)
    cpin2, cpinzz = _unpack(states.cpi)

    # --- plastic trial ------------------------------------------------------
    _, _, nrm, _, _, _ = _effective_driving(c2, czz, cpn2, cpnzz, cpin2, cpinzz, p)
    phi_trial = _SQ32 * nrm - (p.sigma0 + _iso_hardening(states.xi_p, p))
    plastic = phi_trial > ACTIVATION_TOL * p.sigma0

    new = states.copy()
    active = np.flatnonzero(plastic)
    if active.size:
        z = np.concatenate(
            [states.cp[active], states.cpi[active], np.zeros((active.size, 1))], axis=1
        )
        _solve_plastic(z, states, active, c3, czz, p)
        new.cp[active] = z[:, 0:4]
        new.cpi[active] = z[:, 4:8]
        new.xi_p[active] = states.xi_p[active] + z[:, 8]

    # --- damage update (scalar consistency, exact given the plastic state) --
    psi_eff = _eff_energy(c3, czz, new.cp, new.cpi, new.xi_p, p)
    _, wp_old, _ = _weakening_raw(states.damage, p.weakening_kind)
    g_trial = (
        -wp_old * psi_eff
        - p.h_pen * (states.damage - dbar)
        - p.y0
        - p.r_dam * (1.0 - np.exp(-p.s_dam * states.xi_d))
    )
    yscale = max(p.y0, 1.0)
    dam_active = g_trial > ACTIVATION_TOL * yscale

    capped = np.zeros(b, dtype=bool)
    gprime = np.full(b, -p.h_pen)
    idx_d = np.flatnonzero(dam_active)
    if idx_d.size:
        d_new, gp_new, cap = _solve_damage(
            states.damage[idx_d], states.xi_d[idx_d], psi_eff[idx_d], dbar[idx_d], p, yscale
        )
        delta = d_new - states.damage[idx_d]
        new.damage[idx_d] = d_new
        new.xi_d[idx_d] = states.xi_d[idx_d] + delta
        gprime[idx_d] = gp_new
        capped[idx_d] = cap

    # --- stresses -------------------------------------------------------------
    s_eff4 = _eff_stress(c3, czz, new.cp, p)
    w_new, wp_new, _ = _weakening_raw(new.damage, p.weakening_kind)
    s4 = w_new[:, None] * s_eff4

    # --- consistent tangents (implicit function theorem) -----------------------
    if need_tangent:
        ds_dc, ds_ddbar, dd_dc, dd_ddbar = _tangents(
            c3, czz, states, new, s_eff4, w_new, wp_new, gprime,
            plastic, dam_active, capped, p,
        )
    else:
        ds_dc = ds_ddbar = dd_dc = None
        dd_ddbar = None

    # --- diagnostics ------------------------------------------------------------
    _, _, nrm_new, _, _, _ = _effective_driving(
        c2, czz, *_unpack(new.cp), *_unpack(new.cpi), p
    )
    phi_p = _SQ32 * nrm_new - (p.sigma0 + _iso_hardening(new.xi_p, p))
    phi_d = (
        -wp_new * psi_eff
        - p.h_pen * (new.damage - dbar)
        - p.y0
        - p.r_dam * (1.0 - np.exp(-p.s_dam * new.xi_d))
    )

    return BatchResult(
        s3=s4[:, :3],
        szz=s4[:, 3],
        ds_dc=ds_dc,
        ds_ddbar=ds_ddbar,
        damage=new.damage,
        dd_dc=dd_dc,
        dd_ddbar=dd_ddbar,
        state=new,
        dlam_p=(new.xi_p - states.xi_p) * w_new,
        dlam_d=new.damage - states.damage,
        phi_p=phi_p,
        phi_d=phi_d,
        capped=capped,
        psi_eff=psi_eff,
    )


def _solve_plastic(z, states, active, c3, czz, p: MaterialParams) -> None:
    """Newton on the 9-unknown plastic system; updates ``z`` in place."""
    cpn2, cpnzz = _unpack(states.cp[active])
    cpin2, cpinzz = _unpack(states.cpi[active])
    xi_n = states.xi_p[active]
    ca2, cazz = _unpack(np.concatenate([c3[active], czz[active, None]], axis=1))

    live = np.arange(active.size)
    history: list[float] = []
    errstate = np.errstate(invalid="ignore", divide="ignore", over="ignore")
    # Diverging iterates go non-finite transiently; that is detected and
    # reported below, so the intermediate arithmetic warnings are noise.
    with errstate:
        return _solve_plastic_loop(
            z, live, history, cpn2, cpnzz, cpin2, cpinzz, xi_n, ca2, cazz, active, p
        )


def _solve_plastic_loop(z, live, history, cpn2, cpnzz, cpin2, cpinzz, xi_n,
                        ca2, cazz, active, p: MaterialParams) -> None:
    for _ in range(LOCAL_MAX_ITER):
        res = _plastic_residual(
            z[live], cpn2[live], cpnzz[live], cpin2[live], cpinzz[live],
            xi_n[live], ca2[live], cazz[live], p,
        )
        err = np.abs(res).max(axis=1)
        err = np.where(np.isfinite(err), err, np.inf)
        history.append(float(err.max(initial=0.0)))
        keep = err > LOCAL_TOL
        live = live[keep]
        if live.size == 0:
            return
        res = res[keep]

        def jac_fun(zz_flat, sel=live):
            reps = zz_flat.shape[0] // sel.size
            return _plastic_residual(
                zz_flat,
                _tile(cpn2[sel], reps), _tile(cpnzz[sel], reps),
                _tile(cpin2[sel], reps), _tile(cpinzz[sel], reps),
                _tile(xi_n[sel], reps), _tile(ca2[sel], reps), _tile(cazz[sel], reps),
                p,
            )

        jac = _cstep_columns(jac_fun, z[live], 9)
        if not np.all(np.isfinite(jac)):
            raise LocalSolveError(
                "non-finite Jacobian in the plastic return mapping", history, active[live]
            )
        try:
            dz = np.linalg.solve(jac, res[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise LocalSolveError(
                "singular Jacobian in the plastic return mapping", history, active[live]
            ) from exc
        z[live] -= dz

    raise LocalSolveError(
        f"plastic return mapping did not converge in {LOCAL_MAX_ITER} iterations",
        history, active[live],
    )


def _solve_damage(d0, xi_d0, psi_eff, dbar, p: MaterialParams, yscale: float):
    """Scalar Newton on the damage consistency equation (vectorized).

    The residual is strictly decreasing in D (slope <= -h_pen), so the
    iteration is monotone and safe; the damage cap is enforced afterwards
    with a flag.
    """
    d = d0.copy()
    converged = False
    for _ in range(LOCAL_MAX_ITER):
        d_eval = np.minimum(d, DAMAGE_CAP)
        _, wp, wpp = _weakening_raw(d_eval, p.weakening_kind)
        xi_d = xi_d0 + (d - d0)
        g = -wp * psi_eff - p.h_pen * (d - dbar) - p.y0 - p.r_dam * (
            1.0 - np.exp(-p.s_dam * xi_d)
        )
        if np.abs(g).max(initial=0.0) < LOCAL_TOL * yscale:
            converged = True
            break
        gp = -wpp * psi_eff - p.h_pen - p.r_dam * p.s_dam * np.exp(-p.s_dam * xi_d)
        d = d - g / gp
    if not converged:
        raise LocalSolveError(
            "damage consistency Newton did not converge", [], np.flatnonzero(np.abs(g) >= LOCAL_TOL * yscale)
        )
    capped = d > DAMAGE_CAP
    d = np.minimum(d, DAMAGE_CAP)
    d = np.maximum(d, d0)  # damage never decreases
    _, _, wpp = _weakening_raw(d, p.weakening_kind)
    xi_d = xi_d0 + (d - d0)
    gp = -wpp * psi_eff - p.h_pen - p.r_dam * p.s_dam * np.exp(-p.s_dam * xi_d)
    return d, gp, capped


def _plastic_sensitivity(active, c3, czz, states_old, new: StateBatch, p: MaterialParams):
    """d(plastic unknowns)/d(packed C) at the converged state, (na, 9, 3)."""
    na = active.size
    z = np.concatenate(
        [new.cp[active], new.cpi[active],
         (new.xi_p - states_old.xi_p)[active, None]],
        axis=1,
    )
    cpn2, cpnzz = _unpack(states_old.cp[active])
    cpin2, cpinzz = _unpack(states_old.cpi[active])
    xi_n = states_old.xi_p[active]
    ca2, cazz = _unpack(np.concatenate([c3[active], czz[active, None]], axis=1))

    def res_of_z(zz_flat):
        reps = zz_flat.shape[0] // na
        return _plastic_residual(
            zz_flat,
            _tile(cpn2, reps), _tile(cpnzz, reps), _tile(cpin2, reps), _tile(cpinzz, reps),
            _tile(xi_n, reps), _tile(ca2, reps), _tile(cazz, reps), p,
        )

    def res_of_c(cc_flat):
        reps = cc_flat.shape[0] // na
        c2p, czzp = _unpack(
            np.concatenate([cc_flat, _tile(czz[active, None], reps)], axis=1)
        )
        return _plastic_residual(
            _tile(z, reps).astype(cc_flat.dtype),
            _tile(cpn2, reps), _tile(cpnzz, reps), _tile(cpin2, reps), _tile(cpinzz, reps),
            _tile(xi_n, reps), c2p, czzp, p,
        )

    j_z = _cstep_columns(res_of_z, z, 9)
    j_c = _cstep_columns(res_of_c, c3[active], 9)
    return -np.linalg.solve(j_z, j_c)


def _tangents(c3, czz, states_old, new, s_eff4, w_new, wp_new, gprime,
              plastic, dam_active, capped, p: MaterialParams):
    """Algorithmic tangents via the implicit-function theorem.

    All partials are complex-step derivatives of closed-form functions;
    no finite-difference step sizes enter anywhere.
    """
    b = c3.shape[0]

    dz_dc = np.zeros((b, 9, 3))
    active = np.flatnonzero(plastic)
    if active.size:
        dz_dc[active] = _plastic_sensitivity(active, c3, czz, states_old, new, p)

    def stress_c(v):
        reps = v.shape[0] // b
        return _eff_stress(v, _tile(czz, reps), _tile(new.cp, reps), p)

    def stress_cp(v):
        reps = v.shape[0] // b
        return _eff_stress(_tile(c3, reps), _tile(czz, reps), v, p)

    def energy_of(c3v, cp4v, cpi4v, xiv):
        return _eff_energy(c3v, _tile(czz, c3v.shape[0] // b), cp4v, cpi4v, xiv, p)

    ds_dc_part = _cstep_columns(stress_c, c3, 4)
    ds_dcp = _cstep_columns(stress_cp, new.cp, 4)

    de_dc = _cstep_columns(
        lambda v: energy_of(v, _tile(new.cp, v.shape[0] // b),
                            _tile(new.cpi, v.shape[0] // b), _tile(new.xi_p, v.shape[0] // b)),
        c3, 1,
    )[:, 0, :]
    de_dcp = _cstep_columns(
        lambda v: energy_of(_tile(c3, v.shape[0] // b), v,
                            _tile(new.cpi, v.shape[0] // b), _tile(new.xi_p, v.shape[0] // b)),
        new.cp, 1,
    )[:, 0, :]
    de_dcpi = _cstep_columns(
        lambda v: energy_of(_tile(c3, v.shape[0] // b), _tile(new.cp, v.shape[0] // b),
                            v, _tile(new.xi_p, v.shape[0] // b)),
        new.cpi, 1,
    )[:, 0, :]
    de_dxi = _cstep_columns(
        lambda v: energy_of(_tile(c3, v.shape[0] // b), _tile(new.cp, v.shape[0] // b),
                            _tile(new.cpi, v.shape[0] // b), v[:, 0]),
        new.xi_p[:, None], 1,
    )[:, 0, 0]

    # Total derivatives through the plastic solve.
    ds_eff_dc = ds_dc_part + np.einsum("bij,bjm->bim", ds_dcp, dz_dc[:, 0:4, :])
    dpsi_dc = (
        de_dc
        + np.einsum("bj,bjm->bm", de_dcp, dz_dc[:, 0:4, :])
        + np.einsum("bj,bjm->bm", de_dcpi, dz_dc[:, 4:8, :])
        + de_dxi[:, None] * dz_dc[:, 8, :]
    )

    # Damage sensitivities from the scalar consistency equation.
    dd_dc = np.zeros((b, 3))
    dd_ddbar = np.zeros(b)
    sens = dam_active & ~capped
    if np.any(sens):
        dd_dc[sens] = (wp_new[sens, None] * dpsi_dc[sens]) / gprime[sens, None]
        dd_ddbar[sens] = -p.h_pen / gprime[sens]

    ds_dc = w_new[:, None, None] * ds_eff_dc[:, :3, :] + (
        wp_new[:, None] * s_eff4[:, :3]
    )[:, :, None] * dd_dc[:, None, :]
    ds_ddbar = (wp_new * dd_ddbar)[:, None] * s_eff4[:, :3]
    return ds_dc, ds_ddbar, dd_dc, dd_ddbar


# ---------------------------------------------------------------------------
# single-point interface
# ---------------------------------------------------------------------------


@dataclass
class StressReturn:
    """Converged Gauss-point update.

    ``s`` is the (3, 3) second Piola-Kirchhoff stress, ``a0`` the scalar
    generalized stress conjugate to the nonlocal field, ``b0`` its vector
    counterpart (gradient stiffness times grad dbar).  Tangents use the
    packed convention of :class:`BatchResult`.
    """

    s: np.ndarray
    a0: float
    b0: np.ndarray
    ds_dc: np.ndarray
    ds_ddbar: np.ndarray
    da0_dc: np.ndarray
    da0_ddbar: float
    new_state: GaussPointState
    dlam_p: float
    dlam_d: float
    phi_p: float
    phi_d: float
    capped: bool


def stress_update(
    c: np.ndarray,
    dbar: float,
    grad_dbar: np.ndarray,
    state_old: GaussPointState,
    params: MaterialParams,
    dt_pseudo: float = 1.0,
) -> StressReturn:
    """Single-point stress update (see :func:`update_batch`).

    ``dt_pseudo`` is accepted for interface completeness; the model is
    rate independent, so the result does not depend on it.
    """
    del dt_pseudo
    c = np.asarray(c, dtype=float)
    _check_block_spd(c, "C")
    if dbar < 0.0:
        raise MaterialDomainError("nonlocal damage must be non-negative")
    state_old.validate()

    c3 = np.array([[c[0, 0], c[1, 1], c[0, 1]]])
    czz = np.array([c[2, 2]])
    batch = StateBatch.from_states([state_old])
    out = update_batch(c3, czz, np.array([float(dbar)]), batch, params)

    s = np.array(
        [
            [out.s3[0, 0], out.s3[0, 2], 0.0],
            [out.s3[0, 2], out.s3[0, 1], 0.0],
            [0.0, 0.0, out.szz[0]],
        ]
    )
    g = np.asarray(grad_dbar, dtype=float).reshape(-1)
    a0 = -params.h_pen * (out.damage[0] - dbar)
    return StressReturn(
        s=s,
        a0=float(a0),
        b0=params.a_grad * g,
        ds_dc=out.ds_dc[0],
        ds_ddbar=out.ds_ddbar[0],
        da0_dc=-params.h_pen * out.dd_dc[0],
        da0_ddbar=float(-params.h_pen * (out.dd_ddbar[0] - 1.0)),
        new_state=out.state.state(0),
        dlam_p=float(out.dlam_p[0]),
        dlam_d=float(out.dlam_d[0]),
        phi_p=float(out.phi_p[0]),
        phi_d=float(out.phi_d[0]),
        capped=bool(out.capped[0]),
    )
