"""Operator calculus of the convective Brinkman-Forchheimer drift.

The drift of the damped Navier-Stokes system is

    -mu*A u - B(u) - alpha*u - beta*C(u) + f(t)

with A the Stokes operator (diagonal |k|^2 here), B(u,v) = P[(u.grad)v] the
projected convection and C(u) = P[|u|^{r-1} u] the projected absorption.
Nonlinear terms are evaluated pseudospectrally on zero-padded grids; with the
grid sizes chosen by `dealias_points` the classical identities (energy
cancellation of B, the absorption power identity, the monotonicity estimates)
hold for the truncated operators up to round-off, which is what the property
suite asserts.

All `*_coeffs` helpers are batched over leading axes; the public functions
wrap single SpectralFields.
"""

from dataclasses import dataclass
import math
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .fields import SpectralField, norm
from .modes import ModeBasis, dealias_points

__all__ = [
    "PhysicalParams", "ForcingSpec", "apply_stokes", "apply_convection",
    "apply_absorption", "drift", "monotonicity_defect",
    "torus_identity_residual", "pair_scale",
]


@dataclass(frozen=True)
class PhysicalParams:
    """Coefficients of the damped Navier-Stokes system.

    Outside test_mode the standing assumptions are enforced: mu, alpha,
    beta > 0 and either r > 3 or r = 3 with 2*beta*mu >= 1.  test_mode admits
    degenerate coefficients (even zero) for closed-form oracle runs and may
    switch the convection term off entirely.
    """
    mu: float
    alpha: float
    beta: float
    r: float
    test_mode: bool = False
    include_convection: bool = True

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"absorption exponent must be >= 1, got {self.r}")
        if self.test_mode:
            if min(self.mu, self.alpha, self.beta) < 0:
                raise ValueError("coefficients must be nonnegative")
            return
        if not self.include_convection:
            raise ValueError("convection can only be disabled in test_mode")
        if min(self.mu, self.alpha, self.beta) <= 0:
            raise ValueError("mu, alpha, beta must be positive")
        if self.r < 3:
            raise ValueError(f"r={self.r} below the admissible range")
        if self.r == 3 and 2.0 * self.beta * self.mu < 1.0:
            raise ValueError("r=3 requires 2*beta*mu >= 1")

    def validate_for_dim(self, dim: int):
        if not self.test_mode and dim == 3:
            if not (self.r == 3 or 3.0 < self.r <= 5.0):
                raise ValueError(
                    f"d=3 requires r in (3,5] or r=3, got r={self.r}")
        return self

    @property
    def rho(self) -> float:
        """Constant absorbed from the convection estimate; zero at r=3."""
        if self.r <= 3:
            return 0.0
        r = self.r
        return ((r - 3.0) / (2.0 * self.mu * (r - 1.0))
                * (4.0 / (self.beta * self.mu * (r - 1.0)))
                ** (2.0 / (r - 3.0)))

    @property
    def rho_star(self) -> float:
        """Companion constant with the 1/(beta*mu*(r-1)) kernel; zero at r=3."""
        if self.r <= 3:
            return 0.0
        r = self.r
        return ((r - 3.0) / (2.0 * self.mu * (r - 1.0))
                * (1.0 / (self.beta * self.mu * (r - 1.0)))
                ** (2.0 / (r - 3.0)))

    @classmethod
    def frozen_dynamics(cls) -> "PhysicalParams":
        """All terms off: the state only moves by forcing, control or noise."""
        return cls(mu=0.0, alpha=0.0, beta=0.0, r=3.0, test_mode=True,
                   include_convection=False)


@dataclass(frozen=True)
class ForcingSpec:
    """Time-continuous forcing f(t) = envelope(t) * profile with a V bound.

    Catalog: zero, constant-field, single-mode; envelope either constant or
    cosine with a given period.
    """
    profile: SpectralField
    envelope: str = "constant"
    period: float = 1.0

    def __post_init__(self):
        if self.envelope not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown envelope {self.envelope!r}")

    def amplitude_at(self, t: float) -> float:
        if self.envelope == "cosine":
            return math.cos(2.0 * math.pi * t / self.period)
        return 1.0

    def at(self, t: float) -> SpectralField:
        return self.profile * self.amplitude_at(t)

    @property
    def v_bound(self) -> float:
        """R with ||f(t)||_V <= R for all t."""
        return norm(self.profile, "V")

    @classmethod
    def zero(cls, dim: int, resolution: int) -> "ForcingSpec":
        return cls(SpectralField.zero(dim, resolution))

    @classmethod
    def constant_field(cls, values, resolution: int) -> "ForcingSpec":
        values = np.asarray(values, dtype=float)
        f = SpectralField.zero(values.size, resolution)
        flat = f.flat_coeffs().copy()
        flat[f.basis.zero_index] = values
        return cls(SpectralField.from_flat(values.size, resolution, flat))

    @classmethod
    def single_mode(cls, dim, resolution, k, amplitude,
                    envelope="constant", period=1.0) -> "ForcingSpec":
        from .fields import project_leray
        fld = project_leray(
            SpectralField.single_mode(dim, resolution, k, amplitude))
        return cls(fld, envelope=envelope, period=period)


def absorption_degree(r: float) -> float:
    """Product degree used to size the absorption grid; capped at 5.

    For r <= 5 the padded grid keeps integer-r powers alias-free; above that
    exact dealiasing is abandoned as a documented approximation.
    """
    return min(float(math.ceil(r)), 5.0)


def operator_points(basis: ModeBasis, r: float) -> int:
    """Shared grid for all nonlinear terms of one drift evaluation."""
    return dealias_points(basis.resolution, max(2.0, absorption_degree(r)))


# ------------------------------------------------------------------- batched
# coefficient kernels, arrays of shape (..., n_modes, dim)

def _gradient_grid(basis, v, points):
    """All d*d derivative components of v on the grid: (..., i, c, M...)."""
    dv = 1j * basis.kvec.T[:, :, None] * v[..., None, :, :]  # (..., i, m, c)
    dvt = np.moveaxis(dv, -3, -2)                            # (..., m, i, c)
    dvt = dvt.reshape(v.shape[:-2] + (basis.n_modes, basis.dim**2))
    dvgrid = basis.to_grid(dvt, points)
    return dvgrid.reshape(v.shape[:-2] + (basis.dim, basis.dim)
                          + dvgrid.shape[-basis.dim:])


def convection_coeffs(basis: ModeBasis, u: np.ndarray, v: np.ndarray,
                      points: int) -> np.ndarray:
    """P[(u.grad)v] via dealiased collocation products."""
    ugrid = basis.to_grid(u, points)
    dvgrid = _gradient_grid(basis, v, points)
    conv = np.sum(np.expand_dims(ugrid, -basis.dim - 1) * dvgrid,
                  axis=-basis.dim - 2)
    return basis.project(basis.from_grid(conv))


def absorption_coeffs(basis: ModeBasis, u: np.ndarray, r: float,
                      points: int) -> np.ndarray:
    """P[|u|^{r-1} u] on the dealiased grid, truncated back."""
    ugrid = basis.to_grid(u, points)
    mag2 = np.sum(ugrid**2, axis=-basis.dim - 1, keepdims=True)
    weight = mag2 if r == 3.0 else mag2 ** ((r - 1.0) / 2.0)
    return basis.project(basis.from_grid(weight * ugrid))


def stokes_coeffs(basis: ModeBasis, u: np.ndarray) -> np.ndarray:
    return u * basis.lam[:, None]


def drift_coeffs(basis: ModeBasis, u: np.ndarray, t: float,
                 params: PhysicalParams, forcing: Optional[ForcingSpec],
                 points: Optional[int] = None) -> np.ndarray:
    if points is None:
        points = operator_points(basis, params.r)
    out = -(params.mu * basis.lam[:, None] + params.alpha) * u
    if params.include_convection:
        out = out - convection_coeffs(basis, u, u, points)
    if params.beta:
        out = out - params.beta * absorption_coeffs(basis, u, params.r, points)
    if forcing is not None:
        amp = forcing.amplitude_at(t)
        if amp:
            out = out + amp * forcing.profile.flat_coeffs()
    return out


def convection_jacobian_coeffs(basis, y, v, points):
    """Directional derivative of B at y: P[(v.grad)y + (y.grad)v]."""
    return (convection_coeffs(basis, v, y, points)
            + convection_coeffs(basis, y, v, points))


def convection_jacobian_adjoint_coeffs(basis, y, w, points):
    """Exact discrete transpose of the convection Jacobian at y.

    <DB[y]v, w> = <v, P[(grad y)^T w - sum_i d_i(y_i w)]> holds to round-off
    for the collocation-product operators when `points` is alias-free.
    """
    ygrid = basis.to_grid(y, points)
    wgrid = basis.to_grid(w, points)
    dygrid = _gradient_grid(basis, y, points)      # (..., i, c, M...)
    first = np.sum(dygrid * np.expand_dims(wgrid, -basis.dim - 2),
                   axis=-basis.dim - 1)            # (..., i, M...)
    term1 = basis.from_grid(first)
    prod = (np.expand_dims(ygrid, -basis.dim - 1)
            * np.expand_dims(wgrid, -basis.dim - 2))  # (..., i, c, M...)
    flat = prod.reshape(prod.shape[:-basis.dim - 2] + (basis.dim**2,)
                        + prod.shape[-basis.dim:])
    pc = basis.from_grid(flat)                     # (..., m, i*c)
    pc = pc.reshape(pc.shape[:-1] + (basis.dim, basis.dim))
    term2 = -np.einsum("mi,...mic->...mc", 1j * basis.kvec, pc)
    return basis.project(term1 + term2)


def absorption_jacobian_coeffs(basis, y, v, r, points):
    """Directional derivative of C at y (pointwise symmetric matrix); r >= 3
    keeps the |y|^{r-3} factor nonsingular."""
    if r < 3:
        raise ValueError("absorption linearization needs r >= 3")
    ygrid = basis.to_grid(y, points)
    vgrid = basis.to_grid(v, points)
    mag2 = np.sum(ygrid**2, axis=-basis.dim - 1, keepdims=True)
    a = mag2 if r == 3.0 else mag2 ** ((r - 1.0) / 2.0)
    b = np.ones_like(mag2) if r == 3.0 else mag2 ** ((r - 3.0) / 2.0)
    ydotv = np.sum(ygrid * vgrid, axis=-basis.dim - 1, keepdims=True)
    out = a * vgrid + (r - 1.0) * b * ydotv * ygrid
    return basis.project(basis.from_grid(out))


# ------------------------------------------------------- packed fast kernels

def _half_power(x: np.ndarray, e: float) -> np.ndarray:
    """x**e for nonnegative x, cheap for the common (half-)integer cases."""
    if e == 0.0:
        return np.ones_like(x)
    twice = 2.0 * e
    if twice == round(twice):
        k = int(round(twice))
        if k % 2 == 0:
            return x ** (k // 2)
        out = np.sqrt(x)
        if k > 1:
            out = out * x ** ((k - 1) // 2)
        return out
    return x ** e


def nonlinear_drift_packed(basis: ModeBasis, p: np.ndarray,
                           params: PhysicalParams, points: int) -> np.ndarray:
    """-B(u) - beta*C(u) for packed states (..., n_dof), batched.

    Uses the dense synthesis matrices when the basis is small enough (the
    Monte Carlo hot path at desk scales), otherwise the FFT pipeline.
    """
    if not params.include_convection and params.beta == 0.0:
        return np.zeros_like(p)
    dense = basis.dense(points)
    if dense is None:
        coeffs = basis.unpack(p)
        acc = None
        if params.include_convection:
            acc = -convection_coeffs(basis, coeffs, coeffs, points)
        if params.beta:
            ab = params.beta * absorption_coeffs(basis, coeffs, params.r,
                                                 points)
            acc = -ab if acc is None else acc - ab
        return basis.pack(acc)
    d, ng = basis.dim, dense.n_grid
    lead = p.shape[:-1]
    flat = p.reshape(-1, basis.n_dof)
    g = (flat @ dense.s).reshape(-1, d, ng)
    acc = np.empty_like(g)
    if params.include_convection:
        dg = (flat @ dense.sd).reshape(-1, d, d, ng)
        for c in range(d):
            s_ = g[:, 0, :] * dg[:, 0, c, :]
            for i in range(1, d):
                s_ += g[:, i, :] * dg[:, i, c, :]
            acc[:, c, :] = s_
        np.negative(acc, out=acc)
    else:
        acc.fill(0.0)
    if params.beta:
        mag2 = np.einsum("bcf,bcf->bf", g, g)
        w = _half_power(mag2, (params.r - 1.0) / 2.0)
        w *= params.beta
        acc -= w[:, None, :] * g
    out = acc.reshape(-1, d * ng) @ dense.st
    return out.reshape(lead + (basis.n_dof,))


def nonlinear_jacobian_adjoint_packed(basis: ModeBasis, y: np.ndarray,
                                      w: np.ndarray, params: PhysicalParams,
                                      points: int) -> np.ndarray:
    """Exact transpose of the packed nonlinear drift Jacobian at state y."""
    if not params.include_convection and params.beta == 0.0:
        return np.zeros_like(w)
    dense = basis.dense(points)
    if dense is None:
        out = np.zeros_like(w)
        yc = basis.unpack(y)
        wc = basis.unpack(w)
        if params.include_convection:
            out -= basis.pack(
                convection_jacobian_adjoint_coeffs(basis, yc, wc, points))
        if params.beta:
            out -= params.beta * basis.pack(
                absorption_jacobian_coeffs(basis, yc, wc, params.r, points))
        return out
    d, ng = basis.dim, dense.n_grid
    yg = (y @ dense.s).reshape(y.shape[:-1] + (d, ng))
    wg = (w @ dense.s).reshape(w.shape[:-1] + (d, ng))
    out = np.zeros_like(w)
    if params.include_convection:
        dyg = (y @ dense.sd).reshape(y.shape[:-1] + (d, d, ng))
        # (grad y)^T w on the grid, then the divergence-form part via Std
        term1 = np.einsum("...icf,...cf->...if", dyg, wg)
        prod = np.einsum("...if,...cf->...icf", yg, wg)
        out -= term1.reshape(w.shape[:-1] + (d * ng,)) @ dense.st
        out -= prod.reshape(w.shape[:-1] + (d * d * ng,)) @ dense.std
    if params.beta:
        mag2 = np.sum(yg**2, axis=-2, keepdims=True)
        a = mag2 if params.r == 3.0 else mag2 ** ((params.r - 1.0) / 2.0)
        b = np.ones_like(mag2) if params.r == 3.0 \
            else mag2 ** ((params.r - 3.0) / 2.0)
        ydotw = np.sum(yg * wg, axis=-2, keepdims=True)
        mat = a * wg + (params.r - 1.0) * b * ydotw * yg
        out -= params.beta * (mat.reshape(w.shape[:-1] + (d * ng,))
                              @ dense.st)
    return out


# -------------------------------------------------------------- public wraps

def apply_stokes(u: SpectralField) -> SpectralField:
    """Stokes operator: coefficient of mode k scaled by |k|^2."""
    return SpectralField.from_flat(u.dim, u.resolution,
                                   stokes_coeffs(u.basis, u.flat_coeffs()))


def apply_convection(u: SpectralField, v: SpectralField,
                     grid_points=None) -> SpectralField:
    """Projected convection P[(u.grad)v]; u must be solenoidal."""
    u._check_compatible(v)
    points = grid_points or dealias_points(u.resolution, 2)
    flat = convection_coeffs(u.basis, u.flat_coeffs(), v.flat_coeffs(), points)
    return SpectralField.from_flat(u.dim, u.resolution, flat)


def apply_absorption(u: SpectralField, r: float,
                     grid_points=None) -> SpectralField:
    """Projected absorption P[|u|^{r-1} u] for r >= 1."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    points = grid_points or dealias_points(u.resolution, absorption_degree(r))
    flat = absorption_coeffs(u.basis, u.flat_coeffs(), r, points)
    return SpectralField.from_flat(u.dim, u.resolution, flat)


def drift(u: SpectralField, t: float, params: PhysicalParams,
          forcing: Optional[ForcingSpec] = None) -> SpectralField:
    """Full drift -mu*A u - B(u) - alpha*u - beta*C(u) + f(t)."""
    if forcing is not None and (forcing.profile.dim != u.dim or
                                forcing.profile.resolution != u.resolution):
        raise ConfigurationError("forcing resolution does not match state")
    flat = drift_coeffs(u.basis, u.flat_coeffs(), t, params, forcing)
    return SpectralField.from_flat(u.dim, u.resolution, flat)


def pair_scale(u: SpectralField, v: SpectralField, r: float) -> float:
    """Problem-size magnitude used to scale tolerances across amplitudes."""
    return (1.0 + norm(u, "V") + norm(v, "V")) ** (r + 1.0)


def _weighted_h_norm_sq(basis, u, weight_grid, points):
    """Quadrature of weight^2 |u|^2 with the weight given on the grid."""
    ugrid = basis.to_grid(u, points)
    mag2 = np.sum(ugrid**2, axis=-basis.dim - 1)
    cell = (2.0 * np.pi / points) ** basis.dim
    return float(np.sum(weight_grid**2 * mag2) * cell)


def monotonicity_defect(u: SpectralField, v: SpectralField,
                        params: PhysicalParams) -> float:
    """Slack of the monotonicity estimate for mu*A + B + beta*C.

    For r > 3 returns

        <mu*A d + B(u)-B(v) + beta*(C(u)-C(v)), d> + rho*||d||^2
            - 1/2*|| |u|^{(r-1)/2} d ||^2 - mu/2*||grad d||^2

    with d = u - v, which is nonnegative up to round-off.  For r = 3 with
    2*beta*mu >= 1 returns the global variant, subtracting the
    (beta - 1/(2*mu))/2 weighted term instead.
    """
    r = params.r
    if not (r > 3 or (r == 3 and 2.0 * params.beta * params.mu >= 1.0)):
        raise ValueError(
            "monotonicity estimate needs r > 3, or r = 3 with 2*beta*mu >= 1")
    u._check_compatible(v)
    basis = u.basis
    points = operator_points(basis, r)
    uc, vc = u.flat_coeffs(), v.flat_coeffs()
    d = uc - vc
    pairing = params.mu * basis.inner(stokes_coeffs(basis, d), d)
    if params.include_convection:
        pairing += basis.inner(
            convection_coeffs(basis, uc, uc, points)
            - convection_coeffs(basis, vc, vc, points), d)
    pairing += params.beta * basis.inner(
        absorption_coeffs(basis, uc, r, points)
        - absorption_coeffs(basis, vc, r, points), d)
    if r == 3:
        vmag = np.sqrt(np.sum(basis.to_grid(vc, points)**2,
                              axis=-basis.dim - 1))
        wv = _weighted_h_norm_sq(basis, d, vmag, points)
        return pairing - 0.5 * (params.beta - 1.0 / (2.0 * params.mu)) * wv
    umag = np.sqrt(np.sum(basis.to_grid(uc, points)**2, axis=-basis.dim - 1))
    wu = _weighted_h_norm_sq(basis, d, umag ** ((r - 1.0) / 2.0), points)
    return (pairing + params.rho * float(basis.norm_h(d))**2
            - 0.5 * wu - 0.5 * params.mu * float(basis.norm_grad(d))**2)


def torus_identity_residual(u: SpectralField, r: float,
                            grid_points=None) -> float:
    """Residual of the absorption/Stokes pairing identity on the torus:

        (C(u), A u) - || |u|^{(r-1)/2} grad u ||^2
                    - 4 (r-1)/(r+1)^2 || grad |u|^{(r+1)/2} ||^2

    with the right-hand pieces evaluated by dealiased grid quadrature.  Exact
    in the continuum; discretely the residual decays under grid refinement.
    """
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    basis = u.basis
    points = grid_points or dealias_points(
        u.resolution, max(2.0 * absorption_degree(r), 4.0))
    uc = u.flat_coeffs()
    cu = absorption_coeffs(basis, uc, r, points)
    lhs = float(basis.inner(cu, stokes_coeffs(basis, uc)))

    ugrid = basis.to_grid(uc, points)
    mag2 = np.sum(ugrid**2, axis=-basis.dim - 1)
    dugrid = _gradient_grid(basis, uc, points)
    cell = (2.0 * np.pi / points) ** basis.dim
    grad_sq = np.sum(dugrid**2, axis=(0, 1))
    term1 = float(np.sum(mag2 ** ((r - 1.0) / 2.0) * grad_sq) * cell)
    grad_pow = basis.grid_scalar_gradient(mag2 ** ((r + 1.0) / 4.0))
    term2 = float(np.sum(grad_pow**2) * cell)
    return lhs - term1 - 4.0 * (r - 1.0) / (r + 1.0) ** 2 * term2
