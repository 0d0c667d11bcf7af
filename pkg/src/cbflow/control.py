"""Deterministic optimal control of the damped Navier-Stokes system.

Minimizes  1/2 int ||u||^2 dt + g(Y(T))  subject to

    dY/dt = -mu*A Y - B(Y) - alpha*Y - beta*C(Y) + f(t) + Q^{1/2} u(t)

with piecewise-constant controls on the forward time grid.  The gradient is
the exact transpose of the time-discrete forward map (same integrating-factor
scheme as the simulator, control injected after the exponential map like the
noise), so directional derivatives match central finite differences at tight
tolerance.  -V(0, y0) is the large-n limit of the Laplace functional the
Monte Carlo estimator measures.

B and C are nonlinear, so the objective is nonconvex; the optimizer accepts
local minima, mitigated by a zero start plus seeded random restarts.
"""

from dataclasses import dataclass, replace
import json
import math
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .fields import SpectralField
from .modes import mode_basis
from .operators import PhysicalParams, ForcingSpec, operator_points
from .simulate import NoiseSpec, TimeGrid, Trajectory, _EnsembleRun
from .laplace import Observable

__all__ = [
    "ControlPath", "ValueResult", "OptimizerOptions", "solve_controlled",
    "cost_and_gradient", "minimize_value", "dpp_residual",
]


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control, one packed field per forward step."""
    dim: int
    resolution: int
    grid: TimeGrid
    packed: np.ndarray  # (steps, n_dof)

    def __post_init__(self):
        basis = mode_basis(self.dim, self.resolution)
        expected = (self.grid.steps, basis.n_dof)
        arr = np.asarray(self.packed, dtype=float)
        if arr.shape != expected:
            raise ConfigurationError(
                f"control shape {arr.shape}, expected {expected}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "packed", arr)

    @classmethod
    def zero(cls, dim, resolution, grid) -> "ControlPath":
        basis = mode_basis(dim, resolution)
        return cls(dim, resolution, grid, np.zeros((grid.steps, basis.n_dof)))

    @classmethod
    def from_fields(cls, grid, fields) -> "ControlPath":
        if len(fields) != grid.steps:
            raise ConfigurationError("need one control field per step")
        first = fields[0]
        basis = first.basis
        packed = np.stack([basis.pack(f.flat_coeffs()) for f in fields])
        return cls(first.dim, first.resolution, grid, packed)

    def fields(self):
        basis = mode_basis(self.dim, self.resolution)
        return [SpectralField.from_flat(self.dim, self.resolution,
                                        basis.unpack(row))
                for row in self.packed]

    def l2_cost(self) -> float:
        """1/2 int ||u||^2 dt on the grid."""
        return 0.5 * self.grid.dt * float(np.sum(self.packed**2))

    def within_admissible_cap(self, g_bound: float) -> bool:
        """Reporting flag: 1/2 int ||u||^2 <= 2 sup|g|."""
        return self.l2_cost() <= 2.0 * g_bound + 1e-12

    def __add__(self, other):
        return replace(self, packed=self.packed + other.packed)

    def __sub__(self, other):
        return replace(self, packed=self.packed - other.packed)

    def __mul__(self, scalar):
        return replace(self, packed=self.packed * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True)
class OptimizerOptions:
    max_iters: int = 200
    grad_tol: float = 1e-6       # relative to the first gradient norm
    armijo_initial: float = 1.0
    armijo_shrink: float = 0.5
    armijo_decrease: float = 1e-4
    max_backtracks: int = 30
    restarts: int = 4
    restart_amplitude: float = 0.3
    restart_decay: float = 2.0


@dataclass
class ValueResult:
    """Optimizer output: value estimate, minimizing control, trace."""
    value: float
    control: ControlPath
    trace: list            # (cost, grad_norm, step_size) per accepted iterate
    converged: bool
    restart_id: int = 0
    all_values: Optional[list] = None
    within_cap: Optional[bool] = None

    def to_record(self) -> dict:
        return {"V": self.value, "iters": len(self.trace),
                "grad_norm": self.trace[-1][1] if self.trace else 0.0,
                "converged": self.converged, "restart_id": self.restart_id}

    def to_ndjson_line(self) -> str:
        return json.dumps(self.to_record())


def _forward_packed(basis, p0, params, forcing, noise, grid, tilt_packed):
    run = _EnsembleRun(basis, params, forcing, None, grid, seed=0)
    qs = np.sqrt(noise.qvals(basis)) if noise is not None else None
    p = p0.copy()
    states = np.empty((grid.steps + 1, basis.n_dof))
    states[0] = p
    dt = grid.dt
    for j in range(grid.steps):
        t = grid.t0 + j * dt
        nl = run._nonlinear(p[None, :])[0]
        if run.forcing_packed is not None:
            amp = forcing.amplitude_at(t)
            if amp:
                nl = nl + amp * run.forcing_packed
        p = run.efac * (p + dt * nl)
        if tilt_packed is not None:
            p = p + dt * qs * tilt_packed[j]
        if not np.all(np.isfinite(p)):
            from .errors import BlowupError
            raise BlowupError(f"controlled state blew up at t={t + dt:.6g}",
                              time=t + dt)
        states[j + 1] = p
    return states


def solve_controlled(y0: SpectralField, control: ControlPath,
                     params: PhysicalParams, forcing: Optional[ForcingSpec],
                     noise: NoiseSpec, grid: TimeGrid) -> Trajectory:
    """Forward integration of the controlled system with Q^{1/2} applied
    spectrally (coefficient of mode k scaled by sqrt(q_k))."""
    if control.grid != grid:
        raise ConfigurationError("control grid does not match time grid")
    if (control.dim, control.resolution) != (y0.dim, y0.resolution):
        raise ConfigurationError("control resolution does not match state")
    basis = mode_basis(y0.dim, y0.resolution)
    states = _forward_packed(basis, basis.pack(y0.flat_coeffs()), params,
                             forcing, noise, grid, control.packed)
    fields = [SpectralField.from_flat(y0.dim, y0.resolution, basis.unpack(s))
              for s in states]
    return Trajectory(grid, fields)


def _jacobian_adjoint_apply(basis, y, w, params, points):
    """(D drift_nl)[y]^T w in packed coordinates, for the explicit terms."""
    from .operators import nonlinear_jacobian_adjoint_packed
    return nonlinear_jacobian_adjoint_packed(basis, y, w, params, points)


def cost_and_gradient(y0: SpectralField, control: ControlPath, g: Observable,
                      params: PhysicalParams, forcing: Optional[ForcingSpec],
                      noise: NoiseSpec, grid: TimeGrid):
    """Cost 1/2 int ||u||^2 dt + g(Y(T)) and its exact discrete gradient.

    The gradient is returned as the L^2(time; H) Riesz representative, one
    packed field per slot: u_j + Q^{1/2} lambda_{j+1}, with lambda the adjoint
    of the discrete forward map.  Directional derivatives are
    sum_j dt * <grad_j, du_j>.
    """
    basis = mode_basis(y0.dim, y0.resolution)
    params.validate_for_dim(y0.dim)
    points = operator_points(basis, params.r)
    states = _forward_packed(basis, basis.pack(y0.flat_coeffs()), params,
                             forcing, noise, grid, control.packed)
    dt = grid.dt
    cost = control.l2_cost() + float(g.value_packed(states[-1]))

    qs = np.sqrt(noise.qvals(basis))
    efac = np.exp(-(params.mu * basis.lam_dof + params.alpha) * dt)
    lam = g.gradient_packed(states[-1])
    grad = np.empty_like(control.packed)
    for j in range(grid.steps - 1, -1, -1):
        grad[j] = control.packed[j] + qs * lam
        lam = efac * lam
        lam = lam + dt * _jacobian_adjoint_apply(basis, states[j], lam,
                                                 params, points)
    gradient = ControlPath(control.dim, control.resolution, grid, grad)
    return cost, gradient


def _grad_norm(grid: TimeGrid, gradient: ControlPath) -> float:
    return math.sqrt(grid.dt * float(np.sum(gradient.packed**2)))


def _descend(y0, control, g, params, forcing, noise, grid, opt, restart_id):
    """Armijo-backtracking gradient descent from the given control."""
    cost, gradient = cost_and_gradient(y0, control, g, params, forcing,
                                       noise, grid)
    gnorm0 = _grad_norm(grid, gradient)
    trace = [(cost, gnorm0, 0.0)]
    tol = opt.grad_tol * max(1.0, gnorm0)
    converged = gnorm0 <= tol
    for _ in range(opt.max_iters):
        if converged:
            break
        gnorm = _grad_norm(grid, gradient)
        step_size = opt.armijo_initial
        accepted = False
        for _ in range(opt.max_backtracks):
            candidate = control - step_size * gradient
            new_cost, new_gradient = cost_and_gradient(
                y0, candidate, g, params, forcing, noise, grid)
            if new_cost <= cost - opt.armijo_decrease * step_size * gnorm**2:
                accepted = True
                break
            step_size *= opt.armijo_shrink
        if not accepted:
            break
        control, cost, gradient = candidate, new_cost, new_gradient
        gnorm = _grad_norm(grid, gradient)
        trace.append((cost, gnorm, step_size))
        if gnorm <= tol:
            converged = True
    return ValueResult(value=cost, control=control, trace=trace,
                       converged=converged, restart_id=restart_id)


def minimize_value(y0: SpectralField, g: Observable, params: PhysicalParams,
                   forcing: Optional[ForcingSpec], noise: NoiseSpec,
                   grid: TimeGrid,
                   opt: OptimizerOptions = OptimizerOptions(),
                   seed: int = 0) -> ValueResult:
    """Value of the deterministic control problem by gradient descent.

    Starts from the zero control plus opt.restarts seeded random restarts and
    returns the best local minimum found; the value never exceeds the
    zero-control cost.
    """
    if opt.grad_tol <= 0 or opt.max_iters < 1:
        raise ValueError("optimizer tolerances must be positive")
    basis = mode_basis(y0.dim, y0.resolution)
    starts = [ControlPath.zero(y0.dim, y0.resolution, grid)]
    if g.lipschitz > 0.0:
        from . import rng as rngmod
        sigma = (1.0 + basis.lam_dof) ** (-opt.restart_decay / 2.0)
        for i in range(opt.restarts):
            gen = rngmod.generator(seed, rngmod.TAG_RESTART, step=i)
            z = gen.standard_normal((grid.steps, basis.n_dof))
            starts.append(ControlPath(y0.dim, y0.resolution, grid,
                                      opt.restart_amplitude * sigma * z))
    results = [_descend(y0, c, g, params, forcing, noise, grid, opt, i)
               for i, c in enumerate(starts)]
    best = min(results, key=lambda res: res.value)
    best.all_values = [res.value for res in results]
    if g.bound is not None:
        best.within_cap = best.control.within_admissible_cap(g.bound)
    return best


def dpp_residual(y0: SpectralField, g: Observable, eta: float,
                 params: PhysicalParams, forcing: Optional[ForcingSpec],
                 noise: NoiseSpec, grid: TimeGrid,
                 opt: OptimizerOptions = OptimizerOptions(),
                 seed: int = 0) -> float:
    """Dynamic-programming consistency check at the split time eta.

    |V(t0,y0) - (first-leg cost of the joint optimum + re-optimized tail from
    its endpoint)|; small up to the optimizer tolerance budget.  Degenerate
    splits (eta at either end) are exact by definition.
    """
    if not (grid.t0 <= eta <= grid.t_end):
        raise ConfigurationError(f"split {eta} outside [{grid.t0}, "
                                 f"{grid.t_end}]")
    full = minimize_value(y0, g, params, forcing, noise, grid, opt, seed)
    j = grid.node_index(eta)
    if j == 0 or j == grid.steps:
        return 0.0
    traj = solve_controlled(y0, full.control, params, forcing, noise, grid)
    y_eta = traj.fields[j]
    head_cost = 0.5 * grid.dt * float(np.sum(full.control.packed[:j]**2))
    tail_grid = TimeGrid(eta, grid.t_end, grid.steps - j)
    tail_opt = replace(opt, restarts=0)
    tail_start = ControlPath(y0.dim, y0.resolution, tail_grid,
                             full.control.packed[j:])
    tail = _descend(y_eta, tail_start, g, params, forcing, noise, tail_grid,
                    tail_opt, restart_id=0)
    return abs(full.value - (head_cost + tail.value))
