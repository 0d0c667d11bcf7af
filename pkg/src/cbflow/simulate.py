"""Time integration of the damped Navier-Stokes system with small noise.

The integrator is an integrating-factor (exponential Euler) scheme: the
stiff linear part -mu*A - alpha is applied exactly per mode, the convection,
absorption and forcing terms explicitly at the current state, and the noise
increment (scale 1/sqrt(n)) after the exponential map.  States live in the
packed solenoidal coordinates of ModeBasis, where the covariance Q is the
diagonal q_k = q0 (1+|k|^2)^(-s) acting identically on every solenoidal
direction of a mode, so sampling, traces and Girsanov weights are elementwise.

Noise streams are counter-based (see rng.py): draws are keyed by
(seed, step, sample) and therefore bitwise reproducible under any batch
partition or parallel schedule.
"""

from dataclasses import dataclass, replace
import csv
import math
from typing import Optional, Sequence

import numpy as np

from .errors import BlowupError, ConfigurationError
from .fields import SpectralField, save_field
from .modes import ModeBasis, mode_basis
from .operators import PhysicalParams, ForcingSpec, operator_points
from . import rng as rngmod

__all__ = [
    "NoiseSpec", "TimeGrid", "Trajectory", "sample_noise_increment", "step",
    "simulate", "continuous_dependence_gap", "check_moment_condition",
    "exponential_moment_statistic", "MomentCondition", "MomentReport",
]

BLOWUP_V_NORM = 1.0e6
DEFAULT_BATCH = 4096


@dataclass(frozen=True)
class NoiseSpec:
    """Diagonal trace-class covariance with LDP scale n.

    Eigenvalue q_k = q0 * (1+|k|^2)^(-s) on every solenoidal direction of
    mode k.  The decay must satisfy s > d/2 + 1 so that the untruncated trace
    of A^{1/2} Q A^{1/2} is finite; the default in configs is s = d/2 + 2.
    """
    q0: float
    s: float
    n: float = 1.0

    def __post_init__(self):
        if self.q0 < 0:
            raise ValueError(f"q0 must be nonnegative, got {self.q0}")
        if self.n < 1:
            raise ValueError(f"LDP scale n must be >= 1, got {self.n}")

    def validate_for_dim(self, dim: int) -> "NoiseSpec":
        if self.s <= dim / 2.0 + 1.0:
            raise ValueError(
                f"noise decay s={self.s} must exceed d/2+1={dim/2+1}")
        return self

    def with_n(self, n: float) -> "NoiseSpec":
        return replace(self, n=float(n))

    def qvals(self, basis: ModeBasis) -> np.ndarray:
        return basis.qvals(self.q0, self.s)

    def trace_q(self, basis: ModeBasis) -> float:
        """Tr(Q) over retained modes, d-1 directions per mode (d at k=0)."""
        return float(np.sum(self.qvals(basis)))

    def trace_q1(self, basis: ModeBasis) -> float:
        """Tr(A^{1/2} Q A^{1/2}) over retained modes."""
        return float(np.sum(basis.lam_dof * self.qvals(basis)))


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_end: float
    steps: int

    def __post_init__(self):
        if self.steps < 1 or self.t_end <= self.t0:
            raise ConfigurationError(
                f"bad time grid: [{self.t0}, {self.t_end}] in {self.steps}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.steps

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def node_index(self, t: float, tol: float = 1e-9) -> int:
        """Index of the grid node at time t; off-grid times are an error."""
        pos = (t - self.t0) / self.dt
        idx = int(round(pos))
        if idx < 0 or idx > self.steps or abs(pos - idx) > tol:
            raise ConfigurationError(f"time {t} is not a grid node")
        return idx


def stability_bound(params: PhysicalParams, y0: SpectralField,
                    forcing: Optional[ForcingSpec], horizon: float) -> float:
    """Heuristic dt bound for the explicit nonlinear terms.

    Uses a crude forecast of the state amplitude: the initial V norm plus the
    forcing bound integrated over the horizon.  dt must stay below
    min(0.5/v_max^2, 0.1/(beta*amp^(r-1))).
    """
    from .fields import norm, to_physical
    r_f = forcing.v_bound if forcing is not None else 0.0
    vmax = norm(y0, "V") + horizon * r_f
    grid = to_physical(y0)
    amp = float(np.max(np.sqrt(np.sum(grid.values**2, axis=0))))
    amp += horizon * r_f
    bound = math.inf
    if params.include_convection and vmax > 0:
        bound = min(bound, 0.5 / vmax**2)
    if params.beta > 0 and amp > 0:
        bound = min(bound, 0.1 / (params.beta * amp ** (params.r - 1.0)))
    return bound


@dataclass
class Trajectory:
    """Snapshots (t_i, field) on a grid, with per-step norms if recorded."""
    grid: TimeGrid
    fields: list
    norms: Optional[dict] = None

    def __post_init__(self):
        times = self.grid.times()
        if len(self.fields) != len(times):
            raise ConfigurationError("snapshot count does not match grid")

    def times(self) -> np.ndarray:
        return self.grid.times()

    def __getitem__(self, i):
        return self.grid.times()[i], self.fields[i]

    def __len__(self):
        return len(self.fields)

    def to_csv(self, path):
        """CSV of (t, ||u||_H, ||u||_V, ||u||_{L^{r+1}}) per step."""
        if self.norms is None:
            raise ConfigurationError("trajectory was run without norms")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "norm_H", "norm_V", "norm_Lr1"])
            for i, t in enumerate(self.times()):
                writer.writerow([f"{t:.12g}",
                                 f"{self.norms['H'][i]:.15g}",
                                 f"{self.norms['V'][i]:.15g}",
                                 f"{self.norms['Lr1'][i]:.15g}"])

    def dump_snapshots(self, directory, at_indices):
        import os
        for i in at_indices:
            t = self.times()[i]
            save_field(self.fields[i],
                       os.path.join(directory, f"field_{i:05d}_t{t:.6f}.bin"))


# ------------------------------------------------------------- ensemble core

class _EnsembleRun:
    """Batched integrating-factor integration in packed coordinates."""

    def __init__(self, basis, params, forcing, noise, grid, seed,
                 tilt_packed=None, noise_rows=None):
        self.basis = basis
        self.params = params
        self.grid = grid
        self.seed = seed
        self.noise = noise
        self.tilt = tilt_packed
        self.noise_rows = noise_rows
        self.points = operator_points(basis, params.r)
        self.efac = np.exp(-(params.mu * basis.lam_dof + params.alpha)
                           * grid.dt)
        if noise is not None:
            self.qs = np.sqrt(noise.qvals(basis))
        elif tilt_packed is not None:
            raise ConfigurationError("tilted run needs a NoiseSpec")
        self.forcing_packed = None
        self.forcing = forcing
        if forcing is not None:
            self.forcing_packed = basis.pack(forcing.profile.flat_coeffs())

    def _nonlinear(self, p):
        from .operators import nonlinear_drift_packed
        return nonlinear_drift_packed(self.basis, p, self.params, self.points)

    def run(self, p0, first_sample=0, record_every=None, snap_steps=(),
            track_sup_v=False, want_logweight=False):
        basis, grid = self.basis, self.grid
        p = np.array(p0, dtype=float)
        n_samples = p.shape[0]
        dt = grid.dt
        sqrt_dt = math.sqrt(dt)
        noise = self.noise
        scale = 1.0 / math.sqrt(noise.n) if noise is not None else 0.0
        logw = np.zeros(n_samples)
        sup_v2 = None
        if track_sup_v:
            sup_v2 = np.sum((1.0 + basis.lam_dof) * p**2, axis=-1)
        snaps = {}
        recorded = []
        if 0 in snap_steps:
            snaps[0] = p.copy()
        if record_every:
            recorded.append(p.copy())
        for j in range(grid.steps):
            t = grid.t0 + j * dt
            nl = self._nonlinear(p)
            if self.forcing_packed is not None:
                amp = self.forcing.amplitude_at(t)
                if amp:
                    nl = nl + amp * self.forcing_packed
            p = self.efac * (p + dt * nl)
            if self.tilt is not None:
                p = p + dt * (self.qs * self.tilt[j])
            if noise is not None and noise.q0 > 0.0:
                rows = self.noise_rows or n_samples
                z = rngmod.normal_block(self.seed, rngmod.TAG_NOISE, j,
                                        first_sample, rows, basis.n_dof)
                if rows != n_samples:
                    z = np.broadcast_to(z, (n_samples, basis.n_dof))
                dw = sqrt_dt * z
                p = p + scale * self.qs * dw
                if want_logweight and self.tilt is not None:
                    u_j = self.tilt[j]
                    logw -= math.sqrt(noise.n) * (dw @ u_j)
                    logw -= 0.5 * noise.n * dt * float(u_j @ u_j)
            v2 = np.sum((1.0 + basis.lam_dof) * p**2, axis=-1)
            if not np.all(np.isfinite(v2)) or np.max(v2) > BLOWUP_V_NORM**2:
                raise BlowupError(
                    f"state blew up at t={t + dt:.6g} "
                    f"(max V norm {np.sqrt(np.max(v2)):.3e})", time=t + dt)
            if track_sup_v:
                sup_v2 = np.maximum(sup_v2, v2)
            if (j + 1) in snap_steps:
                snaps[j + 1] = p.copy()
            if record_every:
                recorded.append(p.copy())
        return {"final": p, "logw": logw, "sup_v2": sup_v2,
                "snaps": snaps, "recorded": recorded}


def _pack_state(y0: SpectralField):
    basis = y0.basis
    return basis, basis.pack(y0.flat_coeffs())


# ------------------------------------------------------------- public ops

def sample_noise_increment(noise: NoiseSpec, dt: float,
                           stream: np.random.Generator, *, dim: int,
                           resolution: int) -> SpectralField:
    """One additive-noise increment: Q^{1/2} dW / sqrt(n) as a field.

    Gaussian with variance q_k*dt/n on each direction of the orthonormal real
    solenoidal basis, reality and solenoidality holding by construction.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    basis = mode_basis(dim, resolution)
    z = rngmod.normals_from(stream, basis.n_dof)
    packed = np.sqrt(noise.qvals(basis) * dt / noise.n) * z
    return SpectralField.from_flat(dim, resolution, basis.unpack(packed))


def step(state: SpectralField, t: float, dt: float, params: PhysicalParams,
         forcing: Optional[ForcingSpec] = None,
         noise_increment: Optional[SpectralField] = None) -> SpectralField:
    """One integrating-factor step from (t, state) to t+dt."""
    basis, p = _pack_state(state)
    grid = TimeGrid(t, t + dt, 1)
    run = _EnsembleRun(basis, params, forcing, None, grid, seed=0)
    nl = run._nonlinear(p[None, :])[0]
    if run.forcing_packed is not None:
        nl = nl + forcing.amplitude_at(t) * run.forcing_packed
    p = run.efac * (p + dt * nl)
    if noise_increment is not None:
        p = p + basis.pack(noise_increment.flat_coeffs())
    if not np.all(np.isfinite(p)):
        raise BlowupError(f"non-finite state at t={t + dt:.6g}", time=t + dt)
    return SpectralField.from_flat(state.dim, state.resolution,
                                   basis.unpack(p))


def simulate(y0: SpectralField, params: PhysicalParams,
             forcing: Optional[ForcingSpec], noise: Optional[NoiseSpec],
             grid: TimeGrid, seed: int = 0, record_norms: bool = True,
             enforce_stability: bool = True) -> Trajectory:
    """Integrate one trajectory, deterministic when noise is absent."""
    params.validate_for_dim(y0.dim)
    if enforce_stability:
        bound = stability_bound(params, y0, forcing, grid.t_end - grid.t0)
        if grid.dt > bound:
            raise ConfigurationError(
                f"dt={grid.dt:.3g} exceeds stability bound {bound:.3g}")
    basis, p0 = _pack_state(y0)
    run = _EnsembleRun(basis, params, forcing, noise, grid, seed)
    out = run.run(p0[None, :], record_every=1)
    fields = [SpectralField.from_flat(y0.dim, y0.resolution,
                                      basis.unpack(p[0]))
              for p in out["recorded"]]
    norms = None
    if record_norms:
        from .fields import norm
        norms = {"H": [], "V": [], "Lr1": []}
        for f in fields:
            norms["H"].append(norm(f, "H"))
            norms["V"].append(norm(f, "V"))
            norms["Lr1"].append(norm(f, "Lp", p=params.r + 1.0))
        norms = {k: np.array(v) for k, v in norms.items()}
    return Trajectory(grid, fields, norms)


@dataclass
class GapReport:
    times: np.ndarray
    ratios: np.ndarray
    max_ratio: float
    fitted_rate: float


def continuous_dependence_gap(y1: SpectralField, y2: SpectralField,
                              params: PhysicalParams,
                              forcing: Optional[ForcingSpec],
                              noise: Optional[NoiseSpec], grid: TimeGrid,
                              seed: int = 0) -> GapReport:
    """Pathwise gap of two solutions driven by the same noise increments.

    Reports ||Y1(t)-Y2(t)||_H / ||y1-y2||_H over the grid and the rate of an
    exponential fit; the rate is reported, not asserted.
    """
    y1._check_compatible(y2)
    basis, p1 = _pack_state(y1)
    _, p2 = _pack_state(y2)
    gap0 = float(np.linalg.norm(p1 - p2))
    if gap0 == 0.0:
        times = grid.times()
        return GapReport(times, np.zeros_like(times), 0.0, 0.0)
    run = _EnsembleRun(basis, params, forcing, noise, grid, seed,
                       noise_rows=1)
    out = run.run(np.stack([p1, p2]), record_every=1)
    ratios = np.array([float(np.linalg.norm(p[0] - p[1])) / gap0
                       for p in out["recorded"]])
    times = grid.times()
    # least-squares exponential fit ratio ~ exp(rate * t)
    mask = ratios > 0
    rate = 0.0
    if mask.sum() > 1:
        t_rel = times[mask] - grid.t0
        coef = np.polyfit(t_rel, np.log(ratios[mask]), 1)
        rate = float(coef[0])
    return GapReport(times, ratios, float(ratios.max()), rate)


# --------------------------------------------------- exponential moment tools

@dataclass(frozen=True)
class MomentCondition:
    satisfied: bool
    branch: str
    note: str = ""


def check_moment_condition(params: PhysicalParams,
                           dim: int) -> MomentCondition:
    """Closed-form coefficient condition for the exponential moment bound.

    Two branches: mu >= max(1/alpha, 1/beta)/4, or the damping-vs-convection
    branch whose r=3 limit is 2*beta*mu >= 1.  In two dimensions the condition
    is not needed and the check always passes with a note.
    """
    if dim == 2:
        return MomentCondition(True, "dim2-exempt",
                               "no coefficient restriction needed in d=2")
    quarter = 0.25 * max(1.0 / params.alpha, 1.0 / params.beta) \
        if min(params.alpha, params.beta) > 0 else math.inf
    if params.mu >= quarter:
        return MomentCondition(True, "quarter-max")
    r = params.r
    e1 = (r - 3.0) / (r - 1.0)
    threshold = ((1.0 / params.alpha) ** e1
                 * ((r - 3.0) / (2.0 * (r - 1.0))) ** e1
                 * (1.0 / (params.beta * (r - 1.0))) ** (2.0 / (r - 1.0))) \
        if min(params.alpha, params.beta) > 0 else math.inf
    if params.mu >= threshold:
        return MomentCondition(True, "rho-star")
    return MomentCondition(
        False, "none",
        f"mu={params.mu} below quarter-max {quarter:.4g} "
        f"and rho-star threshold {threshold:.4g}")


def c1_exponent_bound(params: PhysicalParams, noise: NoiseSpec, dim: int,
                      resolution: int) -> float:
    """Largest admissible c1 in E[sup exp(n c1 ||Y||_V^2)], truncated trace.

    (alpha - rho*)/Tr(Q1) on the rho-star branch, (alpha - 1/(4 mu))/Tr(Q1)
    on the quarter branch; in d=2 the penalty drops entirely.
    """
    basis = mode_basis(dim, resolution)
    tq1 = noise.trace_q1(basis)
    if tq1 <= 0:
        return math.inf
    if dim == 2:
        return params.alpha / tq1
    penalties = [params.rho_star]
    if params.mu > 0:
        penalties.append(1.0 / (4.0 * params.mu))
    best = params.alpha - min(penalties)
    return best / tq1


@dataclass
class MomentReport:
    c1: float
    rows: list  # per n: {"n", "log_statistic", "normalized"}
    condition: MomentCondition

    def normalized_values(self):
        return [row["normalized"] for row in self.rows]


def exponential_moment_statistic(y0: SpectralField, params: PhysicalParams,
                                 forcing: Optional[ForcingSpec],
                                 noise: NoiseSpec, grid: TimeGrid, c1: float,
                                 samples: int, n_values: Sequence[float],
                                 seed: int = 0) -> MomentReport:
    """Monte Carlo monitor of E[sup_t exp(n c1 ||Y_n(t)||_V^2)] per n.

    Reported in the log domain; the monitored contract is that the
    (1/n) log statistic stays bounded as n grows.
    """
    dim = y0.dim
    cond = check_moment_condition(params, dim)
    if not cond.satisfied:
        raise ValueError(f"moment condition violated: {cond.note}")
    bound = c1_exponent_bound(params, noise, dim, y0.resolution)
    if not c1 < bound:
        raise ValueError(
            f"c1={c1} is not below the admissible bound {bound:.4g}")
    from .laplace import log_mean_exp
    basis, p0 = _pack_state(y0)
    rows = []
    for n in n_values:
        spec_n = noise.with_n(n)
        run = _EnsembleRun(basis, params, forcing, spec_n, grid, seed)
        sup_v2 = np.empty(samples)
        for a in range(0, samples, DEFAULT_BATCH):
            b = min(a + DEFAULT_BATCH, samples)
            tile = np.broadcast_to(p0, (b - a, basis.n_dof))
            out = run.run(tile, first_sample=a, track_sup_v=True)
            sup_v2[a:b] = out["sup_v2"]
        exponents = n * c1 * sup_v2
        log_stat = log_mean_exp(list(exponents))
        rows.append({"n": float(n), "log_statistic": float(log_stat),
                     "normalized": float(log_stat / n)})
    return MomentReport(c1=c1, rows=rows, condition=cond)
