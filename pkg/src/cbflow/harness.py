"""Experiment orchestration: configs, catalogs, and the three studies.

The headline experiment is the convergence study: Monte Carlo Laplace values
at increasing LDP scale n against minus the optimal-control value, with the
optimizer's minimizer reused as the Girsanov tilt.  The property suite checks
every machine-checkable operator identity and estimate; the moment study
tabulates the exponential moment statistic across n.
"""

import concurrent.futures
from dataclasses import dataclass, field as dc_field, asdict
import json
import os
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .fields import (SpectralField, random_divergence_free, norm,
                     project_leray)
from .modes import mode_basis, dealias_points
from .operators import (PhysicalParams, ForcingSpec,
                        torus_identity_residual, absorption_degree,
                        convection_coeffs, absorption_coeffs, stokes_coeffs)
from .simulate import (NoiseSpec, TimeGrid, check_moment_condition,
                       exponential_moment_statistic, c1_exponent_bound)
from .laplace import (Observable, tanh_observable,
                      saturating_distance_observable, linear_observable,
                      constant_observable, estimate_laplace, write_ndjson)
from .control import OptimizerOptions, minimize_value

__all__ = [
    "ExperimentConfig", "ConvergenceReport", "PropertyReport",
    "run_convergence_study", "run_property_suite", "run_moment_study",
    "load_config",
]


# ------------------------------------------------------------------ catalogs

def build_field(spec: dict, dim: int, resolution: int) -> SpectralField:
    kind = spec.get("kind", "random")
    if kind == "zero":
        return SpectralField.zero(dim, resolution)
    if kind == "random":
        return random_divergence_free(
            seed=int(spec.get("seed", 0)), decay=float(spec.get("decay", 3.0)),
            amplitude=float(spec.get("amplitude", 1.0)),
            resolution=resolution, dim=dim)
    if kind == "single_mode":
        fld = SpectralField.single_mode(dim, resolution,
                                        tuple(spec["k"]),
                                        tuple(spec["amplitude"]))
        return project_leray(fld)
    if kind == "constant":
        values = list(spec["values"])
        base = SpectralField.zero(dim, resolution)
        flat = base.flat_coeffs().copy()
        flat[base.basis.zero_index] = np.asarray(values, dtype=float)
        return SpectralField.from_flat(dim, resolution, flat)
    raise ConfigurationError(f"unknown field kind {kind!r}")


def build_forcing(spec: Optional[dict], dim: int,
                  resolution: int) -> Optional[ForcingSpec]:
    if spec is None:
        return None
    kind = spec.get("id", "zero")
    if kind == "zero":
        return ForcingSpec.zero(dim, resolution)
    if kind == "constant":
        return ForcingSpec.constant_field(spec["values"], resolution)
    if kind == "single_mode":
        return ForcingSpec.single_mode(
            dim, resolution, tuple(spec["k"]), tuple(spec["amplitude"]),
            envelope=spec.get("envelope", "constant"),
            period=float(spec.get("period", 1.0)))
    raise ConfigurationError(f"unknown forcing id {kind!r}")


def build_observable(spec: dict, dim: int, resolution: int) -> Observable:
    kind = spec.get("id", "tanh")
    if kind == "constant":
        return constant_observable(float(spec.get("value", 1.0)),
                                   dim, resolution)
    ref = build_field(spec.get("field", {"kind": "random", "seed": 17}),
                      dim, resolution)
    if kind == "tanh":
        return tanh_observable(ref, float(spec.get("cap", 0.5)))
    if kind == "saturating":
        return saturating_distance_observable(ref, float(spec.get("cap", 0.5)))
    if kind == "linear":
        return linear_observable(ref)
    raise ConfigurationError(f"unknown observable id {kind!r}")


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment run."""
    name: str = "experiment"
    dim: int = 2
    resolution: int = 8
    params: dict = dc_field(default_factory=lambda: {
        "mu": 1.0, "alpha": 1.0, "beta": 1.0, "r": 4.0})
    forcing: Optional[dict] = None
    noise: dict = dc_field(default_factory=lambda: {"q0": 0.25})
    observable: dict = dc_field(default_factory=lambda: {
        "id": "tanh", "cap": 0.5, "field": {"kind": "random", "seed": 17,
                                            "decay": 3.0, "amplitude": 1.0}})
    y0: dict = dc_field(default_factory=lambda: {
        "kind": "random", "seed": 7, "decay": 3.0, "amplitude": 0.6})
    n_list: list = dc_field(default_factory=lambda: [4, 16, 64, 256])
    mc: dict = dc_field(default_factory=lambda: {
        "base": 4000.0, "power": 0.5})
    time: dict = dc_field(default_factory=lambda: {
        "t0": 0.0, "t_end": 0.25, "steps": 32})
    seed: int = 1234
    slope_band: list = dc_field(default_factory=lambda: [-1.0, -0.25])
    property_fields: int = 1000
    r_values: list = dc_field(default_factory=lambda: [3.0, 4.0, 5.0])
    moment: dict = dc_field(default_factory=lambda: {
        "samples": 2000, "c1_fraction": 0.25})
    optimizer: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if sorted(self.n_list) != list(self.n_list) or \
                len(set(self.n_list)) != len(self.n_list):
            raise ConfigurationError("n_list must be strictly increasing")
        self.physical_params().validate_for_dim(self.dim)
        self.noise_spec().validate_for_dim(self.dim)
        # catalog ids must resolve
        self.build_observable()
        self.forcing_spec()
        self.initial_field()
        pp = self.physical_params()
        if not pp.test_mode:
            cond = check_moment_condition(pp, self.dim)
            if not cond.satisfied:
                raise ConfigurationError(
                    f"moment condition fails outside test_mode: {cond.note}")

    def physical_params(self) -> PhysicalParams:
        return PhysicalParams(**self.params)

    def noise_spec(self) -> NoiseSpec:
        spec = dict(self.noise)
        spec.setdefault("s", self.dim / 2.0 + 2.0)
        return NoiseSpec(**spec)

    def forcing_spec(self) -> Optional[ForcingSpec]:
        return build_forcing(self.forcing, self.dim, self.resolution)

    def build_observable(self) -> Observable:
        return build_observable(self.observable, self.dim, self.resolution)

    def initial_field(self) -> SpectralField:
        return build_field(self.y0, self.dim, self.resolution)

    def time_grid(self) -> TimeGrid:
        return TimeGrid(float(self.time.get("t0", 0.0)),
                        float(self.time["t_end"]), int(self.time["steps"]))

    def samples_for(self, n: float) -> int:
        if "schedule" in self.mc:
            return int(dict(self.mc["schedule"])[str(int(n))])
        return int(round(float(self.mc.get("base", 4000.0))
                         * n ** float(self.mc.get("power", 0.5))))

    def optimizer_options(self) -> OptimizerOptions:
        return OptimizerOptions(**self.optimizer)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(**data)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


# --------------------------------------------------------- convergence study

@dataclass
class ConvergenceReport:
    reference_value: float
    rows: list          # per n: {n, M, value, ci, gap, ess}
    slope: float
    nonincreasing: bool
    slope_band: list
    passed: bool
    optimizer_record: dict

    def gaps(self):
        return [row["gap"] for row in self.rows]

    def to_summary(self) -> dict:
        return {"reference_value": self.reference_value, "rows": self.rows,
                "slope": self.slope, "nonincreasing": self.nonincreasing,
                "slope_band": self.slope_band, "passed": self.passed,
                "optimizer": self.optimizer_record}


def run_convergence_study(config: ExperimentConfig, jobs: int = 1,
                          out_dir=None) -> ConvergenceReport:
    """Laplace values against the control reference across the n ladder.

    Passes when the gaps |V_n + V| are nonincreasing beyond the combined
    bootstrap CIs and the log-log slope falls in the configured band.
    """
    params = config.physical_params()
    noise = config.noise_spec()
    forcing = config.forcing_spec()
    grid = config.time_grid()
    y0 = config.initial_field()
    g = config.build_observable()

    ref = minimize_value(y0, g, params, forcing, noise, grid,
                         config.optimizer_options(), seed=config.seed)
    if not ref.converged:
        raise RuntimeError(
            "reference optimizer did not converge; trace: "
            + json.dumps([[float(c), float(gn), float(s)]
                          for c, gn, s in ref.trace]))

    def one(n):
        est = estimate_laplace(y0, g, float(n), config.samples_for(n), params,
                               forcing, noise, grid, seed=config.seed,
                               tilt=ref.control)
        return est

    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            estimates = list(pool.map(one, config.n_list))
    else:
        estimates = [one(n) for n in config.n_list]

    rows = []
    for n, est in zip(config.n_list, estimates):
        gap = abs(est.value + ref.value)
        rows.append({"n": float(n), "M": est.samples, "value": est.value,
                     "ci": est.ci, "gap": gap, "ess": est.ess})

    gaps = np.array([row["gap"] for row in rows])
    cis = np.array([row["ci"] for row in rows])
    ns = np.array([row["n"] for row in rows])
    nonincreasing = all(
        gaps[i + 1] <= gaps[i] + cis[i] + cis[i + 1]
        for i in range(len(gaps) - 1))
    lo, hi = config.slope_band
    if np.all(gaps <= np.maximum(cis, 1e-12)):
        # degenerate runs (noise off, exact oracles): every gap vanishes
        # within its CI and there is no rate left to fit
        slope = 0.0
        passed = bool(nonincreasing)
    else:
        floor = max(1e-12, float(np.min(cis[cis > 0])) * 1e-3) \
            if np.any(cis > 0) else 1e-12
        slope = float(np.polyfit(np.log(ns),
                                 np.log(np.maximum(gaps, floor)), 1)[0])
        passed = bool(nonincreasing and lo <= slope <= hi)
    report = ConvergenceReport(
        reference_value=ref.value, rows=rows, slope=slope,
        nonincreasing=nonincreasing, slope_band=list(config.slope_band),
        passed=passed, optimizer_record=ref.to_record())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_ndjson([est.to_record(config.name) for est in estimates],
                     os.path.join(out_dir, "laplace.ndjson"))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(report.to_summary(), fh, indent=2)
    return report


# ------------------------------------------------------------ property suite

@dataclass
class PropertyReport:
    rows: list

    @property
    def passed(self) -> bool:
        return all(row["passed"] for row in self.rows)

    def to_summary(self) -> dict:
        return {"passed": self.passed, "rows": self.rows}


def _suite_row(check, worst, tol, count, detail="", hard=True):
    return {"check": check, "worst": float(worst), "tol": float(tol),
            "count": int(count), "passed": bool(worst <= tol) if hard
            else True, "detail": detail, "asserted": hard}


def run_property_suite(config: ExperimentConfig,
                       out_dir=None) -> PropertyReport:
    """Every machine-checkable identity and estimate, over random fields.

    Residuals are scaled by (1 + ||u||_V + ||v||_V)^(r+1) so tolerances are
    meaningful across amplitudes.  A deliberately aliased evaluation of the
    absorption/Stokes identity is included as a negative control.
    """
    dim, res = config.dim, config.resolution
    count = config.property_fields
    basis = mode_basis(dim, res)
    rows = []
    rng = np.random.default_rng(config.seed)

    def batch_fields(amplitude=0.8, decay=2.5):
        sigma = basis.qvals(1.0, decay) ** 0.5
        packed = amplitude * sigma * rng.standard_normal((count, basis.n_dof))
        return basis.unpack(packed)

    u = batch_fields()
    v = batch_fields()
    w = batch_fields()
    norm_u = np.sqrt(basis.norm_h(u)**2 + basis.norm_grad(u)**2)
    norm_v = np.sqrt(basis.norm_h(v)**2 + basis.norm_grad(v)**2)
    norm_w = np.sqrt(basis.norm_h(w)**2 + basis.norm_grad(w)**2)

    # Leray projection behaves like an orthogonal projection
    mixed = u.copy()
    mixed[..., 0] += 0.3 * np.abs(mixed[..., 0]).max()
    proj = basis.project(mixed)
    idem = np.max(np.abs(basis.project(proj) - proj))
    rows.append(_suite_row("leray_idempotent", idem, 1e-14, count))
    ortho = np.max(np.abs(basis.inner(proj, mixed - proj)))
    rows.append(_suite_row("leray_orthogonal", ortho, 1e-12 *
                           max(1.0, float(basis.norm_h(mixed).max()**2)),
                           count))

    # Parseval between spectral and quadrature norms
    pts = dealias_points(res, 2)
    grids = basis.to_grid(u, pts)
    cell = (2.0 * np.pi / pts) ** dim
    quad = np.sqrt(np.sum(grids**2, axis=tuple(range(-dim - 1, 0))) * cell)
    pars = np.max(np.abs(quad - basis.norm_h(u)) /
                  np.maximum(basis.norm_h(u), 1e-12))
    rows.append(_suite_row("parseval", pars, 1e-12, count))

    for r in config.r_values:
        r = float(r)
        params = PhysicalParams(mu=config.params.get("mu", 1.0),
                                alpha=config.params.get("alpha", 1.0),
                                beta=config.params.get("beta", 1.0), r=r)
        scale = (1.0 + norm_u + norm_v) ** (r + 1.0)
        scale3 = (1.0 + norm_u + norm_v + norm_w) ** (r + 1.0)
        points = dealias_points(res, max(2.0, absorption_degree(r)))

        buv = convection_coeffs(basis, u, v, points)
        buw = convection_coeffs(basis, u, w, points)
        cancel = np.abs(basis.inner(buv, v)) / scale
        rows.append(_suite_row(f"convection_cancellation_r{r:g}",
                               cancel.max(), 1e-10, count))
        anti = np.abs(basis.inner(buv, w) + basis.inner(buw, v)) / scale3
        rows.append(_suite_row(f"convection_antisymmetry_r{r:g}",
                               anti.max(), 1e-10, count))

        cu = absorption_coeffs(basis, u, r, points)
        cv = absorption_coeffs(basis, v, r, points)
        ugrid = basis.to_grid(u, points)
        vgrid = basis.to_grid(v, points)
        cell = (2.0 * np.pi / points) ** dim
        axes = tuple(range(-dim, 0))
        umag = np.sqrt(np.sum(ugrid**2, axis=-dim - 1))
        vmag = np.sqrt(np.sum(vgrid**2, axis=-dim - 1))
        lp_u = (np.sum(umag ** (r + 1.0), axis=axes) * cell)
        pairing_rel = np.abs(basis.inner(cu, u) - lp_u) / np.maximum(lp_u,
                                                                     1e-12)
        rows.append(_suite_row(f"absorption_pairing_r{r:g}",
                               pairing_rel.max(), 1e-8, count))

        # monotonicity of C: lower bounds with explicit constants
        dmag2 = np.sum((ugrid - vgrid)**2, axis=-dim - 1)
        pair_c = basis.inner(cu - cv, u - v)
        mid = 0.5 * np.sum((umag ** (r - 1.0) + vmag ** (r - 1.0)) * dmag2,
                           axis=axes) * cell
        lower = (np.sum(dmag2 ** ((r + 1.0) / 2.0), axis=axes) * cell
                 / 2.0 ** (r - 1.0))
        worst_mid = np.max((mid - pair_c) / scale)
        worst_low = np.max((lower - pair_c) / scale)
        rows.append(_suite_row(f"absorption_monotone_mid_r{r:g}", worst_mid,
                               1e-8, count))
        rows.append(_suite_row(f"absorption_monotone_low_r{r:g}", worst_low,
                               1e-8, count))

        lp_v = np.sum(vmag ** (r + 1.0), axis=axes) * cell
        lp_w = np.sum(np.sum(basis.to_grid(w, points)**2, axis=-dim - 1)
                      ** ((r + 1.0) / 2.0), axis=axes) * cell
        lp_d = np.sum(dmag2 ** ((r + 1.0) / 2.0), axis=axes) * cell
        e = 1.0 / (r + 1.0)
        upper = (r * (lp_u**e + lp_v**e) ** (r - 1.0)
                 * lp_d**e * lp_w**e)
        pair_cw = basis.inner(cu - cv, w)
        worst_up = np.max((pair_cw - upper) / scale3)
        rows.append(_suite_row(f"absorption_lipschitz_bound_r{r:g}", worst_up,
                               1e-8, count))

        # full monotonicity estimate for the summed operator
        pair_full = (params.mu * basis.inner(stokes_coeffs(basis, u - v),
                                             u - v)
                     + basis.inner(convection_coeffs(basis, u, u, points)
                                   - convection_coeffs(basis, v, v, points),
                                   u - v)
                     + params.beta * pair_c)
        grad_d = basis.norm_grad(u - v)
        h_d = basis.norm_h(u - v)
        if r == 3.0:
            wv2 = np.sum(vmag**2 * dmag2, axis=axes) * cell
            defect = pair_full - 0.5 * (params.beta
                                        - 1.0 / (2.0 * params.mu)) * wv2
        else:
            wu2 = np.sum(umag ** (r - 1.0) * dmag2, axis=axes) * cell
            defect = (pair_full + params.rho * h_d**2 - 0.5 * wu2
                      - 0.5 * params.mu * grad_d**2)
        rows.append(_suite_row(f"monotonicity_defect_r{r:g}",
                               np.max(-defect / scale), 1e-9, count))

        # absorption/Stokes pairing identity, with refinement decay and an
        # aliased negative control
        sample = min(count, 50)
        res_c, res_f, res_alias = [], [], []
        for i in range(sample):
            fld = SpectralField.from_flat(dim, res, u[i])
            s_i = 1.0 + float(norm_u[i]) ** (r + 1.0)
            coarse = dealias_points(res, max(2.0 * absorption_degree(r), 4.0))
            res_c.append(abs(torus_identity_residual(fld, r)) / s_i)
            res_f.append(abs(torus_identity_residual(
                fld, r, grid_points=2 * coarse)) / s_i)
            res_alias.append(abs(torus_identity_residual(
                fld, r, grid_points=res + 1)) / s_i)
        rows.append(_suite_row(f"torus_identity_r{r:g}", max(res_c), 1e-6,
                               sample))
        refine_ok = (max(res_f) <= max(res_c) * 1.5 + 1e-14)
        rows.append(_suite_row(
            f"torus_identity_refinement_r{r:g}",
            0.0 if refine_ok else 1.0, 0.5, sample,
            detail=f"coarse {max(res_c):.3e} refined {max(res_f):.3e}"))
        rows.append(_suite_row(
            f"torus_identity_alias_control_r{r:g}",
            0.0 if max(res_alias) > 10.0 * max(res_c) else 1.0,
            0.5, sample,
            detail=f"aliased {max(res_alias):.3e} vs dealiased "
                   f"{max(res_c):.3e}"))

        # instantaneous energy dissipation identity of the unforced drift
        du = (-params.mu * stokes_coeffs(basis, u) - params.alpha * u
              - convection_coeffs(basis, u, u, points)
              - params.beta * cu)
        lhs = basis.inner(du, u)
        rhs = -(params.mu * basis.norm_grad(u)**2
                + params.alpha * basis.norm_h(u)**2 + params.beta * lp_u)
        diss = np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-12)
        rows.append(_suite_row(f"energy_dissipation_r{r:g}", diss.max(),
                               1e-8, count))

        # drift local Lipschitz monitor on a V ball (reported, not asserted)
        ratio = np.sqrt(np.sum((basis.pack(du) - basis.pack(
            -params.mu * stokes_coeffs(basis, v) - params.alpha * v
            - convection_coeffs(basis, v, v, points)
            - params.beta * cv))**2, axis=-1))
        vdist = np.sqrt(basis.norm_h(u - v)**2 + basis.norm_grad(u - v)**2)
        lip = np.max(ratio / np.maximum(vdist, 1e-12))
        rows.append(_suite_row(f"drift_lipschitz_monitor_r{r:g}", 0.0, 1.0,
                               count, detail=f"max ratio {lip:.3e}",
                               hard=False))

    # interpolation inequality between Lebesgue norms, shared grid
    pts = dealias_points(res, 5)
    cell = (2.0 * np.pi / pts) ** dim
    axes = tuple(range(-dim, 0))
    mag = np.sqrt(np.sum(basis.to_grid(u, pts)**2, axis=-dim - 1))
    worst_interp = -np.inf
    for s1, s2, theta in ((2.0, 6.0, 0.5), (2.0, 4.0, 0.25), (3.0, 5.0, 0.7)):
        s = 1.0 / (theta / s1 + (1.0 - theta) / s2)
        n_s = (np.sum(mag**s, axis=axes) * cell) ** (1.0 / s)
        n_1 = (np.sum(mag**s1, axis=axes) * cell) ** (1.0 / s1)
        n_2 = (np.sum(mag**s2, axis=axes) * cell) ** (1.0 / s2)
        worst_interp = max(worst_interp,
                           float(np.max(n_s - n_1**theta * n_2**(1 - theta))))
    rows.append(_suite_row("lp_interpolation", worst_interp, 1e-10, count))

    # scalar logarithm bounds used by the moment reports
    xs = np.linspace(0.0, 50.0, 20001)
    worst_log1 = float(np.max(np.log1p(xs) - xs))
    xs2 = np.linspace(1e-9, 0.5, 20001)
    worst_log2 = float(np.max(-2.0 * xs2 - np.log(1.0 - xs2)))
    rows.append(_suite_row("log_upper_bound", worst_log1, 0.0, xs.size))
    rows.append(_suite_row("log_lower_bound", worst_log2, 0.0, xs2.size))

    report = PropertyReport(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(report.to_summary(), fh, indent=2)
    return report


# -------------------------------------------------------------- moment study

def run_moment_study(config: ExperimentConfig, out_dir=None) -> dict:
    """Exponential moment statistics and energy functionals across n."""
    params = config.physical_params()
    noise = config.noise_spec()
    cond = check_moment_condition(params, config.dim)
    if not cond.satisfied:
        raise ValueError(f"moment condition fails ({cond.branch}): "
                         f"{cond.note}")
    y0 = config.initial_field()
    grid = config.time_grid()
    forcing = config.forcing_spec()
    bound = c1_exponent_bound(params, noise, config.dim, config.resolution)
    c1 = config.moment.get("c1")
    if c1 is None:
        c1 = float(config.moment.get("c1_fraction", 0.25)) * bound
        c1 = min(c1, 0.5 / (1.0 + norm(y0, "V") ** 2))
    rep = exponential_moment_statistic(
        y0, params, forcing, noise, grid, c1,
        int(config.moment.get("samples", 2000)),
        [float(n) for n in config.n_list], seed=config.seed)
    normalized = rep.normalized_values()
    bounded = all(normalized[i + 1] <= normalized[i] * 1.2 + 1e-12
                  for i in range(len(normalized) - 1))
    summary = {"condition": asdict(rep.condition), "c1": c1,
               "c1_bound": bound, "rows": rep.rows,
               "normalized_nonincreasing_within_slack": bounded}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
    return summary
