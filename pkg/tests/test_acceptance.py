"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`.  The convergence-law
criterion runs the full Monte Carlo ladder and takes a few minutes; everything
else is fast.
"""

import time

import numpy as np
import pytest

from cbflow import (ControlPath, ExperimentConfig, NoiseSpec,
                    OptimizerOptions, PhysicalParams, TimeGrid,
                    check_moment_condition, continuous_dependence_gap,
                    cost_and_gradient, estimate_laplace, inner,
                    linear_observable, minimize_value, norm,
                    random_divergence_free, simulate, tanh_observable)
from cbflow.harness import run_convergence_study, run_property_suite
from cbflow.modes import mode_basis


def _report(name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}"
    if detail:
        line += f" :: {detail}"
    print(line, flush=True)
    assert passed, line


def test_criterion_1_operator_identity_suite():
    # >= 1000 random dealiased fields, d=2, N=16, r in {3,4,5}; identities at
    # their stated tolerances; runtime under a minute
    start = time.monotonic()
    cfg = ExperimentConfig(dim=2, resolution=16, property_fields=1000,
                           r_values=[3.0, 4.0, 5.0], seed=2024)
    report = run_property_suite(cfg)
    elapsed = time.monotonic() - start
    failed = [row["check"] for row in report.rows if not row["passed"]]
    _report("criterion 1: operator identity suite",
            report.passed and elapsed < 60.0,
            f"{len(report.rows)} checks, failed={failed}, {elapsed:.1f}s")


@pytest.mark.parametrize("r", [3.0, 4.0])
def test_criterion_2_adjoint_gradient_correctness(r):
    # 25 (control, direction) pairs per exponent, rel error < 1e-4 at eps=1e-5
    start = time.monotonic()
    basis = mode_basis(2, 8)
    pp = PhysicalParams(1.0, 1.0, 1.0, r)
    noise = NoiseSpec(0.3, 3.0)
    grid = TimeGrid(0.0, 0.2, 12)
    g = tanh_observable(random_divergence_free(5, 3.0, 0.9, 8, 2), 0.5)
    y0 = random_divergence_free(6, 3.0, 0.6, 8, 2)
    rng = np.random.default_rng(int(r * 100))
    worst = 0.0
    for _ in range(25):
        shape = (grid.steps, basis.n_dof)
        decay = (1.0 + basis.lam_dof) ** -1.0
        u = ControlPath(2, 8, grid, 0.3 * rng.standard_normal(shape) * decay)
        d = ControlPath(2, 8, grid, rng.standard_normal(shape) * decay)
        _, grad = cost_and_gradient(y0, u, g, pp, None, noise, grid)
        pairing = grid.dt * float(np.sum(grad.packed * d.packed))
        eps = 1e-5
        cp, _ = cost_and_gradient(y0, u + eps * d, g, pp, None, noise, grid)
        cm, _ = cost_and_gradient(y0, u - eps * d, g, pp, None, noise, grid)
        fd = (cp - cm) / (2.0 * eps)
        worst = max(worst, abs(fd - pairing) / max(abs(fd), 1e-12))
    elapsed = time.monotonic() - start
    _report(f"criterion 2: adjoint gradient vs finite differences (r={r:g})",
            worst < 1e-4 and elapsed < 120.0,
            f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_closed_form_oracles():
    # frozen dynamics + linear observable: Gaussian closed form for the
    # Laplace value, linear-quadratic closed form for the control value,
    # and the sign relation between the two
    frozen = PhysicalParams.frozen_dynamics()
    basis = mode_basis(2, 8)
    phi = random_divergence_free(10, 3.0, 0.8, 8, 2)
    y0 = random_divergence_free(11, 3.0, 0.7, 8, 2)
    noise = NoiseSpec(0.4, 3.0)
    grid = TimeGrid(0.0, 0.4, 16)
    g = linear_observable(phi)
    qs_phi = np.sqrt(noise.qvals(basis)) * basis.pack(phi.flat_coeffs())
    closed = -inner(phi, y0) + 0.5 * 0.4 * float(np.sum(qs_phi**2))

    est = estimate_laplace(y0, g, 4.0, 10_000, frozen, None, noise, grid,
                           seed=42)
    est_ok = abs(est.value - closed) <= est.ci

    res = minimize_value(y0, g, frozen, None, noise, grid,
                         OptimizerOptions(restarts=0))
    ctrl_ok = abs(res.value - (-closed)) < 1e-6

    sign_ok = abs(est.value + res.value) <= est.ci + 1e-6
    _report("criterion 3: closed-form oracles",
            est_ok and ctrl_ok and sign_ok,
            f"estimator gap {abs(est.value - closed):.2e} (ci {est.ci:.2e}), "
            f"optimizer gap {abs(res.value + closed):.2e}")


@pytest.mark.slow
def test_criterion_4_convergence_law():
    # d=2, N=8, r=4, mu=alpha=beta=1, bounded tanh observable,
    # n in {4,16,64,256} with M = 4000 sqrt(n), tilted estimator:
    # gaps nonincreasing beyond CI, log-log slope in [-1, -0.25]
    start = time.monotonic()
    cfg = ExperimentConfig(
        dim=2, resolution=8,
        params={"mu": 1.0, "alpha": 1.0, "beta": 1.0, "r": 4.0},
        noise={"q0": 0.25},
        observable={"id": "tanh", "cap": 0.5,
                    "field": {"kind": "random", "seed": 17, "decay": 3.0,
                              "amplitude": 1.0}},
        y0={"kind": "random", "seed": 7, "decay": 3.0, "amplitude": 0.6},
        n_list=[4, 16, 64, 256],
        mc={"base": 4000.0, "power": 0.5},
        time={"t0": 0.0, "t_end": 0.25, "steps": 32},
        seed=1234,
    )
    report = run_convergence_study(cfg, jobs=2)
    elapsed = time.monotonic() - start
    gaps = ", ".join(f"n={row['n']:g}: {row['gap']:.2e}"
                     for row in report.rows)
    _report("criterion 4: convergence law",
            report.passed and elapsed < 1200.0,
            f"slope {report.slope:.2f} in {report.slope_band}, "
            f"nonincreasing={report.nonincreasing}, gaps [{gaps}], "
            f"{elapsed:.0f}s")


def test_criterion_5_energy_budget_richardson():
    # discrete energy equality residual halves when dt halves (three levels)
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    y0 = random_divergence_free(7, 3.0, 0.6, 8, 2)
    residuals = []
    for steps in (16, 32, 64):
        grid = TimeGrid(0.0, 0.25, steps)
        traj = simulate(y0, pp, None, None, grid, seed=0)
        h, v, lp = traj.norms["H"], traj.norms["V"], traj.norms["Lr1"]
        diss = np.sum((v[:-1] ** 2 - h[:-1] ** 2) + h[:-1] ** 2
                      + lp[:-1] ** 5) * grid.dt
        residuals.append(0.5 * h[-1] ** 2 - 0.5 * h[0] ** 2 + diss)
    r10 = residuals[0] / residuals[1]
    r21 = residuals[1] / residuals[2]
    ok = 1.6 < r10 < 2.6 and 1.6 < r21 < 2.6
    _report("criterion 5: energy budget residual halves with dt",
            ok, f"ratios {r10:.2f}, {r21:.2f}")


def test_criterion_6_continuous_dependence_envelope():
    # 100 nearby pairs with shared noise: the pathwise gap ratio admits a
    # finite fitted exponential envelope (boundedness is the assertion)
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    noise = NoiseSpec(0.25, 3.0, 16.0)
    grid = TimeGrid(0.0, 0.25, 32)
    rates, max_ratios = [], []
    for seed in range(100):
        y1 = random_divergence_free(seed, 3.0, 0.6, 8, 2)
        y2 = y1 + 0.02 * random_divergence_free(1000 + seed, 3.0, 1.0, 8, 2)
        rep = continuous_dependence_gap(y1, y2, pp, None, noise, grid,
                                        seed=seed)
        with np.errstate(divide="ignore"):
            pointwise = np.log(np.maximum(rep.ratios[1:], 1e-300)) \
                / rep.times[1:]
        rates.append(float(np.max(pointwise)))
        max_ratios.append(rep.max_ratio)
    c_hat = max(rates)
    envelope = np.exp(np.maximum(c_hat, 0.0) * grid.t_end)
    ok = np.isfinite(c_hat) and all(m <= envelope + 1e-9 for m in max_ratios)
    _report("criterion 6: continuous dependence envelope", ok,
            f"fitted C {c_hat:.3f}, envelope e^(C T) = {envelope:.3f}, "
            f"max ratio {max(max_ratios):.3f}")


def test_criterion_7_moment_condition_logic():
    case1 = check_moment_condition(PhysicalParams(1.0, 1.0, 1.0, 4.0), 3)
    ok1 = case1.satisfied and case1.branch == "quarter-max"
    # r=3 with 2 beta mu = 1 sits exactly on the admissible boundary
    case2 = check_moment_condition(
        PhysicalParams(mu=0.5, alpha=1.0, beta=1.0, r=3.0), 3)
    ok2 = case2.satisfied
    case3 = check_moment_condition(
        PhysicalParams(mu=0.01, alpha=1.0, beta=1.0, r=4.0, test_mode=True),
        3)
    ok3 = not case3.satisfied
    case4 = check_moment_condition(
        PhysicalParams(mu=0.01, alpha=1.0, beta=1.0, r=4.0, test_mode=True),
        2)
    ok4 = case4.satisfied and case4.branch == "dim2-exempt"
    _report("criterion 7: moment condition logic",
            ok1 and ok2 and ok3 and ok4,
            f"branches: {case1.branch}, {case2.branch}, "
            f"{case3.branch}, {case4.branch}")
