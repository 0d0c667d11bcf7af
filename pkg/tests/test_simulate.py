import numpy as np
import pytest

from cbflow import (BlowupError, ConfigurationError, ForcingSpec, NoiseSpec,
                    PhysicalParams, SpectralField, TimeGrid,
                    check_moment_condition, continuous_dependence_gap,
                    exponential_moment_statistic, inner, norm,
                    random_divergence_free, sample_noise_increment, simulate,
                    step)
from cbflow.modes import mode_basis
from cbflow.simulate import c1_exponent_bound, stability_bound
from cbflow import rng as rngmod

FROZEN = PhysicalParams.frozen_dynamics()


def random_field(seed, res=8, dim=2, amp=0.6, decay=3.0):
    return random_divergence_free(seed, decay, amp, res, dim)


# ------------------------------------------------------------------- grids

def test_time_grid_basics():
    g = TimeGrid(0.0, 1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_allclose(g.times(), [0, 0.25, 0.5, 0.75, 1.0])
    assert g.node_index(0.5) == 2
    with pytest.raises(ConfigurationError):
        g.node_index(0.3)
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 0.0, 4)
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 1.0, 0)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(q0=-1.0, s=3.0)
    with pytest.raises(ValueError):
        NoiseSpec(q0=1.0, s=3.0, n=0.5)
    with pytest.raises(ValueError):
        NoiseSpec(q0=1.0, s=2.0).validate_for_dim(2)
    NoiseSpec(q0=1.0, s=3.0).validate_for_dim(2)


def test_noise_traces():
    basis = mode_basis(2, 8)
    spec = NoiseSpec(q0=0.5, s=3.0)
    q = spec.qvals(basis)
    # d' = 1 per nonzero mode (d-1 = 1), d = 2 at the zero mode
    assert spec.trace_q(basis) == pytest.approx(float(np.sum(q)))
    assert spec.trace_q1(basis) == pytest.approx(
        float(np.sum(basis.lam_dof * q)))
    assert q[0] == pytest.approx(0.5)  # zero-mode eigenvalue is q0


def test_stability_bound_enforced():
    big = random_field(1, amp=40.0)
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    bound = stability_bound(pp, big, None, 1.0)
    with pytest.raises(ConfigurationError):
        simulate(big, pp, None, None, TimeGrid(0.0, 1.0, max(
            1, int(0.5 / bound))), seed=0)


# ---------------------------------------------------------- noise sampling

def test_zero_q0_gives_zero_increment():
    inc = sample_noise_increment(NoiseSpec(0.0, 3.0), 0.1,
                                 rngmod.generator(0, 1), dim=2, resolution=8)
    assert np.all(inc.coeffs == 0.0)


def test_increment_variance_in_solenoidal_basis():
    # component variance q_k dt / n in the orthonormal real basis
    basis = mode_basis(2, 8)
    spec = NoiseSpec(q0=0.5, s=3.0, n=2.0)
    gen = rngmod.generator(0, 777)
    draws = np.stack([basis.pack(sample_noise_increment(
        spec, 0.1, gen, dim=2, resolution=8).flat_coeffs())
        for _ in range(30000)])
    target = spec.qvals(basis) * 0.1 / 2.0
    z = np.abs(draws.var(axis=0) - target) / (target * np.sqrt(2.0 / 30000))
    # a handful of named dofs at 3 sigma, the max over all at 4.5
    assert np.all(z[:8] < 3.0)
    assert z.max() < 4.5


def test_increment_scaling_with_n():
    basis = mode_basis(2, 8)
    gen1 = rngmod.generator(1, 7)
    gen2 = rngmod.generator(1, 7)
    draws = {}
    for n, gen in ((4.0, gen1), (16.0, gen2)):
        spec = NoiseSpec(q0=0.5, s=3.0, n=n)
        draws[n] = np.stack([basis.pack(sample_noise_increment(
            spec, 0.1, gen, dim=2, resolution=8).flat_coeffs())
            for _ in range(20000)])
    ratio = draws[4.0].std(axis=0)[:20] / draws[16.0].std(axis=0)[:20]
    # quadrupling n halves the standard deviation
    np.testing.assert_allclose(ratio, 2.0, rtol=0.02)


def test_increment_field_is_admissible():
    inc = sample_noise_increment(NoiseSpec(1.0, 3.0), 0.05,
                                 rngmod.generator(3, 5), dim=3, resolution=4)
    inc.validate()


# ---------------------------------------------------------------- stepping

def test_zero_state_stays_zero():
    z = SpectralField.zero(2, 8)
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    out = step(z, 0.0, 0.01, pp)
    assert np.all(out.coeffs == 0.0)


def test_linear_mode_decays_exactly():
    # beta = 0 and a single transverse mode: exact exponential factor
    pp = PhysicalParams(mu=0.7, alpha=0.3, beta=0.0, r=3.0, test_mode=True)
    u = SpectralField.single_mode(2, 8, (1, 0), (0.0, 0.5))
    out = step(u, 0.0, 0.05, pp)
    np.testing.assert_allclose(out.coeffs,
                               np.exp(-(0.7 + 0.3) * 0.05) * u.coeffs,
                               atol=1e-16)


def test_pure_noise_step_adds_increment_exactly():
    u = random_field(4)
    inc = sample_noise_increment(NoiseSpec(0.5, 3.0), 0.01,
                                 rngmod.generator(0, 2), dim=2, resolution=8)
    out = step(u, 0.0, 0.01, FROZEN, noise_increment=inc)
    np.testing.assert_allclose(out.coeffs - u.coeffs, inc.coeffs, atol=1e-15)


@pytest.mark.filterwarnings("ignore:invalid value", "ignore:overflow")
def test_step_detects_blowup():
    u = random_field(5, amp=1.0)
    pp = PhysicalParams(mu=0.0, alpha=0.0, beta=1e8, r=5.0, test_mode=True,
                        include_convection=False)
    with pytest.raises(BlowupError) as err:
        state = u
        for j in range(50):
            state = step(state, j * 0.5, 0.5, pp)
    assert err.value.time is not None


# ---------------------------------------------------------------- simulate

def test_deterministic_energy_is_nonincreasing():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    traj = simulate(random_field(6), pp, None, None, TimeGrid(0, 0.25, 32),
                    seed=0)
    assert np.all(np.diff(traj.norms["H"]) <= 1e-12)


def test_energy_budget_residual_halves_with_dt():
    # discrete energy equality: residual is O(dt) under the explicit scheme
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    y0 = random_field(7)
    residuals = []
    for steps in (16, 32, 64):
        grid = TimeGrid(0.0, 0.25, steps)
        traj = simulate(y0, pp, None, None, grid, seed=0)
        h, v, lp = (traj.norms["H"], traj.norms["V"], traj.norms["Lr1"])
        diss = np.sum((v[:-1] ** 2 - h[:-1] ** 2) + h[:-1] ** 2
                      + lp[:-1] ** (pp.r + 1.0)) * grid.dt
        residuals.append(0.5 * h[-1] ** 2 - 0.5 * h[0] ** 2 + diss)
    r1 = residuals[0] / residuals[1]
    r2 = residuals[1] / residuals[2]
    assert 1.6 < r1 < 2.6 and 1.6 < r2 < 2.6


def test_energy_budget_with_forcing():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    y0 = random_field(8)
    forcing = ForcingSpec.single_mode(2, 8, (1, 0), (0.0, 0.3))
    residuals = []
    for steps in (20, 40):
        grid = TimeGrid(0.0, 0.25, steps)
        traj = simulate(y0, pp, forcing, None, grid, seed=0)
        h, v, lp = (traj.norms["H"], traj.norms["V"], traj.norms["Lr1"])
        work = np.array([inner(forcing.at(t), f) for t, f in
                         zip(grid.times()[:-1], traj.fields[:-1])])
        diss = np.sum((v[:-1] ** 2 - h[:-1] ** 2) + h[:-1] ** 2
                      + lp[:-1] ** (pp.r + 1.0) - work) * grid.dt
        residuals.append(abs(0.5 * h[-1] ** 2 - 0.5 * h[0] ** 2 + diss))
    assert residuals[1] < 0.7 * residuals[0]


def test_simulation_is_reproducible_bitwise():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    noise = NoiseSpec(0.2, 3.0, 4.0)
    grid = TimeGrid(0.0, 0.25, 16)
    t1 = simulate(random_field(9), pp, None, noise, grid, seed=21)
    t2 = simulate(random_field(9), pp, None, noise, grid, seed=21)
    for a, b in zip(t1.fields, t2.fields):
        assert np.array_equal(a.coeffs, b.coeffs)
    t3 = simulate(random_field(9), pp, None, noise, grid, seed=22)
    assert not np.array_equal(t1.fields[-1].coeffs, t3.fields[-1].coeffs)


def test_states_remain_admissible_along_the_path():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    noise = NoiseSpec(0.3, 3.0, 2.0)
    traj = simulate(random_field(10), pp, None, noise,
                    TimeGrid(0.0, 0.2, 16), seed=3)
    for f in traj.fields:
        f.validate()


def test_three_dimensional_simulation_smoke():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    y0 = random_field(30, res=4, dim=3, amp=0.4)
    traj = simulate(y0, pp, None, NoiseSpec(0.1, 3.5, 4.0),
                    TimeGrid(0.0, 0.1, 8), seed=5)
    for f in traj.fields:
        f.validate()
    det = simulate(y0, pp, None, None, TimeGrid(0.0, 0.1, 8), seed=0)
    assert np.all(np.diff(det.norms["H"]) <= 1e-12)


def test_integrator_is_first_order():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    y0 = random_field(11)
    ref = simulate(y0, pp, None, None, TimeGrid(0.0, 0.2, 256), seed=0)
    errors = []
    for steps in (32, 64):
        t = simulate(y0, pp, None, None, TimeGrid(0.0, 0.2, steps), seed=0)
        errors.append(norm(t.fields[-1] - ref.fields[-1], "H"))
    assert 1.7 < errors[0] / errors[1] < 2.4


def test_trajectory_csv_round_trip(tmp_path):
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    traj = simulate(random_field(12), pp, None, None, TimeGrid(0, 0.1, 8),
                    seed=0)
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "t,norm_H,norm_V,norm_Lr1"
    assert len(rows) == 10
    first = [float(x) for x in rows[1].split(",")]
    assert first[1] == pytest.approx(norm(traj.fields[0], "H"))


def test_trajectory_snapshot_dump(tmp_path):
    from cbflow import load_field
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    traj = simulate(random_field(12), pp, None, None, TimeGrid(0, 0.1, 8),
                    seed=0)
    traj.dump_snapshots(tmp_path, [0, 4, 8])
    files = sorted(tmp_path.glob("field_*.bin"))
    assert len(files) == 3
    mid = load_field(files[1])
    assert np.array_equal(mid.coeffs, traj.fields[4].coeffs)


# ---------------------------------------------------- continuous dependence

def test_gap_of_identical_states_is_zero():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    y = random_field(13)
    rep = continuous_dependence_gap(y, y, pp, None, NoiseSpec(0.2, 3.0, 4.0),
                                    TimeGrid(0, 0.2, 16), seed=0)
    assert rep.max_ratio == 0.0


def test_linear_gap_matches_exponential_decay():
    pp = PhysicalParams(mu=0.0, alpha=0.4, beta=0.0, r=3.0, test_mode=True,
                        include_convection=False)
    y1, y2 = random_field(14), random_field(15)
    rep = continuous_dependence_gap(y1, y2, pp, None,
                                    NoiseSpec(0.2, 3.0, 4.0),
                                    TimeGrid(0, 0.5, 20), seed=1)
    np.testing.assert_allclose(rep.ratios, np.exp(-0.4 * rep.times),
                               atol=1e-13)
    assert rep.fitted_rate == pytest.approx(-0.4, abs=1e-10)


def test_gap_ratio_shrinks_with_more_viscosity():
    y1 = random_field(16, amp=0.8)
    y2 = y1 + 0.01 * random_field(17, amp=1.0)
    maxima = []
    for mu in (0.5, 1.5):
        pp = PhysicalParams(mu=mu, alpha=1.0, beta=1.0, r=4.0)
        rep = continuous_dependence_gap(y1, y2, pp, None,
                                        NoiseSpec(0.2, 3.0, 16.0),
                                        TimeGrid(0, 0.5, 64), seed=2)
        maxima.append(rep.max_ratio)
        assert np.isfinite(rep.fitted_rate)
    assert maxima[1] <= maxima[0]


# -------------------------------------------------------- moment condition

def test_moment_condition_quarter_branch():
    cond = check_moment_condition(PhysicalParams(1.0, 1.0, 1.0, 4.0), 3)
    assert cond.satisfied and cond.branch == "quarter-max"


def test_moment_condition_critical_exponent_limit():
    # at r=3 the closed form reduces to 2 beta mu >= 1
    cond = check_moment_condition(
        PhysicalParams(mu=0.5, alpha=1.0, beta=1.0, r=3.0), 3)
    assert cond.satisfied


def test_moment_condition_fails_for_small_viscosity():
    cond = check_moment_condition(
        PhysicalParams(mu=0.01, alpha=1.0, beta=1.0, r=4.0, test_mode=True),
        3)
    assert not cond.satisfied
    assert "0.25" in cond.note


def test_moment_condition_dim2_exemption():
    cond = check_moment_condition(
        PhysicalParams(mu=0.01, alpha=1.0, beta=1.0, r=4.0, test_mode=True),
        2)
    assert cond.satisfied and cond.branch == "dim2-exempt"


# ------------------------------------------------------- moment statistic

def test_moment_statistic_deterministic_limit():
    # q0 = 0 and f = 0: the sup sits at t = 0 by dissipation, so the
    # statistic is exactly exp(n c1 ||y0||_V^2)
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    y0 = random_field(18)
    rep = exponential_moment_statistic(
        y0, pp, None, NoiseSpec(0.0, 3.0), TimeGrid(0, 0.2, 16), c1=0.05,
        samples=10, n_values=[2.0, 8.0], seed=0)
    v2 = norm(y0, "V") ** 2
    for row in rep.rows:
        assert row["normalized"] == pytest.approx(0.05 * v2, rel=1e-12)


def test_moment_statistic_rejects_large_c1():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    noise = NoiseSpec(0.3, 3.0)
    bound = c1_exponent_bound(pp, noise, 2, 8)
    with pytest.raises(ValueError):
        exponential_moment_statistic(
            random_field(19), pp, None, noise, TimeGrid(0, 0.2, 8),
            c1=bound * 1.01, samples=10, n_values=[2.0], seed=0)


def test_moment_statistic_rejects_bad_condition():
    pp = PhysicalParams(mu=0.01, alpha=1.0, beta=1.0, r=4.0, test_mode=True)
    with pytest.raises(ValueError):
        exponential_moment_statistic(
            random_field(20, dim=3, res=4), pp, None, NoiseSpec(0.1, 3.5),
            TimeGrid(0, 0.2, 8), c1=0.01, samples=10, n_values=[2.0], seed=0)


def test_moment_statistic_normalized_is_monotone_within_slack():
    pp = PhysicalParams(1.0, 1.0, 1.0, 4.0)
    noise = NoiseSpec(0.3, 3.0)
    y0 = random_field(21, amp=0.3)
    c1 = min(0.25 * c1_exponent_bound(pp, noise, 2, 8),
             0.5 / (1.0 + norm(y0, "V") ** 2))
    rep = exponential_moment_statistic(
        y0, pp, None, noise, TimeGrid(0, 0.2, 16), c1=c1, samples=400,
        n_values=[4.0, 16.0, 64.0], seed=0)
    vals = rep.normalized_values()
    assert all(vals[i + 1] <= vals[i] * 1.2 + 1e-12
               for i in range(len(vals) - 1))
