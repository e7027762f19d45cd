"""Desk-scale acceptance gates, one criterion per test.

Each test exercises one end-to-end property of the package at its stated
tolerance and records exactly one PASS/FAIL line (printed in the pytest
terminal summary). The contraction and ergodic-agreement gates dominate the
runtime; the whole module takes on the order of ten minutes.
"""

import dataclasses
import json
import time

import numpy as np
import pytest
from scipy.signal import lfilter

from _report import record
from ergoflow import (ControlSpec, EulerVoigt, ForcingSet, FractionalEuler,
                      Grid, NavierStokes, Observable, PrescribedPath,
                      SineGordon, SpectralField, StepperConfig, WaveState,
                      advect, biot_savart, curl, ergodic_agreement, inner,
                      integrate, inviscid_limit_study, martingale_tail_check,
                      run_ensemble, run_pair, sobolev_norm)
from ergoflow.cli import main as cli_main
from ergoflow.forcing import NoisePath
from test_spectral import dense_advection_oracle


def criterion(num, passed, detail):
    line = record(num, passed, detail)
    assert passed, line


def random_vorticity(grid, seed, amplitude=1.0, decay=2.0):
    rng = np.random.default_rng(seed)
    return vorticity_draw(grid, rng, amplitude, decay)


def vorticity_draw(grid, rng, amplitude, decay):
    f = SpectralField.from_physical(grid, rng.standard_normal(grid.shape))
    c = f.coeffs
    w = np.zeros(grid.shape)
    nz = grid.k_sq > 0
    w[nz] = grid.k_sq[nz] ** (-decay / 2.0)
    c *= w
    c[:, ~grid.dealias_mask] = 0.0
    c[:, 0, 0] = 0.0
    c *= amplitude / sobolev_norm(f)
    return f


def fluid_pair_sampler(grid, amplitude=1.0, decay=2.0):
    def pair(rng):
        return (vorticity_draw(grid, rng, amplitude, decay),
                vorticity_draw(grid, rng, amplitude, decay))
    return pair


def wave_draw(grid, rng, amplitude, decay=1.0):
    band = grid.modes_x // 3
    u = SpectralField.zeros(grid)
    v = SpectralField.zeros(grid)
    for f in (u, v):
        for k in range(1, band + 1):
            a = rng.standard_normal() * k ** (-decay)
            f.coeffs[0, 0, k] = -0.5j * a
            f.coeffs[0, 0, -k % grid.modes_x] = 0.5j * a
    norm = np.sqrt(sobolev_norm(u, 1.0) ** 2 + sobolev_norm(v) ** 2)
    u.coeffs *= amplitude / norm
    v.coeffs *= amplitude / norm
    return WaveState(u, v)


def wave_pair_sampler(grid, amplitude=1.0):
    def pair(rng):
        return wave_draw(grid, rng, amplitude), wave_draw(grid, rng, amplitude)
    return pair


def max_step_cost_violation(summary, budget):
    """Worst excess of realized cost over budget + max single-step increment.

    Cost series are sampled at checkpoints, so the per-checkpoint increment
    upper-bounds the single-step one; negative return means no violation.
    """
    worst = -np.inf
    for row in summary.per_replica:
        if row["diverged"]:
            continue
        costs = np.asarray(row["costs"])
        max_inc = float(np.max(np.diff(costs))) if costs.size > 1 else 0.0
        worst = max(worst, row["cost"] - (budget + max_inc + 1e-12))
    return worst


# -- shared heavy ensembles ----------------------------------------------------


@pytest.fixture(scope="module")
def nse_contraction():
    """50 shadow pairs of the viscous flow, T = 200; the long gate."""
    grid = Grid(32, 32)
    model = NavierStokes(nu=0.1, advection=True)
    forcing = ForcingSet.vorticity_shells(grid, 2, 0.5)
    control = ControlSpec(k_cut=np.sqrt(2.0), budget=1e4)
    config = StepperConfig(dt=1e-2, t_end=200.0, checkpoint_every=100)
    summary = run_ensemble(model, forcing, config, control,
                           fluid_pair_sampler(grid), 50, 11, record_rho=True)
    gain, _ = control.resolve(model, grid, forcing)
    return {"summary": summary, "gain": gain, "control": control}


@pytest.fixture(scope="module")
def sg_coupling():
    """50 shadow pairs of the damped wave model at 128 modes."""
    grid = Grid(128)
    model = SineGordon(alpha_damp=0.5, beta=1.0)
    forcing = ForcingSet.sine_modes(grid, 8, 1.0)
    control = ControlSpec(k_cut=8.0, budget=1e4, form="sine-difference")
    config = StepperConfig(dt=0.01, t_end=40.0, checkpoint_every=50)
    summary = run_ensemble(model, forcing, config, control,
                           wave_pair_sampler(grid), 50, 5, record_rho=True)
    return {"summary": summary, "model": model, "grid": grid,
            "control": control}


# -- criteria ------------------------------------------------------------------


def test_criterion_01_spectral_oracles():
    t0 = time.perf_counter()
    grid = Grid(8, 8)
    xi = random_vorticity(grid, 101)
    theta = random_vorticity(grid, 102)
    vel = biot_savart(xi)
    got = advect(vel, theta).coeffs[0]
    want = dense_advection_oracle(vel, theta, grid)
    adv_err = float(np.max(np.abs(got - want)))

    curl_err = 0.0
    for seed in (201, 202, 203):
        f = random_vorticity(Grid(16, 16), seed)
        back = curl(biot_savart(f))
        curl_err = max(curl_err, float(np.max(np.abs(back.coeffs - f.coeffs))))
    elapsed = time.perf_counter() - t0

    ok = adv_err <= 1e-12 and curl_err <= 1e-12 and elapsed < 1.0
    criterion(1, ok,
              f"spectral oracles: dense-convolution gap {adv_err:.2e}, "
              f"curl-of-velocity-reconstruction gap {curl_err:.2e} "
              f"(tol 1e-12), {elapsed:.2f}s")


def test_criterion_02_conservation():
    # skew symmetry of the advection pairing, 100 random dealiased trials
    grid = Grid(16, 16)
    worst = 0.0
    for i in range(100):
        xi = random_vorticity(grid, 1000 + i)
        vel = biot_savart(random_vorticity(grid, 2000 + i))
        worst = max(worst, abs(inner(advect(vel, xi), xi)))

    # undamped inviscid Voigt conserves the smoothed enstrophy
    g32 = Grid(32, 32)
    u0 = random_vorticity(g32, 7, amplitude=1.0, decay=2.0)
    model = EulerVoigt(gamma_damp=0.0, alpha=1.0, eps_visc=0.0, advection=True)
    forcing = ForcingSet.vorticity_shells(g32, 1, 1.0)
    config = StepperConfig(dt=1e-3, t_end=1.0, checkpoint_every=100)
    still = PrescribedPath(np.zeros((config.n_steps, forcing.dimension)),
                           config.dt)
    traj = integrate(model, u0, forcing, config, still, record_states=False)
    e = traj.energy["alpha_vorticity_sq"]
    drift = abs(float(e[-1]) - float(e[0])) / float(e[0])

    ok = worst <= 1e-10 and drift <= 1e-3
    criterion(2, ok,
              f"conservation: max |<u.grad xi, xi>| = {worst:.2e} over 100 "
              f"trials (tol 1e-10); inviscid undamped energy drift "
              f"{drift:.2e} over unit time (tol 1e-3)")


def test_criterion_03_per_mode_variance():
    grid = Grid(8, 8)
    forcing = ForcingSet.vorticity_shells(grid, 1, 0.7)
    site = (0, 1)  # wavenumber (1, 0), |k|^2 = 1
    from ergoflow.stepping import FluidStepper

    details, ok = [], True
    for nu, dt in ((1.0, 0.1), (10.0, 0.1), (100.0, 0.05)):
        model = NavierStokes(nu=nu, advection=False)
        st = FluidStepper(model, grid, forcing, dt)
        c = float(st.decay[site].real)
        eta = float(st.eta[site])
        nd = forcing.dimension
        D = np.array([st.assemble_noise(np.eye(nd)[j])[site]
                      for j in range(nd)])
        m = nu  # |k|^2 = 1 at this site
        target = float(np.sum(np.abs(D) ** 2)) / (2.0 * m)

        # the site recursion is exactly the full-grid step at that site
        rng = np.random.default_rng(42)
        state = np.zeros(grid.shape, dtype=np.complex128)
        x = 0.0 + 0.0j
        zero_drift = np.zeros(grid.shape, dtype=np.complex128)
        consistent = True
        for _ in range(1000):
            noise = st.assemble_noise(rng.standard_normal(nd) * np.sqrt(dt))
            state = st.step(state, zero_drift, noise)
            x = c * x + eta * noise[site]
            if state[site] != x:
                consistent = False
                break

        # the same recursion over 1e6 steps, vectorized
        rng2 = np.random.default_rng(7)
        dW = rng2.standard_normal((1_000_000, nd)) * np.sqrt(dt)
        xs = lfilter([eta], [1.0, -c], dW @ D)
        burn = int(10 / (m * dt))
        var = float(np.mean(np.abs(xs[burn:]) ** 2))
        rel = abs(var - target) / target
        ok = ok and consistent and rel < 0.01
        details.append(f"m*dt={m * dt:g}: {rel:.2%}")

    criterion(3, ok,
              "per-mode stationary variance within 1% over 1e6 steps, "
              "step recursion bit-consistent with the integrator ["
              + "; ".join(details) + "]")


def test_criterion_04_cost_budget_invariant(nse_contraction, sg_coupling):
    # binding budget: overshoot is at most one step's cost increment
    grid = Grid(8, 8)
    model = NavierStokes(nu=0.1, advection=False)
    forcing = ForcingSet.vorticity_shells(grid, 1, 1.0)
    budget = 5e-4
    control = ControlSpec(k_cut=1.0, budget=budget)
    config = StepperConfig(dt=0.01, t_end=1.0, checkpoint_every=1)
    tight = run_ensemble(model, forcing, config, control,
                         fluid_pair_sampler(grid), 10, 23, record_rho=True)
    all_hit = tight.tau_hit_count == tight.n_replicas
    worst_tight = max_step_cost_violation(tight, budget)

    frozen_after_stop = True
    for row in tight.per_replica:
        costs = np.asarray(row["costs"])
        hit = np.flatnonzero(costs >= budget)
        flag_consistent = row["tau_hit"] == bool(hit.size)
        if (not flag_consistent or hit.size == 0
                or np.any(np.diff(costs[hit[0]:]) != 0.0)):
            frozen_after_stop = False

    # every coupled ensemble in this suite satisfies the same bound
    worst_big = max(
        max_step_cost_violation(nse_contraction["summary"], 1e4),
        max_step_cost_violation(sg_coupling["summary"], 1e4))

    # budget 0 switches the control off; the pair is then bit-identical
    # to two independent free runs on the same increments
    g32 = Grid(32, 32)
    nse = NavierStokes(nu=0.1, advection=True)
    f32 = ForcingSet.vorticity_shells(g32, 2, 0.5)
    cfg = StepperConfig(dt=0.01, t_end=1.0, checkpoint_every=10)
    src = NoisePath(seed=91, replica_id=0, dt=cfg.dt,
                    dimension=f32.dimension)
    inc = np.array([src.sample_increments() for _ in range(cfg.n_steps)])
    a0 = random_vorticity(g32, 51)
    b0 = random_vorticity(g32, 52)
    off = ControlSpec(k_cut=np.sqrt(2.0), budget=0.0)
    pr = run_pair(nse, f32, cfg, PrescribedPath(inc, cfg.dt),
                  a0.copy(), b0.copy(), off, record_states=True)
    ta = integrate(nse, a0.copy(), f32, cfg, PrescribedPath(inc, cfg.dt))
    tb = integrate(nse, b0.copy(), f32, cfg, PrescribedPath(inc, cfg.dt))
    bit_identical = (
        np.array_equal(pr.leader_states[-1].coeffs, ta.final_state.coeffs)
        and np.array_equal(pr.shadow_states[-1].coeffs, tb.final_state.coeffs))

    ok = (all_hit and worst_tight <= 0.0 and frozen_after_stop
          and worst_big <= 0.0 and bit_identical)
    criterion(4, ok,
              f"cost budget: binding budget hit by {tight.tau_hit_count}/"
              f"{tight.n_replicas} (need all), overshoot <= one step "
              f"increment (worst excess {worst_tight:.1e}), frozen after the "
              f"stop: {frozen_after_stop}, zero violations across suite "
              f"ensembles: {worst_big <= 0.0}, budget-0 pair bit-identical "
              f"to free runs: {bit_identical}")


def test_criterion_05_low_mode_coupling_contracts(nse_contraction):
    s = nse_contraction["summary"]
    gain = nse_contraction["gain"]
    need_rate = gain / 4.0
    rate_floor = (min(s.rates_of_successes())
                  if s.success_count else float("nan"))
    ok = (s.success_rate >= 0.80
          and s.success_count > 0 and rate_floor >= need_rate
          and s.tau_hit_rate <= 0.10)
    criterion(5, ok,
              f"feedback coupling: {s.success_count}/{s.n_replicas} pairs "
              f"reached 1e-3 of the initial gap (need >= 80%), slowest "
              f"success rate {rate_floor:.3f} >= {need_rate:.3f}, budget-hit "
              f"rate {s.tau_hit_rate:.2f} <= 0.10")


def test_criterion_06_pair_energy_residual_is_first_order():
    grid = Grid(32, 32)
    model = NavierStokes(nu=0.1, advection=True)
    forcing = ForcingSet.vorticity_shells(grid, 2, 0.5)
    control = ControlSpec(k_cut=np.sqrt(2.0), budget=1e4)
    leader0 = random_vorticity(grid, 1)
    shadow0 = random_vorticity(grid, 2)

    fine_dt, t_end = 1e-3, 0.2
    n_fine = int(round(t_end / fine_dt))
    src = NoisePath(seed=77, replica_id=0, dt=fine_dt,
                    dimension=forcing.dimension)
    inc = np.array([src.sample_increments() for _ in range(n_fine)])

    res = {}
    for dt in (2e-3, 1e-3):
        step = int(round(dt / fine_dt))
        coarse = inc.reshape(n_fine // step, step, -1).sum(axis=1)
        config = StepperConfig(dt=dt, t_end=t_end, checkpoint_every=10)
        pr = run_pair(model, forcing, config, PrescribedPath(coarse, dt),
                      leader0.copy(), shadow0.copy(), control, gronwall=True)
        res[dt] = pr.gronwall
    ratio_max = res[2e-3]["residual_max"] / res[1e-3]["residual_max"]
    ratio_sum = res[2e-3]["residual_sum"] / res[1e-3]["residual_sum"]

    ok = 1.7 <= ratio_max <= 2.3
    criterion(6, ok,
              f"pair energy identity residual: halving dt 2e-3 -> 1e-3 "
              f"scales the max residual by {ratio_max:.3f} (need [1.7, 2.3]; "
              f"integrated residual ratio {ratio_sum:.3f})")


def test_criterion_07_wave_coupling_contracts(sg_coupling):
    s = sg_coupling["summary"]
    model = sg_coupling["model"]
    grid = sg_coupling["grid"]
    lam1 = model.lambda_1(grid)
    a = model.alpha_damp
    eps = min(lam1 / a, a / 2.0, np.sqrt(lam1 / 2.0))
    assert model.eps_shift(grid) == pytest.approx(eps, rel=1e-12)

    need = eps / 4.0
    frac = float(np.mean(s.rates >= need))
    ok = frac >= 0.80 and len(s.diverged) == 0
    criterion(7, ok,
              f"wave-pair coupling: fitted decay rate >= {need:.4f} "
              f"(= shift/4, shift {eps:.2f} recomputed) in "
              f"{frac:.0%} of {s.n_replicas} replicas (need >= 80%)")


def test_criterion_08_energy_envelope_tails():
    grid = Grid(16, 16)
    model = NavierStokes(nu=0.1, advection=False)
    forcing = ForcingSet.vorticity_shells(grid, 1, 0.05)
    config = StepperConfig(dt=0.01, t_end=10.0, checkpoint_every=100)
    u0 = random_vorticity(grid, 3, amplitude=0.5)
    table = martingale_tail_check(model, forcing, config, u0, 500, 29)
    assert table.gamma == pytest.approx(
        model.nu / forcing.velocity_sigma_sq, rel=1e-12)

    parts = [f"R={row['r']:g}: {row['empirical']:.3f} <= {row['bound']:.3f}"
             for row in table.table()]
    ok = not table.any_flagged
    criterion(8, ok,
              f"envelope tails (500 replicas, gamma {table.gamma:.3f}): "
              + "; ".join(parts) + " (+3 binomial SE each)")


def test_criterion_09_time_averages_forget_the_start():
    grid = Grid(32, 32)
    model = FractionalEuler(gamma=1.0, advection=True)
    forcing = ForcingSet.vorticity_shells(grid, 2, 0.3)
    config = StepperConfig(dt=0.01, t_end=2000.0, checkpoint_every=100)
    obs = [Observable.energy(), Observable.low_mode_real((1, 0)),
           Observable.low_mode_real((0, 1))]
    u0_a = random_vorticity(grid, 1, amplitude=1.0)
    u0_b = random_vorticity(grid, 2, amplitude=2.0)
    report = ergodic_agreement(model, forcing, config, u0_a, u0_b, obs, 2.0,
                               burn_in=100.0, seed=17, replicas=(0, 1))
    parts = [f"{r.observable}: |d|={r.discrepancy:.3g} "
             f"<= 3x{r.combined_se:.3g}" for r in report.rows]
    criterion(9, report.all_agree,
              "time averages from O(1)-apart starts over horizon 2000: "
              + "; ".join(parts))


def test_criterion_10_viscosity_knob_order():
    grid = Grid(32, 32)
    model = EulerVoigt(gamma_damp=0.5, alpha=1.0, eps_visc=0.0, advection=True)
    forcing = ForcingSet.vorticity_shells(grid, 2, 0.01)
    config = StepperConfig(dt=0.01, t_end=5.0, checkpoint_every=100)
    avg_config = dataclasses.replace(config, t_end=100.0)

    def rough(rng):
        return vorticity_draw(grid, rng, amplitude=2.0, decay=0.4)

    report = inviscid_limit_study(
        model, forcing, config, [0.04, 0.02, 0.01, 0.005], 20, 123, rough,
        observables=[Observable.energy(), Observable.enstrophy()],
        avg_config=avg_config, avg_sample_period=1.0, burn_in=20.0)

    order_ok = 0.35 <= report.fitted_order <= 0.65

    rows = report.observable_rows
    base = rows[0]
    mono_ok = True
    for name in ("energy", "enstrophy"):
        dev = [abs(r[name] - base[name]) for r in rows[1:]]
        ses = [np.hypot(r[f"{name}_se"], base[f"{name}_se"])
               for r in rows[1:]]
        for i in range(len(dev) - 1):
            if dev[i + 1] > dev[i] + 2.0 * np.hypot(ses[i], ses[i + 1]):
                mono_ok = False

    ok = order_ok and mono_ok
    criterion(10, ok,
              f"shared-noise gap order in the viscosity knob: "
              f"{report.fitted_order:.3f} (need [0.35, 0.65]); time-average "
              f"deviations from the zero-knob run shrink monotonically "
              f"within SE: {mono_ok}")


COUPLE_YAML = """
model:
  variant: navier-stokes
  nu: 2.0
  advection: false
grid:
  modes_x: 8
forcing:
  max_shell: 1
stepper:
  dt: 0.01
  t_end: 0.5
  checkpoint_every: 10
control:
  k_cut: 1.0
  budget: 1.0e4
ensemble:
  replicas: 3
  seed: 11
  success_factor: 0.2
"""


def test_criterion_11_manifest_rerun_reproduces_bytes(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(COUPLE_YAML)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli_main(["couple", "--config", str(cfg), "--output", str(a)]) == 0
    assert cli_main(["couple", "--from-manifest", str(a / "manifest.json"),
                     "--output", str(b)]) == 0
    files_a = {p.relative_to(a) for p in a.rglob("*") if p.is_file()}
    files_b = {p.relative_to(b) for p in b.rglob("*") if p.is_file()}
    same_names = files_a == files_b
    compared, identical = 0, True
    for rel in sorted(files_a & files_b):
        if rel.name == "manifest.json":
            continue
        compared += 1
        if (a / rel).read_bytes() != (b / rel).read_bytes():
            identical = False
    sha_a = json.loads((a / "manifest.json").read_text())["config_sha256"]
    sha_b = json.loads((b / "manifest.json").read_text())["config_sha256"]

    ok = same_names and identical and compared >= 3 and sha_a == sha_b
    criterion(11, ok,
              f"manifest rerun: {compared} output files byte-identical "
              f"(manifest itself excluded), config digests match: "
              f"{sha_a == sha_b}")
