"""Shadow-pair runs: shared noise, low-mode feedback, and the cost budget.

run_pair advances a leader and a controlled shadow under one Wiener path.
The shadow's drift carries the feedback shift (gain * P_N(leader - shadow)
for the fluid models, beta * P_N(sin u - sin u~) for the wave model), gated
by the Girsanov ledger: the shift is applied only while the accumulated
quadratic cost sits strictly below the budget, so the realized cost can
overshoot the budget by at most one step's increment. With the budget at
zero the shadow reproduces the free run bit for bit.

The contraction diagnostic is rho_tilde(leader, shadow) at checkpoints; a
pair "succeeds" when the final gap is below success_factor times the initial
one, and the contraction rate is fitted on the post-transient log gap.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, DivergedTrajectory
from .forcing import ForcingSet, GirsanovLedger, NoisePath
from .models import EulerVoigt, NavierStokes, WaveState, is_fluid
from .spectral import GalerkinCutoff, Grid, SpectralField
from .stepping import (FluidStepper, StepperConfig, WaveStepper, _cfl_ratio,
                       sanitize_fluid)


@dataclass(frozen=True)
class ControlSpec:
    """Cutoff, budget, and gain of the low-mode feedback shift.

    gain=None picks the dissipation-matched default nu * lambda_N for
    NavierStokes (lambda_N = smallest excluded eigenvalue of the cutoff);
    the other fluid models have no canonical scale and require it spelled
    out. The wave form carries its own gain (the model's beta).
    """

    k_cut: float
    budget: float
    gain: float | None = None
    form: str = "linear-projection"   # or "sine-difference"

    def __post_init__(self):
        if self.k_cut <= 0:
            raise ConfigError("control.k_cut must be positive")
        if self.budget < 0:
            raise ConfigError("control.budget must be nonnegative")
        if self.form not in ("linear-projection", "sine-difference"):
            raise ConfigError(f"unknown control form {self.form!r}")

    def resolve(self, model, grid: Grid, forcing: ForcingSet):
        """Validate against model/grid/forcing; returns (gain, cutoff)."""
        if is_fluid(model) and self.form != "linear-projection":
            raise ConfigError("fluid models take the linear-projection control")
        if not is_fluid(model) and self.form != "sine-difference":
            raise ConfigError("the wave model takes the sine-difference control")
        if isinstance(model, EulerVoigt) and model.alpha <= 2.0 / 3.0:
            raise ConfigError("coupling the Voigt model needs alpha > 2/3")
        third = grid.modes_x / 3.0
        if grid.dim == 2:
            third = min(third, grid.modes_y / 3.0)
        if self.k_cut > third:
            raise ConfigError(
                f"control.k_cut = {self.k_cut} exceeds the dealiased band "
                f"(|k| <= {third:.1f}); controlled modes must be fully resolved")
        cutoff = GalerkinCutoff(grid, self.k_cut)
        if not forcing.covers(cutoff.low_mask):
            raise ConfigError(
                "every controlled mode must be forced: enlarge the forcing "
                "set or shrink control.k_cut")
        gain = self.gain
        if gain is None:
            if isinstance(model, NavierStokes):
                gain = model.nu * cutoff.lambda_n
            elif is_fluid(model):
                raise ConfigError(
                    "control.gain must be given for this model (no "
                    "dissipation scale to derive it from)")
            else:
                gain = model.beta
        elif not is_fluid(model):
            raise ConfigError(
                "the sine-difference control always uses the model's beta; "
                "drop control.gain")
        if is_fluid(model) and gain <= 0:
            raise ConfigError("control.gain must be positive")
        return gain, cutoff


@dataclass
class PairResult:
    """Checkpoint record of one coupled pair."""

    times: np.ndarray
    rho: np.ndarray
    costs: np.ndarray
    ledger: GirsanovLedger
    success: bool
    fitted_rate: float
    tau_hit: bool
    leader_energy: dict
    shadow_energy: dict
    envelope_sup: float | None = None
    leader_states: list = field(default_factory=list)
    shadow_states: list = field(default_factory=list)
    gronwall: dict | None = None

    @property
    def final_cost(self) -> float:
        return float(self.costs[-1])


def fit_contraction_rate(times, rho, t_end, transient_fraction=0.25,
                         floor=1e-14) -> float:
    """Minus the slope of log rho after the transient window.

    Returns +inf when the gap collapses below the floor too fast to fit
    (including the exactly-zero gap of identical initial states), nan when
    the usable points are too few for any statement.
    """
    times = np.asarray(times, dtype=float)
    rho = np.asarray(rho, dtype=float)
    floor_eff = max(floor, 1e-13 * rho[0]) if rho[0] > 0 else floor
    # once the gap first touches the floor it is numerically zero; later
    # bounces back above the floor are roundoff, not signal, so the series
    # is cut at the first crossing rather than filtered pointwise
    dead = np.flatnonzero(rho <= floor_eff)
    collapsed = dead.size > 0
    if collapsed:
        times, rho = times[:dead[0]], rho[:dead[0]]
    keep = times >= transient_fraction * t_end
    if np.count_nonzero(keep) < 3:
        return np.inf if collapsed else np.nan
    slope = np.polyfit(times[keep], np.log(rho[keep]), 1)[0]
    return float(-slope)


def run_pair(model, forcing: ForcingSet, config: StepperConfig, path,
             leader0, shadow0, control: ControlSpec, *,
             record_states: bool = False, success_factor: float = 1e-3,
             transient_fraction: float = 0.25, rate_floor: float = 1e-14,
             gronwall: bool = False) -> PairResult:
    """Advance a coupled pair under one noise path; see the module docstring."""
    if is_fluid(model):
        return _run_pair_fluid(model, forcing, config, path, leader0, shadow0,
                               control, record_states, success_factor,
                               transient_fraction, rate_floor, gronwall)
    if gronwall:
        raise ConfigError("the envelope residual check is defined for the "
                          "fluid models only")
    return _run_pair_wave(model, forcing, config, path, leader0, shadow0,
                          control, record_states, success_factor,
                          transient_fraction, rate_floor)


def _control_tables(forcing: ForcingSet, mask: np.ndarray):
    """Masked pseudo-inverse tables: exact h on the covered low modes."""
    idx = np.flatnonzero(mask.ravel())
    pars = (2.0 * np.pi) ** forcing.grid.dim
    dirs_low = pars * np.conj(forcing.directions.reshape(forcing.dimension, -1)[:, idx])
    gram = cho_factor(forcing.gram)
    return idx, dirs_low, gram


def _run_pair_fluid(model, forcing, config, path, leader0, shadow0, control,
                    record_states, success_factor, transient_fraction,
                    rate_floor, gronwall):
    grid = leader0.grid
    model.check_grid(grid)
    dt = config.dt
    n_steps = config.n_steps
    stepper = FluidStepper(model, grid, forcing, dt)
    gain, cutoff = control.resolve(model, grid, forcing)
    mask = cutoff.low_mask
    idx, dirs_low, gram = _control_tables(forcing, mask)
    rho_w = model.rho_mode_weights(grid)
    ledger = GirsanovLedger(budget=control.budget)

    u = sanitize_fluid(leader0).coeffs[0]
    s = sanitize_fluid(shadow0).coeffs[0]
    if model.advection:
        worst = max(_cfl_ratio(model, SpectralField(grid, u[None]), dt),
                    _cfl_ratio(model, SpectralField(grid, s[None]), dt))
        if worst > 1.0:
            raise ValueError("dt violates the advective CFL bound 0.5*dx/max|u| at t=0")
    fhat = None
    if getattr(model, "body_force", None) is not None:
        fhat = sanitize_fluid(model.body_force).coeffs[0]

    drift_const = forcing.velocity_sigma_sq
    if fhat is not None:
        w_e = stepper.w_energy
        f_minus1_sq = float(np.sum(
            w_e / np.where(grid.k_sq > 0, grid.k_sq, 1.0) * np.abs(fhat) ** 2))
        drift_const += f_minus1_sq / model.nu

    if gronwall:
        c_active = stepper.decay - gain * stepper.phi1dt * mask
        res_sum = 0.0
        res_max = 0.0

    def rho_of(diff):
        return float(np.sqrt(np.sum(rho_w * (diff.real ** 2 + diff.imag ** 2))))

    zero_drift = np.zeros(grid.shape, dtype=np.complex128)

    times = [0.0]
    rho = [rho_of(u - s)]
    costs = [0.0]
    e_lead = [stepper.velocity_energy(u)]
    diss_lead = [stepper.dissipation_rate(u)]
    e_shadow = [stepper.velocity_energy(s)]
    leader_states = [SpectralField(grid, u.copy()[None])] if record_states else []
    shadow_states = [SpectralField(grid, s.copy()[None])] if record_states else []
    last_finite = 0.0

    for n in range(1, n_steps + 1):
        dW = path.sample_increments()
        noise = stepper.assemble_noise(dW)
        if model.advection:
            d_lead = model.nonlinear_drift(SpectralField(grid, u[None])).coeffs[0]
            d_shadow = model.nonlinear_drift(SpectralField(grid, s[None])).coeffs[0]
        else:
            d_lead = zero_drift
            d_shadow = zero_drift
        if fhat is not None:
            d_lead = d_lead + fhat
            d_shadow = d_shadow + fhat
        h_sq = 0.0
        active = ledger.control_active
        if active:
            g_vec = u.ravel()[idx] - s.ravel()[idx]
            if not np.all(np.isfinite(g_vec.view(float))):
                raise DivergedTrajectory(
                    f"pair lost finiteness at t = {(n - 1) * dt:.6g}", last_finite)
            g_vec = gain * g_vec
            h = cho_solve(gram, np.real(dirs_low @ g_vec), check_finite=False)
            h_sq = float(h @ h)
            shift = np.zeros(grid.shape, dtype=np.complex128)
            shift.ravel()[idx] = g_vec
            d_shadow = d_shadow + shift
        if gronwall:
            v = u - s
            cv = (c_active if active else stepper.decay) * v
            d_ex = (d_lead - d_shadow) + (shift if active else 0.0)
            pred = (np.sum(rho_w * (cv.real ** 2 + cv.imag ** 2))
                    + 2.0 * np.sum(rho_w * np.real(
                        np.conj(cv) * (stepper.phi1dt * d_ex))))
        u = stepper.step(u, d_lead, noise)
        s = stepper.step(s, d_shadow, noise)
        ledger.update(h_sq, dt)
        if gronwall:
            meas = float(np.sum(rho_w * ((u - s).real ** 2 + (u - s).imag ** 2)))
            r = abs(meas - pred)
            res_sum += r
            res_max = max(res_max, r)
        t = n * dt
        if n % config.checkpoint_every == 0 or n == n_steps:
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(s))):
                raise DivergedTrajectory(
                    f"pair lost finiteness at t = {t:.6g}", last_finite)
            last_finite = t
            times.append(t)
            rho.append(rho_of(u - s))
            costs.append(ledger.cost)
            e_lead.append(stepper.velocity_energy(u))
            diss_lead.append(stepper.dissipation_rate(u))
            e_shadow.append(stepper.velocity_energy(s))
            if record_states:
                leader_states.append(SpectralField(grid, u.copy()[None]))
                shadow_states.append(SpectralField(grid, s.copy()[None]))

    times = np.array(times)
    rho = np.array(rho)
    costs = np.array(costs)
    e_lead = np.array(e_lead)
    diss_lead = np.array(diss_lead)
    # trapezoid dissipation integral at checkpoint resolution: the envelope
    # functional sup_t [e + int diss - drift t - e0] for conditioning
    diss_int = np.concatenate([[0.0], np.cumsum(
        0.5 * (diss_lead[1:] + diss_lead[:-1]) * np.diff(times))])
    envelope = e_lead + diss_int - drift_const * times - e_lead[0]
    result = PairResult(
        times=times, rho=rho, costs=costs, ledger=ledger,
        success=bool(rho[-1] <= success_factor * rho[0]),
        fitted_rate=fit_contraction_rate(times, rho, config.t_end,
                                         transient_fraction, rate_floor),
        tau_hit=ledger.stopped,
        leader_energy={"velocity_l2_sq": e_lead, "dissipation_rate": diss_lead,
                       "envelope": envelope},
        shadow_energy={"velocity_l2_sq": np.array(e_shadow)},
        envelope_sup=float(np.max(envelope)),
        leader_states=leader_states, shadow_states=shadow_states)
    if gronwall:
        # rate form: the per-step defect of the |v|^2 identity is
        # ||phi1 dt (N(u)-N(s))||^2 = O(dt^2), so defect/dt is O(dt) and both
        # reported numbers halve when dt does
        result.gronwall = {"residual_sum": res_sum, "residual_max": res_max / dt,
                           "n_steps": n_steps, "rho0_sq": float(rho[0] ** 2)}
    return result


def _run_pair_wave(model, forcing, config, path, leader0, shadow0, control,
                   record_states, success_factor, transient_fraction,
                   rate_floor):
    grid = leader0.u.grid
    model.check_grid(grid)
    dt = config.dt
    n_steps = config.n_steps
    stepper = WaveStepper(model, grid, forcing, dt)
    _, cutoff = control.resolve(model, grid, forcing)
    mask_flat = cutoff.low_mask.ravel()
    idx, dirs_low, gram = _control_tables(forcing, cutoff.low_mask)
    ledger = GirsanovLedger(budget=control.budget)
    eps = model.eps_shift(grid)
    pars = 2.0 * np.pi
    ksq = grid.k_sq.ravel()

    uL = leader0.u.coeffs[0].ravel().copy()
    vL = leader0.v.coeffs[0].ravel().copy()
    uS = shadow0.u.coeffs[0].ravel().copy()
    vS = shadow0.v.coeffs[0].ravel().copy()
    nyq = grid.nyquist_mask.ravel()
    for arr in (uL, vL, uS, vS):
        arr[nyq] = 0.0

    def rho_of():
        w = uL - uS
        y = (vL - vS) + eps * w
        return float(np.sqrt(pars * np.sum(
            np.abs(y) ** 2 + ksq * np.abs(w) ** 2)))

    def wrap(uc, vc):
        return WaveState(SpectralField(grid, uc.reshape(1, *grid.shape).copy()),
                         SpectralField(grid, vc.reshape(1, *grid.shape).copy()))

    def energy_row():
        return {
            "leader_r_l2_sq": pars * float(np.sum(np.abs(vL + eps * uL) ** 2)),
            "leader_u_h1_sq": pars * float(np.sum(ksq * np.abs(uL) ** 2)),
        }

    times = [0.0]
    rho = [rho_of()]
    costs = [0.0]
    rows = [energy_row()]
    leader_states = [wrap(uL, vL)] if record_states else []
    shadow_states = [wrap(uS, vS)] if record_states else []
    last_finite = 0.0
    beta = model.beta

    for n in range(1, n_steps + 1):
        z = path.draw_normals(2 * stepper.n_dirs).reshape(2, stepper.n_dirs)
        if beta != 0.0:
            sin_lead = model.sine_field(
                SpectralField(grid, uL.reshape(1, *grid.shape))).coeffs[0].ravel()
            sin_shadow = model.sine_field(
                SpectralField(grid, uS.reshape(1, *grid.shape))).coeffs[0].ravel()
        else:
            sin_lead = np.zeros_like(uL)
            sin_shadow = sin_lead
        d_lead = -beta * sin_lead
        d_shadow = -beta * sin_shadow
        h_sq = 0.0
        if ledger.control_active:
            g_full = beta * (sin_lead - sin_shadow) * mask_flat
            g_vec = g_full[idx]
            if not np.all(np.isfinite(g_vec.view(float))):
                raise DivergedTrajectory(
                    f"pair lost finiteness at t = {(n - 1) * dt:.6g}", last_finite)
            h = cho_solve(gram, np.real(dirs_low @ g_vec), check_finite=False)
            h_sq = float(h @ h)
            d_shadow = d_shadow + g_full
        uL, vL = stepper.step(uL, vL, d_lead, z)
        uS, vS = stepper.step(uS, vS, d_shadow, z)
        ledger.update(h_sq, dt)
        t = n * dt
        if n % config.checkpoint_every == 0 or n == n_steps:
            finite = all(np.all(np.isfinite(a)) for a in (uL, vL, uS, vS))
            if not finite:
                raise DivergedTrajectory(
                    f"pair lost finiteness at t = {t:.6g}", last_finite)
            last_finite = t
            times.append(t)
            rho.append(rho_of())
            costs.append(ledger.cost)
            rows.append(energy_row())
            if record_states:
                leader_states.append(wrap(uL, vL))
                shadow_states.append(wrap(uS, vS))

    times = np.array(times)
    rho = np.array(rho)
    energy = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    return PairResult(
        times=times, rho=rho, costs=np.array(costs), ledger=ledger,
        success=bool(rho[-1] <= success_factor * rho[0]),
        fitted_rate=fit_contraction_rate(times, rho, config.t_end,
                                         transient_fraction, rate_floor),
        tau_hit=ledger.stopped,
        leader_energy=energy, shadow_energy={},
        leader_states=leader_states, shadow_states=shadow_states)


# -- ensembles ----------------------------------------------------------------


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple:
    """95% score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def ic_stream(seed: int, replica_id: int) -> np.random.Generator:
    """Initial-condition stream, decoupled from the driving-noise stream.

    The high bit of the key's replica half separates it from NoisePath keys
    built from the same (seed, replica) pair.
    """
    return np.random.Generator(
        np.random.Philox(key=(int(seed) << 64) | (int(replica_id) | (1 << 63))))


@dataclass
class EnsembleSummary:
    """Aggregates over replicas of run_pair under independent noise."""

    n_replicas: int
    success_count: int
    tau_hit_count: int
    diverged: list
    rates: np.ndarray          # per replica; nan for diverged
    final_costs: np.ndarray
    rho_first: np.ndarray
    rho_last: np.ndarray
    envelope_sups: np.ndarray  # nan for the wave model
    per_replica: list
    envelope_radius: float | None = None

    @property
    def n_completed(self) -> int:
        return self.n_replicas - len(self.diverged)

    @property
    def success_rate(self) -> float:
        return self.success_count / max(self.n_completed, 1)

    @property
    def success_interval(self) -> tuple:
        return wilson_interval(self.success_count, self.n_completed)

    @property
    def tau_hit_rate(self) -> float:
        return self.tau_hit_count / max(self.n_completed, 1)

    def rates_of_successes(self) -> np.ndarray:
        out = [row["rate"] for row in self.per_replica
               if row["success"] and not row["diverged"]]
        return np.array(out)

    def conditional_success(self) -> tuple:
        """(in-envelope count, successes among them); needs envelope_radius."""
        if self.envelope_radius is None:
            raise ValueError("summary was built without an envelope radius")
        inside = [row for row in self.per_replica
                  if not row["diverged"]
                  and row["envelope_sup"] <= self.envelope_radius]
        return len(inside), sum(1 for row in inside if row["success"])


def run_ensemble(model, forcing: ForcingSet, config: StepperConfig,
                 control: ControlSpec, sampler, n_replicas: int, seed: int, *,
                 success_factor: float = 1e-3, envelope_radius: float | None = None,
                 record_rho: bool = False) -> EnsembleSummary:
    """Replicated coupled pairs: replica r uses NoisePath(seed, r) and an
    initial pair drawn from sampler(ic_stream(seed, r)).

    DivergedTrajectory in a replica is recorded, not raised; everything else
    propagates.
    """
    rates, costs, rho0, rho1, envs = [], [], [], [], []
    per_replica = []
    diverged = []
    successes = 0
    tau_hits = 0
    for r in range(n_replicas):
        path = NoisePath(seed=seed, replica_id=r, dt=config.dt,
                         dimension=forcing.dimension)
        leader0, shadow0 = sampler(ic_stream(seed, r))
        row = {"replica": r, "diverged": False}
        try:
            res = run_pair(model, forcing, config, path, leader0, shadow0,
                           control, success_factor=success_factor)
        except DivergedTrajectory as err:
            diverged.append(r)
            row.update(diverged=True, last_finite_time=err.last_finite_time,
                       success=False, rate=np.nan, cost=np.nan,
                       tau_hit=False, rho_first=np.nan, rho_last=np.nan,
                       envelope_sup=np.nan)
            per_replica.append(row)
            rates.append(np.nan)
            costs.append(np.nan)
            rho0.append(np.nan)
            rho1.append(np.nan)
            envs.append(np.nan)
            continue
        successes += int(res.success)
        tau_hits += int(res.tau_hit)
        env = np.nan if res.envelope_sup is None else res.envelope_sup
        row.update(success=res.success, rate=res.fitted_rate,
                   cost=res.final_cost, tau_hit=res.tau_hit,
                   rho_first=float(res.rho[0]), rho_last=float(res.rho[-1]),
                   envelope_sup=env)
        if record_rho:
            row["times"] = res.times
            row["rho"] = res.rho
            row["costs"] = res.costs
        per_replica.append(row)
        rates.append(res.fitted_rate)
        costs.append(res.final_cost)
        rho0.append(float(res.rho[0]))
        rho1.append(float(res.rho[-1]))
        envs.append(env)
    return EnsembleSummary(
        n_replicas=n_replicas, success_count=successes,
        tau_hit_count=tau_hits, diverged=diverged,
        rates=np.array(rates), final_costs=np.array(costs),
        rho_first=np.array(rho0), rho_last=np.array(rho1),
        envelope_sups=np.array(envs), per_replica=per_replica,
        envelope_radius=envelope_radius)
