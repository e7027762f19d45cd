"""Time integration: exponential Euler-Maruyama and the exact wave block.

Fluid models advance per mode by

    s+ = exp(-m dt) s + dt phi1(-m dt) (N + G) + eta(m, dt) sigma dW,

with phi1(z) = (e^z - 1)/z and eta^2 = (1 - e^{-2 m dt})/(2 m dt). The eta
weight makes the per-mode stationary variance of the forced linear equation
exactly sigma^2/(2m) at ANY dt, so long runs inherit the correct invariant
measure mode by mode. Control shifts G enter the drift with the same phi1
weight as the nonlinearity.

The wave model advances each mode's (u, v) pair by the exact 2x2 exponential
of [[0, 1], [-k^2, -alpha]] dt; the forcing enters through the exact
block-integrated covariance (Van Loan construction), sampled with two
standard normals per direction per step.

A trajectory that produces non-finite values raises DivergedTrajectory with
the last finite time. dt is validated against the advective CFL bound
0.5 dx / max|u| at startup and re-checked at every checkpoint; mid-run
violations are counted on the trajectory rather than fatal.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import DivergedTrajectory, GridMismatchError
from .forcing import ForcingSet, GirsanovLedger, pseudo_inverse_shift
from .models import WaveState, is_fluid
from .spectral import Grid, SpectralField

CHECKPOINT_MAGIC = b"ERGC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StepperConfig:
    """Step size, horizon, and recording cadence."""

    dt: float
    t_end: float
    checkpoint_every: int = 1
    scheme: str = "auto"        # 'auto' | 'exponential-em' | 'wave-block'
    track_energy: bool = True   # per-step energy/dissipation ledger (fluid only)

    def __post_init__(self):
        if self.dt <= 0 or self.t_end < 0:
            raise ValueError("dt must be positive and t_end nonnegative")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")
        if self.scheme not in ("auto", "exponential-em", "wave-block"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_end / self.dt))
        if abs(n * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ValueError("t_end must be an integer number of steps")
        return n


def phi1_weight(a):
    """phi1(-a) = (1 - e^{-a})/a for a >= 0, with phi1(0) = 1."""
    a = np.asarray(a, dtype=float)
    safe = np.where(a > 0, a, 1.0)
    return np.where(a > 0, -np.expm1(-safe) / safe, 1.0)


def eta_weight(a):
    """eta(m, dt) with a = m dt: sqrt((1 - e^{-2a})/(2a)), eta(0) = 1."""
    a = np.asarray(a, dtype=float)
    safe = np.where(a > 0, a, 1.0)
    return np.where(a > 0, np.sqrt(-np.expm1(-2.0 * safe) / (2.0 * safe)), 1.0)


def sanitize_fluid(state: SpectralField) -> SpectralField:
    """Copy with zero mean and empty Nyquist lines (required state invariants)."""
    out = state.copy()
    out.coeffs[:, state.grid.nyquist_mask] = 0.0
    out.coeffs[:, 0, 0] = 0.0
    return out


class FluidStepper:
    """Vectorized exponential Euler-Maruyama update for one scalar field."""

    def __init__(self, model, grid: Grid, forcing: ForcingSet, dt: float):
        model.check_grid(grid)
        if forcing.grid != grid:
            raise GridMismatchError("forcing built for a different grid")
        self.model = model
        self.grid = grid
        self.dt = float(dt)
        m = model.linear_symbol(grid)
        a = m * dt
        self.decay = np.exp(-a)
        self.phi1dt = dt * phi1_weight(a)
        self.eta = eta_weight(a)
        self.noise_matrix = forcing.directions.reshape(forcing.dimension, -1)
        # velocity-space reduction weights: |uhat|^2 = |xihat|^2 / |k|^2
        pars = (2.0 * np.pi) ** grid.dim
        inv_ksq = np.zeros(grid.shape)
        nz = grid.k_sq > 0
        inv_ksq[nz] = 1.0 / grid.k_sq[nz]
        self.w_energy = pars * inv_ksq
        self.w_dissipation = pars * m * inv_ksq
        # <u, BS(sigma_j)> = pars * Re sum xihat conj(sigma_j_hat) / |k|^2
        self.work_matrix = pars * np.conj(self.noise_matrix) * inv_ksq.ravel()

    def assemble_noise(self, dW: np.ndarray) -> np.ndarray:
        return (dW @ self.noise_matrix).reshape(self.grid.shape)

    def step(self, coeffs: np.ndarray, drift: np.ndarray, noise: np.ndarray) -> np.ndarray:
        return self.decay * coeffs + self.phi1dt * drift + self.eta * noise

    def velocity_energy(self, coeffs: np.ndarray) -> float:
        return float(np.sum(self.w_energy * (coeffs.real ** 2 + coeffs.imag ** 2)))

    def dissipation_rate(self, coeffs: np.ndarray) -> float:
        return float(np.sum(self.w_dissipation * (coeffs.real ** 2 + coeffs.imag ** 2)))

    def noise_work(self, coeffs: np.ndarray, dW: np.ndarray) -> float:
        return float(dW @ np.real(self.work_matrix @ coeffs.ravel()))


class WaveStepper:
    """Exact per-mode propagation of the damped wave pair with exact noise law."""

    def __init__(self, model, grid: Grid, forcing: ForcingSet, dt: float):
        model.check_grid(grid)
        if forcing.grid != grid:
            raise GridMismatchError("forcing built for a different grid")
        self.model = model
        self.grid = grid
        self.dt = float(dt)
        alpha = model.alpha_damp
        ksq_flat = grid.k_sq.ravel()
        n = ksq_flat.size
        E = np.empty((n, 2, 2))
        P = np.empty((n, 2, 2))
        cache = {}
        for i, ksq in enumerate(ksq_flat):
            key = float(ksq)
            if key not in cache:
                A = np.array([[0.0, 1.0], [-key, -alpha]])
                # Van Loan block for the drift integral: expm([[A, I],[0,0]] dt)
                M = np.zeros((4, 4))
                M[:2, :2] = A
                M[:2, 2:] = np.eye(2)
                big = expm(M * dt)
                cache[key] = (big[:2, :2], big[:2, 2:])
            E[i], P[i] = cache[key]
        self.E11, self.E12 = E[:, 0, 0], E[:, 0, 1]
        self.E21, self.E22 = E[:, 1, 0], E[:, 1, 1]
        self.P12, self.P22 = P[:, 0, 1], P[:, 1, 1]
        # exact noise covariance per forced site (unit direction amplitude)
        self.n_dirs = forcing.dimension
        idx_plus, idx_minus, cplus = [], [], []
        chols = []
        for j in range(self.n_dirs):
            col = forcing.directions[j].ravel()
            nz = np.nonzero(col)[0]
            if nz.size != 2:
                raise ValueError("wave forcing directions must be single modes")
            # sine construction puts -i a/2 at +k (lower flat index) and +i a/2 at -k
            ip, im = int(nz[0]), int(nz[1])
            idx_plus.append(ip)
            idx_minus.append(im)
            cplus.append(col[ip])
            ksq = float(ksq_flat[ip])
            A = np.array([[0.0, 1.0], [-ksq, -alpha]])
            BBt = np.array([[0.0, 0.0], [0.0, 1.0]])
            M = np.zeros((4, 4))
            M[:2, :2] = -A
            M[:2, 2:] = BBt
            M[2:, 2:] = A.T
            big = expm(M * dt)
            F3 = big[2:, 2:]
            Q = F3.T @ big[:2, 2:]
            Q = 0.5 * (Q + Q.T)
            chols.append(np.linalg.cholesky(Q + 1e-300 * np.eye(2)))
        self.idx_plus = np.array(idx_plus, dtype=int)
        self.idx_minus = np.array(idx_minus, dtype=int)
        self.coeff_plus = np.array(cplus)
        self.chol = np.array(chols)

    def step(self, u: np.ndarray, v: np.ndarray, drift_v: np.ndarray,
             z: np.ndarray) -> tuple:
        """One step on flat coefficient vectors; z is (2, n_dirs) standard normals."""
        u_new = self.E11 * u + self.E12 * v + self.P12 * drift_v
        v_new = self.E21 * u + self.E22 * v + self.P22 * drift_v
        conv = np.einsum("jab,bj->aj", self.chol, z)   # (2, d) exact (Iu, Iv)
        u_new[self.idx_plus] += self.coeff_plus * conv[0]
        v_new[self.idx_plus] += self.coeff_plus * conv[1]
        u_new[self.idx_minus] += np.conj(self.coeff_plus) * conv[0]
        v_new[self.idx_minus] += np.conj(self.coeff_plus) * conv[1]
        return u_new, v_new


@dataclass
class Trajectory:
    """Checkpointed record of one run."""

    dt: float
    times: np.ndarray
    states: list
    energy: dict
    initial_energy: float | None = None
    envelope_sup: float | None = None
    drift_const: float | None = None
    ledger: GirsanovLedger | None = None
    ledger_costs: np.ndarray | None = None
    cfl_violations: int = 0

    @property
    def final_state(self):
        return self.states[-1]

    @property
    def final_time(self) -> float:
        return float(self.times[-1])


def _cfl_ratio(model, state: SpectralField, dt: float) -> float:
    """dt over the advective bound 0.5 dx / max|u|; > 1 means violated."""
    vel = model.advecting_velocity(state).to_physical()
    vmax = float(np.max(np.sqrt(np.sum(vel ** 2, axis=0))))
    if vmax == 0.0:
        return 0.0
    dx = 2.0 * np.pi / state.grid.modes_x
    return dt / (0.5 * dx / vmax)


def integrate(model, initial, forcing: ForcingSet, config: StepperConfig,
              path, control=None, control_target=None,
              record_states: bool = True) -> Trajectory:
    """Advance one trajectory, recording checkpoints and the cost ledger.

    control (a coupling ControlSpec) applies the low-mode feedback shift
    toward control_target (default: the origin), gated by its cost budget;
    the free run passes control=None. Deterministic given (initial, path).
    """
    if config.scheme == "wave-block" and is_fluid(model):
        raise ValueError("wave-block scheme needs a wave model")
    if config.scheme == "exponential-em" and not is_fluid(model):
        raise ValueError("exponential-em scheme needs a fluid model")
    if is_fluid(model):
        return _integrate_fluid(model, initial, forcing, config, path,
                                control, control_target, record_states)
    return _integrate_wave(model, initial, forcing, config, path,
                           control, control_target, record_states)


def _integrate_fluid(model, initial, forcing, config, path, control,
                     control_target, record_states):
    grid = initial.grid
    state = sanitize_fluid(initial)
    stepper = FluidStepper(model, grid, forcing, config.dt)
    dt = config.dt
    n_steps = config.n_steps

    if model.advection and _cfl_ratio(model, state, dt) > 1.0:
        raise ValueError("dt violates the advective CFL bound 0.5*dx/max|u| at t=0")

    fhat = None
    if getattr(model, "body_force", None) is not None:
        bf = sanitize_fluid(model.body_force)
        fhat = bf.coeffs[0]

    gain = mask = ledger = None
    target_c = None
    if control is not None:
        gain, cutoff = control.resolve(model, grid, forcing)
        mask = cutoff.low_mask
        ledger = GirsanovLedger(budget=control.budget)
        target_c = (sanitize_fluid(control_target).coeffs[0]
                    if control_target is not None
                    else np.zeros(grid.shape, dtype=np.complex128))

    track = config.track_energy
    c = state.coeffs[0]
    e0 = stepper.velocity_energy(c) if track else None
    drift_const = None
    if track:
        drift_const = forcing.velocity_sigma_sq
        if fhat is not None:
            # Young: 2<f,u> - nu||u||^2 <= ||f||_{H^-1,vel}^2 / nu
            f_minus1_sq = float(np.sum(stepper.w_energy / np.where(
                grid.k_sq > 0, grid.k_sq, 1.0) * np.abs(fhat) ** 2))
            drift_const += f_minus1_sq / model.nu
    diss = 0.0
    work = 0.0
    noise_quad = 0.0
    sup_env = 0.0 if track else None

    times = [0.0]
    states = [SpectralField(grid, c.copy()[None])] if record_states else []
    energy_rows = [_fluid_energy_row(model, stepper, c, diss, work, noise_quad, sup_env)]
    ledger_costs = [0.0] if control is not None else None
    cfl_violations = 0
    last_finite = 0.0
    zero_drift = np.zeros(grid.shape, dtype=np.complex128)

    for n in range(1, n_steps + 1):
        dW = path.sample_increments()
        noise = stepper.assemble_noise(dW)
        drift = (model.nonlinear_drift(SpectralField(grid, c[None])).coeffs[0]
                 if model.advection else zero_drift)
        if fhat is not None:
            drift = drift + fhat
        h_sq = 0.0
        if control is not None and ledger.control_active:
            shift = gain * ((target_c - c) * mask)
            h = pseudo_inverse_shift(forcing, SpectralField(grid, shift[None]))
            h_sq = float(h @ h)
            drift = drift + shift
        if track:
            work += stepper.noise_work(c, dW)
            noise_quad += stepper.velocity_energy(stepper.eta * noise)
            diss_rate = stepper.dissipation_rate(c)
        c = stepper.step(c, drift, noise)
        t = n * dt
        if control is not None:
            ledger.update(h_sq, dt)
        if track:
            diss += dt * diss_rate
            e_now = stepper.velocity_energy(c)
            sup_env = max(sup_env, e_now + diss - drift_const * t - e0)
        if n % config.checkpoint_every == 0 or n == n_steps:
            if not np.all(np.isfinite(c)):
                raise DivergedTrajectory(
                    f"non-finite state at t = {t:.6g}", last_finite)
            last_finite = t
            times.append(t)
            if record_states:
                states.append(SpectralField(grid, c.copy()[None]))
            energy_rows.append(
                _fluid_energy_row(model, stepper, c, diss, work, noise_quad, sup_env))
            if control is not None:
                ledger_costs.append(ledger.cost)
            if model.advection and _cfl_ratio(model, SpectralField(grid, c[None]), dt) > 1.0:
                cfl_violations += 1

    energy = {k: np.array([row[k] for row in energy_rows]) for k in energy_rows[0]}
    return Trajectory(
        dt=dt, times=np.array(times), states=states, energy=energy,
        initial_energy=e0, envelope_sup=sup_env, drift_const=drift_const,
        ledger=ledger, ledger_costs=None if ledger_costs is None else np.array(ledger_costs),
        cfl_violations=cfl_violations)


def _fluid_energy_row(model, stepper, c, diss, work, noise_quad, sup_env):
    row = {
        "velocity_l2_sq": stepper.velocity_energy(c),
        "prognostic_l2_sq": float(
            (2.0 * np.pi) ** stepper.grid.dim * np.sum(c.real ** 2 + c.imag ** 2)),
    }
    row.update(model.energy_functionals(SpectralField(stepper.grid, c[None])))
    if sup_env is not None:
        row["dissipation_integral"] = diss
        row["noise_work"] = work
        row["noise_quadratic"] = noise_quad
        row["envelope_sup"] = sup_env
    return row


def _integrate_wave(model, initial, forcing, config, path, control,
                    control_target, record_states):
    grid = initial.u.grid
    stepper = WaveStepper(model, grid, forcing, config.dt)
    dt = config.dt
    n_steps = config.n_steps

    u = initial.u.coeffs[0].ravel().copy()
    v = initial.v.coeffs[0].ravel().copy()
    nyq = grid.nyquist_mask.ravel()
    u[nyq] = 0.0
    v[nyq] = 0.0

    ledger = None
    if control is not None:
        _, cutoff = control.resolve(model, grid, forcing)
        ledger = GirsanovLedger(budget=control.budget)
        if control_target is None:
            target = WaveState(SpectralField.zeros(grid), SpectralField.zeros(grid))
        else:
            target = control_target

    def view():
        # u, v are rebound (not mutated) each step, so views stay valid
        return WaveState(SpectralField(grid, u.reshape(1, *grid.shape)),
                         SpectralField(grid, v.reshape(1, *grid.shape)))

    def snapshot():
        return WaveState(SpectralField(grid, u.reshape(1, *grid.shape).copy()),
                         SpectralField(grid, v.reshape(1, *grid.shape).copy()))

    zero_v = np.zeros(grid.size, dtype=np.complex128)
    times = [0.0]
    states = [snapshot()] if record_states else []
    energy_rows = [model.energy_functionals(view())]
    ledger_costs = [0.0] if control is not None else None
    last_finite = 0.0

    for n in range(1, n_steps + 1):
        z = path.draw_normals(2 * stepper.n_dirs).reshape(2, stepper.n_dirs)
        drift_v = (model.nonlinear_drift(view()).coeffs[0].ravel()
                   if model.beta != 0.0 else zero_v)
        h_sq = 0.0
        if control is not None and ledger.control_active:
            shift = model.coupling_control(target, view(), cutoff).coeffs[0].ravel()
            h = pseudo_inverse_shift(forcing, SpectralField(grid, shift.reshape(1, *grid.shape)))
            h_sq = float(h @ h)
            drift_v = drift_v + shift
        u, v = stepper.step(u, v, drift_v, z)
        t = n * dt
        if control is not None:
            ledger.update(h_sq, dt)
        if n % config.checkpoint_every == 0 or n == n_steps:
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise DivergedTrajectory(
                    f"non-finite state at t = {t:.6g}", last_finite)
            last_finite = t
            times.append(t)
            if record_states:
                states.append(snapshot())
            energy_rows.append(model.energy_functionals(view()))
            if control is not None:
                ledger_costs.append(ledger.cost)

    energy = {k: np.array([row[k] for row in energy_rows]) for k in energy_rows[0]}
    return Trajectory(
        dt=dt, times=np.array(times), states=states, energy=energy,
        ledger=ledger,
        ledger_costs=None if ledger_costs is None else np.array(ledger_costs))


# -- checkpoint files --------------------------------------------------------


def _state_coeffs(state) -> np.ndarray:
    if isinstance(state, WaveState):
        return np.concatenate([state.u.coeffs, state.v.coeffs], axis=0)
    return state.coeffs


def write_checkpoint(filepath, state, time: float):
    """Binary snapshot: magic, version, grid dims, components, time, (re, im) pairs."""
    coeffs = np.ascontiguousarray(_state_coeffs(state), dtype=np.complex128)
    if isinstance(state, WaveState):
        grid = state.u.grid
    else:
        grid = state.grid
    header = CHECKPOINT_MAGIC + struct.pack(
        "<HIIId", CHECKPOINT_VERSION, grid.modes_x, grid.modes_y,
        coeffs.shape[0], float(time))
    with open(filepath, "wb") as fh:
        fh.write(header)
        fh.write(coeffs.astype("<c16").tobytes())


def read_checkpoint(filepath) -> tuple:
    """Returns (grid, coefficient array (components, my, mx), time)."""
    with open(filepath, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, mx, my, ncomp, time = struct.unpack("<HIIId", fh.read(22))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        grid = Grid(mx, my)
        raw = fh.read(16 * ncomp * grid.size)
        coeffs = np.frombuffer(raw, dtype="<c16").reshape(ncomp, my, mx)
    return grid, coeffs.astype(np.complex128), time
