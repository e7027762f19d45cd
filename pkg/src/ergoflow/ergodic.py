"""Time-average diagnostics: Birkhoff means, energy-envelope tail gates,
and the vanishing-regularization study for the smoothed-advection model.

Everything here is post-processing over trajectory records plus ensemble
orchestration; the statistics are deliberately plain (batch-means standard
errors, binomial tail counts) and every random stream is keyed by the
experiment seed so repeated calls reproduce rows exactly.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .coupling import ic_stream
from .errors import ConfigError, InsufficientData
from .forcing import ForcingSet, NoisePath, PrescribedPath
from .models import EulerVoigt, NavierStokes, is_fluid
from .spectral import SpectralField, sobolev_norm
from .stepping import StepperConfig, integrate


# -- observables ---------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """Scalar functional of a fluid state.

    The bounded-lipschitz kind is tanh of one low-mode real coordinate: it is
    bounded by 1 and, because the pair distance weights mode k by at least
    (2 pi)^{d/2}/|k|, Lipschitz with constant below 1 in that distance for
    the low modes it is built on.
    """

    name: str
    kind: str
    k: tuple = (1, 0)

    @classmethod
    def energy(cls) -> "Observable":
        return cls("energy", "energy")

    @classmethod
    def enstrophy(cls) -> "Observable":
        return cls("enstrophy", "enstrophy")

    @classmethod
    def low_mode_real(cls, k: tuple) -> "Observable":
        return cls(f"re_mode_{k[0]}_{k[1]}", "low-mode-real-part", tuple(k))

    @classmethod
    def bounded_lipschitz(cls, k: tuple) -> "Observable":
        return cls(f"tanh_re_mode_{k[0]}_{k[1]}", "bounded-lipschitz", tuple(k))

    def _mode(self, state: SpectralField) -> complex:
        g = state.grid
        ix = int(self.k[0]) % g.modes_x
        iy = (int(self.k[1]) % g.modes_y) if g.modes_y > 1 else 0
        return state.coeffs[0, iy, ix]

    def __call__(self, state) -> float:
        if not isinstance(state, SpectralField):
            raise TypeError("observables evaluate fluid scalar states")
        if self.kind == "energy":
            return float(sobolev_norm(state, -1.0) ** 2)
        if self.kind == "enstrophy":
            return float(sobolev_norm(state) ** 2)
        if self.kind == "low-mode-real-part":
            return float(self._mode(state).real)
        if self.kind == "bounded-lipschitz":
            return float(np.tanh(self._mode(state).real))
        raise ConfigError(f"unknown observable kind {self.kind!r}")


# -- running averages ----------------------------------------------------------


@dataclass
class AverageSeries:
    """Samples phi(u(t_j)) with exact running means and batch-means errors."""

    times: np.ndarray
    samples: np.ndarray
    name: str = ""

    @property
    def running_means(self) -> np.ndarray:
        return np.cumsum(self.samples) / np.arange(1, self.samples.size + 1)

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples))

    def standard_error(self, n_batches: int = 20) -> float:
        """Batch-means SE; drops the oldest remainder so batches are equal."""
        n = self.samples.size
        if n < n_batches:
            raise InsufficientData(
                f"{n} samples cannot fill {n_batches} batches")
        per = n // n_batches
        tail = self.samples[n - n_batches * per:]
        means = tail.reshape(n_batches, per).mean(axis=1)
        return float(np.std(means, ddof=1) / np.sqrt(n_batches))


def birkhoff_average(trajectory, obs: Observable, sample_period: float,
                     burn_in: float = 0.0) -> AverageSeries:
    """Sample the observable along stored states every sample_period.

    Samples land on the stored checkpoint nearest each target time, so pick
    a period that is a multiple of the checkpoint interval for exact grids.
    """
    if sample_period <= 0:
        raise ConfigError("sample_period must be positive")
    if not trajectory.states:
        raise InsufficientData("trajectory was recorded without states")
    times = np.asarray(trajectory.times, dtype=float)
    span = times[-1] - burn_in
    if span < 20.0 * sample_period:
        raise InsufficientData(
            f"horizon {span:.6g} after burn-in is shorter than 20 sample "
            f"periods ({20 * sample_period:.6g})")
    targets = burn_in + sample_period * np.arange(
        int(np.floor(span / sample_period + 1e-9)) + 1)
    pos = np.searchsorted(times, targets)
    pos = np.clip(pos, 0, times.size - 1)
    left = np.clip(pos - 1, 0, times.size - 1)
    idx = np.where(np.abs(times[left] - targets) <= np.abs(times[pos] - targets),
                   left, pos)
    idx = np.unique(idx)
    samples = np.array([obs(trajectory.states[i]) for i in idx])
    return AverageSeries(times=times[idx], samples=samples, name=obs.name)


# -- energy-envelope tails -----------------------------------------------------


@dataclass
class TailRow:
    r: float
    empirical: float
    bound: float
    binomial_se: float

    @property
    def flagged(self) -> bool:
        return self.empirical > self.bound + 3.0 * self.binomial_se


@dataclass
class TailTable:
    gamma: float
    n_replicas: int
    rows: list

    @property
    def any_flagged(self) -> bool:
        return any(row.flagged for row in self.rows)

    def table(self) -> list:
        return [{"r": row.r, "empirical": row.empirical, "bound": row.bound,
                 "binomial_se": row.binomial_se, "flagged": row.flagged}
                for row in self.rows]


def envelope_exceedances(envelope_sups, r_grid, gamma: float,
                         n_replicas: int | None = None) -> TailTable:
    """Empirical P(sup envelope >= R) against e^{-gamma R} with binomial SE
    taken at the bound (the null being tested)."""
    sups = np.asarray(envelope_sups, dtype=float)
    n = sups.size if n_replicas is None else n_replicas
    rows = []
    for r in r_grid:
        emp = float(np.mean(sups >= r))
        bound = float(np.exp(-gamma * r))
        se = float(np.sqrt(bound * (1.0 - bound) / n))
        rows.append(TailRow(r=float(r), empirical=emp, bound=bound,
                            binomial_se=se))
    return TailTable(gamma=gamma, n_replicas=n, rows=rows)


def martingale_tail_check(model, forcing: ForcingSet, config: StepperConfig,
                          u0: SpectralField, n_replicas: int, seed: int,
                          r_grid=(1.0, 2.0, 4.0, 8.0)) -> TailTable:
    """Ensemble of free runs scored by the energy envelope functional
    sup_t [e(t) + dissipation integral - |sigma|^2 t - e(0)].

    gamma = nu / |sigma|^2 (velocity-space injection rate) is recomputed here
    on every call; nothing is cached across amplitude changes.
    """
    if not isinstance(model, NavierStokes):
        raise ConfigError(
            "the tail functional's rate needs the viscosity scalar; "
            "run this check on a NavierStokes model")
    if n_replicas < 200:
        raise InsufficientData(
            "tail frequencies at the tested R need at least 200 replicas")
    gamma = model.nu / forcing.velocity_sigma_sq
    sups = np.empty(n_replicas)
    for r in range(n_replicas):
        path = NoisePath(seed=seed, replica_id=r, dt=config.dt,
                         dimension=forcing.dimension)
        traj = integrate(model, u0, forcing, config, path, record_states=False)
        sups[r] = traj.envelope_sup
    return envelope_exceedances(sups, r_grid, gamma)


# -- two-start agreement -------------------------------------------------------


@dataclass
class AgreementRow:
    observable: str
    mean_a: float
    mean_b: float
    se_a: float
    se_b: float

    @property
    def discrepancy(self) -> float:
        return abs(self.mean_a - self.mean_b)

    @property
    def combined_se(self) -> float:
        return float(np.hypot(self.se_a, self.se_b))

    @property
    def agrees(self) -> bool:
        return self.discrepancy <= 3.0 * self.combined_se

    def as_dict(self) -> dict:
        return {"observable": self.observable, "mean_a": self.mean_a,
                "mean_b": self.mean_b, "se_a": self.se_a, "se_b": self.se_b,
                "discrepancy": self.discrepancy,
                "combined_se": self.combined_se, "agrees": self.agrees}


@dataclass
class AgreementReport:
    rows: list
    horizon: float
    sample_period: float

    @property
    def all_agree(self) -> bool:
        return all(row.agrees for row in self.rows)

    def table(self) -> list:
        return [row.as_dict() for row in self.rows]


def ergodic_agreement(model, forcing: ForcingSet, config: StepperConfig,
                      u0_a: SpectralField, u0_b: SpectralField,
                      observables, sample_period: float, *,
                      burn_in: float = 0.0, seed: int = 0,
                      replicas=(0, 1)) -> AgreementReport:
    """Long runs from two starts under independent noise; per-observable
    time averages compared at 3 combined standard errors.

    Identical starts with replicas=(r, r) share the path and give exactly
    zero discrepancy; distinct replica ids give the independent-noise
    comparison the uniqueness statement wants.
    """
    if not is_fluid(model):
        raise ConfigError("agreement runs are defined for the fluid models")
    series = []
    for u0, rep in zip((u0_a, u0_b), replicas):
        path = NoisePath(seed=seed, replica_id=rep, dt=config.dt,
                         dimension=forcing.dimension)
        traj = integrate(model, u0, forcing, config, path)
        series.append([birkhoff_average(traj, obs, sample_period, burn_in)
                       for obs in observables])
    rows = []
    for sa, sb in zip(*series):
        rows.append(AgreementRow(
            observable=sa.name, mean_a=sa.mean, mean_b=sb.mean,
            se_a=sa.standard_error(), se_b=sb.standard_error()))
    return AgreementReport(rows=rows, horizon=float(config.t_end),
                           sample_period=float(sample_period))


# -- vanishing regularization --------------------------------------------------


@dataclass
class InviscidReport:
    """Shared-noise trajectory gaps per epsilon plus time-average tables."""

    eps: np.ndarray
    mean_discrepancy: np.ndarray
    se: np.ndarray
    n_replicas: int
    fitted_order: float
    t_eval: float
    observable_rows: list = field(default_factory=list)

    def pair_table(self) -> list:
        return [{"eps": float(e), "discrepancy": float(d), "se": float(s),
                 "fitted_order": self.fitted_order}
                for e, d, s in zip(self.eps, self.mean_discrepancy, self.se)]


def fit_order(eps, values) -> float:
    """Log-log slope of values against eps (positive entries only)."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = (eps > 0) & (values > 0)
    if np.count_nonzero(keep) < 2:
        return float("nan")
    return float(np.polyfit(np.log(eps[keep]), np.log(values[keep]), 1)[0])


def inviscid_limit_study(base_model: EulerVoigt, forcing: ForcingSet,
                         config: StepperConfig, eps_list, n_replicas: int,
                         seed: int, ic_sampler, *, observables=None,
                         avg_config: StepperConfig | None = None,
                         avg_sample_period: float | None = None,
                         burn_in: float = 0.0) -> InviscidReport:
    """Vanishing-viscosity probe for the smoothed-advection model.

    Stage one: per replica, the eps = 0 dynamics and each regularized variant
    are driven by the same increments from the same start, and the pair gap
    rho_tilde is read off at t_end; the per-eps means get a log-log fitted
    order. Stage two (when observables are given): one long run per eps,
    again under one shared path, tabulating time averages and the running
    maximum of the smoothed-gradient energy.

    Per-replica failures (divergence) propagate; nothing is silently dropped.
    """
    if not isinstance(base_model, EulerVoigt):
        raise ConfigError("the regularization study is a Voigt-model probe")
    if base_model.eps_visc != 0.0:
        raise ConfigError("base model must carry eps_visc = 0 (the limit)")
    eps_arr = np.asarray(list(eps_list), dtype=float)
    if np.any(eps_arr < 0):
        raise ConfigError("eps values must be nonnegative")
    dt = config.dt
    n_steps = config.n_steps

    gaps = np.empty((eps_arr.size, n_replicas))
    for r in range(n_replicas):
        path = NoisePath(seed=seed, replica_id=r, dt=dt,
                         dimension=forcing.dimension)
        inc = np.array([path.sample_increments() for _ in range(n_steps)])
        u0 = ic_sampler(ic_stream(seed, r))
        base = integrate(base_model, u0, forcing, config,
                         PrescribedPath(inc, dt))
        u_lim = base.final_state
        for i, eps in enumerate(eps_arr):
            model_e = replace(base_model, eps_visc=float(eps))
            traj = integrate(model_e, u0, forcing, config,
                             PrescribedPath(inc, dt))
            gaps[i, r] = base_model.rho_tilde(u_lim, traj.final_state)

    mean_disc = gaps.mean(axis=1)
    se = (gaps.std(axis=1, ddof=1) / np.sqrt(n_replicas)
          if n_replicas > 1 else np.zeros(eps_arr.size))

    rows = []
    if observables:
        avg_cfg = avg_config if avg_config is not None else config
        period = (avg_sample_period if avg_sample_period is not None
                  else avg_cfg.checkpoint_every * avg_cfg.dt)
        tag = n_replicas       # first stream id the pair stage never used
        path = NoisePath(seed=seed, replica_id=tag, dt=avg_cfg.dt,
                         dimension=forcing.dimension)
        inc = np.array([path.sample_increments()
                        for _ in range(avg_cfg.n_steps)])
        u0 = ic_sampler(ic_stream(seed, tag))
        for eps in np.concatenate([[0.0], eps_arr[eps_arr > 0]]):
            model_e = replace(base_model, eps_visc=float(eps))
            traj = integrate(model_e, u0, forcing, avg_cfg,
                             PrescribedPath(inc, avg_cfg.dt))
            row = {"eps": float(eps),
                   "moment_sup": float(np.max(traj.energy["alpha_vorticity_sq"]))}
            for obs in observables:
                s = birkhoff_average(traj, obs, period, burn_in)
                row[obs.name] = s.mean
                row[obs.name + "_se"] = s.standard_error()
            rows.append(row)

    return InviscidReport(
        eps=eps_arr, mean_discrepancy=mean_disc, se=se,
        n_replicas=n_replicas, fitted_order=fit_order(eps_arr, mean_disc),
        t_eval=float(config.t_end), observable_rows=rows)
