"""Model definitions: three fluid equations in vorticity form and a damped wave.

Every fluid model evolves a scalar vorticity xi on the 2-torus:

    d xi + [m(-Delta) xi + advection(xi)] dt = sum_j sigma_j dW_j,

where m is the linear dissipation symbol and the advection term is the only
nonlinearity. The wave model evolves the pair (u, v = du/dt) on (0, pi) with
Dirichlet walls, realized as odd (sine-series) fields on the 1-d torus.

The models expose exactly what the steppers and the coupling harness need:
the per-mode symbol, the nonlinear drift, the feedback-control shift, the
pair distance rho~ used for contraction studies, and the energy functionals
tracked by the diagnostics.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError
from .spectral import (
    GalerkinCutoff,
    Grid,
    SpectralField,
    advect,
    biot_savart,
    fractional_laplacian,
    galerkin_project,
    sobolev_norm,
)


def _l4_norm(f: SpectralField) -> float:
    """Physical-space L4 norm by grid quadrature."""
    p = f.to_physical()
    g = f.grid
    cell = (2.0 * np.pi / g.modes_x) * (2.0 * np.pi / g.modes_y if g.modes_y > 1 else 1.0)
    return float(np.sum(p ** 4) * cell) ** 0.25


class FluidModel:
    """Shared behavior of the scalar vorticity models."""

    prognostic = "vorticity"

    def check_grid(self, grid: Grid):
        if grid.dim != 2:
            raise GridMismatchError(f"{type(self).__name__} needs a 2-d grid")

    def advecting_vorticity(self, xi: SpectralField) -> SpectralField:
        """The vorticity whose Biot-Savart image does the advecting."""
        return xi

    def nonlinear_drift(self, xi: SpectralField) -> SpectralField:
        if not self.advection:
            return SpectralField.zeros(xi.grid)
        zeta = self.advecting_vorticity(xi)
        out = advect(biot_savart(zeta), zeta)
        out.coeffs *= -1.0
        return out

    def advecting_velocity(self, xi: SpectralField) -> SpectralField:
        """Velocity entering the CFL estimate."""
        return biot_savart(self.advecting_vorticity(xi))

    def rho_tilde(self, a: SpectralField, b: SpectralField) -> float:
        """L2 distance of the velocities."""
        return sobolev_norm((a - b).zero_mean(), -1.0)

    def rho_mode_weights(self, grid: Grid) -> np.ndarray:
        """Per-mode quadratic weights: rho_tilde^2 = sum w |ahat - bhat|^2."""
        w = np.zeros(grid.shape)
        nz = grid.k_sq > 0
        w[nz] = (2.0 * np.pi) ** grid.dim / grid.k_sq[nz]
        return w

    def coupling_control(self, state: SpectralField, shadow: SpectralField,
                         gain: float, cutoff: GalerkinCutoff) -> SpectralField:
        """Low-mode feedback gain * P_N(state - shadow), added to the shadow drift."""
        return galerkin_project((state - shadow) * gain, cutoff, "low")


@dataclass(frozen=True, eq=False)
class NavierStokes(FluidModel):
    """2-d Navier-Stokes in vorticity form; m(k) = nu |k|^2."""

    nu: float
    advection: bool = True
    body_force: "SpectralField | None" = None   # constant vorticity-space forcing

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")

    def linear_symbol(self, grid: Grid) -> np.ndarray:
        return self.nu * grid.k_sq

    def energy_functionals(self, xi: SpectralField) -> dict:
        return {
            "velocity_l2_sq": sobolev_norm(xi, -1.0) ** 2,
            "velocity_h1_sq": sobolev_norm(xi) ** 2,
        }


@dataclass(frozen=True, eq=False)
class FractionalEuler(FluidModel):
    """Fractionally dissipated Euler; m(k) = |k|^gamma, gamma in (0, 2].

    Well-posedness lives in a high Sobolev class while the pair distance is
    the L2 velocity gap, so the H^r size of the velocity is monitored as an
    energy functional (r configurable).
    """

    gamma: float
    advection: bool = True
    r_monitor: float = 2.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 2.0:
            raise ValueError("gamma must lie in (0, 2]")

    def linear_symbol(self, grid: Grid) -> np.ndarray:
        m = np.zeros(grid.shape)
        nz = grid.k_sq > 0
        m[nz] = grid.k_sq[nz] ** (self.gamma / 2.0)
        return m

    def energy_functionals(self, xi: SpectralField) -> dict:
        return {
            "vorticity_l2_sq": sobolev_norm(xi) ** 2,
            "vorticity_l4": _l4_norm(xi),
            "velocity_hr": sobolev_norm(xi, self.r_monitor - 1.0),
        }


@dataclass(frozen=True, eq=False)
class EulerVoigt(FluidModel):
    """Damped Euler-Voigt: the advecting pair is smoothed by Lambda^{-alpha}.

    m(k) = gamma_damp + eps_visc |k|^2; eps_visc > 0 is the viscous
    regularization whose eps -> 0 limit the inviscid study probes.
    alpha >= 2/3 is required; coupling experiments additionally need
    alpha > 2/3 (enforced by the control validation).
    """

    gamma_damp: float
    alpha: float
    eps_visc: float = 0.0
    advection: bool = True

    def __post_init__(self):
        if self.gamma_damp < 0 or self.eps_visc < 0:
            raise ValueError("gamma_damp and eps_visc must be nonnegative")
        if self.alpha < 2.0 / 3.0:
            raise ValueError("alpha must be at least 2/3")

    def linear_symbol(self, grid: Grid) -> np.ndarray:
        m = np.full(grid.shape, self.gamma_damp)
        m[0, 0] = 0.0
        return m + self.eps_visc * grid.k_sq

    def advecting_vorticity(self, xi: SpectralField) -> SpectralField:
        return fractional_laplacian(xi, -self.alpha)

    def rho_tilde(self, a: SpectralField, b: SpectralField) -> float:
        """||Lambda^{-alpha/2}(u - u~)||: the natural smoothed-velocity gap."""
        return sobolev_norm((a - b).zero_mean(), -1.0 - self.alpha / 2.0)

    def rho_mode_weights(self, grid: Grid) -> np.ndarray:
        w = np.zeros(grid.shape)
        nz = grid.k_sq > 0
        w[nz] = (2.0 * np.pi) ** grid.dim * grid.k_sq[nz] ** (-1.0 - self.alpha / 2.0)
        return w

    def energy_functionals(self, xi: SpectralField) -> dict:
        return {
            "alpha_velocity_sq": sobolev_norm(xi, -1.0 - self.alpha / 2.0) ** 2,
            "alpha_vorticity_sq": sobolev_norm(xi, -self.alpha / 2.0) ** 2,
        }


@dataclass
class WaveState:
    """Displacement/velocity pair of odd (sine-series) fields on the 1-d torus."""

    u: SpectralField
    v: SpectralField

    def __post_init__(self):
        if self.u.grid != self.v.grid:
            raise GridMismatchError("u and v live on different grids")
        if self.u.grid.dim != 1:
            raise GridMismatchError("wave states need a 1-d grid")

    def copy(self) -> "WaveState":
        return WaveState(self.u.copy(), self.v.copy())

    def is_odd(self, tol: float = 1e-10) -> bool:
        """Odd real fields have purely imaginary coefficients."""
        scale = max(np.max(np.abs(self.u.coeffs)), np.max(np.abs(self.v.coeffs)), 1e-300)
        worst = max(np.max(np.abs(self.u.coeffs.real)), np.max(np.abs(self.v.coeffs.real)))
        return bool(worst <= tol * scale)

    def __sub__(self, other: "WaveState") -> "WaveState":
        return WaveState(self.u - other.u, self.v - other.v)


def _odd_projection(grid: Grid, values: np.ndarray) -> SpectralField:
    """Spectral field of a physical sample, dealiased, odd symmetry kept exact."""
    f = SpectralField.from_physical(grid, values)
    c = f.coeffs * grid.dealias_mask[None, :, :]
    at_minus_k = np.roll(c[:, :, ::-1], 1, axis=-1)
    c = 0.5 * (c - at_minus_k)  # kill the even part; for real data this is i*Im(c)
    return SpectralField(grid, c)


@dataclass(frozen=True, eq=False)
class SineGordon:
    """Damped sine-Gordon on (0, pi): dv + (alpha_damp v - u'' + beta sin u) dt = noise.

    The Dirichlet problem is realized by odd extension to the 2pi-torus; all
    norms below are over the extended torus (exactly twice the (0, pi) values,
    which leaves every rate and norm-equivalence statement unchanged).
    """

    alpha_damp: float
    beta: float

    prognostic = "wave"

    def __post_init__(self):
        if self.alpha_damp <= 0:
            raise ValueError("alpha_damp must be positive")

    def check_grid(self, grid: Grid):
        if grid.dim != 1:
            raise GridMismatchError("SineGordon needs a 1-d grid")

    def lambda_1(self, grid: Grid) -> float:
        """Smallest Dirichlet eigenvalue on (0, pi): k = 1, so 1."""
        return float(grid.laplacian_eigenvalues()[0])

    def eps_shift(self, grid: Grid) -> float:
        """Shift size for r = v + eps u: min(lambda1/alpha, alpha/2, sqrt(lambda1/2))."""
        lam1 = self.lambda_1(grid)
        a = self.alpha_damp
        return float(min(lam1 / a, a / 2.0, np.sqrt(lam1 / 2.0)))

    def sine_field(self, u: SpectralField) -> SpectralField:
        """sin(u) evaluated pointwise, dealiased, odd symmetry preserved."""
        return _odd_projection(u.grid, np.sin(u.to_physical()))

    def nonlinear_drift(self, state: WaveState) -> SpectralField:
        """Drift of the v equation beyond the linear block: -beta sin(u)."""
        if self.beta == 0.0:
            return SpectralField.zeros(state.u.grid)
        out = self.sine_field(state.u)
        out.coeffs *= -self.beta
        return out

    def coupling_control(self, state: WaveState, shadow: WaveState,
                         cutoff: GalerkinCutoff) -> SpectralField:
        """beta * P_N(sin u - sin u~), added to the shadow's v drift."""
        diff = self.sine_field(state.u) - self.sine_field(shadow.u)
        return galerkin_project(diff * self.beta, cutoff, "low")

    def rho_tilde(self, a: WaveState, b: WaveState) -> float:
        """sqrt(|y|^2 + ||w||^2) with y = (v-v~) + eps (u-u~), w = u-u~."""
        eps = self.eps_shift(a.u.grid)
        w = a.u - b.u
        y = (a.v - b.v) + eps * w
        return float(np.sqrt(sobolev_norm(y) ** 2 + sobolev_norm(w, 1.0) ** 2))

    def energy_functionals(self, state: WaveState) -> dict:
        eps = self.eps_shift(state.u.grid)
        r = state.v + eps * state.u
        vals = {
            "r_l2_sq": sobolev_norm(r) ** 2,
            "u_h1_sq": sobolev_norm(state.u, 1.0) ** 2,
            "v_l2_sq": sobolev_norm(state.v) ** 2,
        }
        # norm equivalence sandwich for the shifted variable, spot-checked live
        base = vals["v_l2_sq"] + vals["u_h1_sq"]
        shifted = vals["r_l2_sq"] + vals["u_h1_sq"]
        slack = 1e-9 * (1.0 + base)
        assert 0.5 * base - slack <= shifted <= 2.0 * base + slack
        return vals


FLUID_VARIANTS = (NavierStokes, FractionalEuler, EulerVoigt)


def is_fluid(model) -> bool:
    return isinstance(model, FLUID_VARIANTS)
