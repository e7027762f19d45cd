"""Spectral fields and operators on the periodic box.

Conventions used throughout the package:

* The domain is the torus [0, 2pi)^d sampled on a regular grid; d = 2 for the
  fluid models and d = 1 for the wave model (modes_y == 1).
* Coefficients are Fourier-series coefficients: f(x) = sum_k fhat(k) e^{i k.x},
  so ``fhat = fft(f) / size`` with integer wavenumbers from ``fftfreq``.
* Parseval then reads ``int |f|^2 dx = (2pi)^d sum_k |fhat(k)|^2``; all norms
  below carry the (2pi)^{d/2} factor so ``sobolev_norm(f, 0)`` equals the
  physical-space L2 norm (e.g. sin(x1) on the 2-torus has norm pi*sqrt(2)).
* Real fields keep exact Hermitian symmetry fhat(-k) = conj(fhat(k)); the
  Nyquist rows/columns (|k_i| == modes/2) carry no data and are kept at zero,
  so the usable lattice is |k_i| < modes/2.

Scalar fields have one component; velocity fields have two. Arrays are indexed
``[component, ky_index, kx_index]`` with the FFT's native mode ordering.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GridMismatchError, MeanZeroViolation


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid; modes_y == 1 degenerates to a 1-d torus."""

    modes_x: int
    modes_y: int = 1

    def __post_init__(self):
        for n in (self.modes_x, self.modes_y):
            if not _is_power_of_two(n):
                raise ValueError(f"mode counts must be powers of two, got {n}")
        if self.modes_x < 4:
            raise ValueError("modes_x must be at least 4")
        if self.modes_y != 1 and self.modes_y < 4:
            raise ValueError("modes_y must be 1 (for 1-d) or at least 4")

    @property
    def dim(self) -> int:
        return 1 if self.modes_y == 1 else 2

    @property
    def shape(self) -> tuple:
        return (self.modes_y, self.modes_x)

    @property
    def size(self) -> int:
        return self.modes_x * self.modes_y

    @cached_property
    def kx(self) -> np.ndarray:
        return np.fft.fftfreq(self.modes_x, d=1.0 / self.modes_x).astype(int)

    @cached_property
    def ky(self) -> np.ndarray:
        return np.fft.fftfreq(self.modes_y, d=1.0 / self.modes_y).astype(int)

    @cached_property
    def kx2d(self) -> np.ndarray:
        return np.broadcast_to(self.kx[None, :], self.shape)

    @cached_property
    def ky2d(self) -> np.ndarray:
        return np.broadcast_to(self.ky[:, None], self.shape)

    @cached_property
    def k_sq(self) -> np.ndarray:
        """Laplacian eigenvalue |k|^2 at every lattice site."""
        return (self.kx2d ** 2 + self.ky2d ** 2).astype(float)

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """Sites with |k_i| == modes/2; these carry no data and stay zero."""
        mx = np.abs(self.kx2d) == self.modes_x // 2
        my = (np.abs(self.ky2d) == self.modes_y // 2) & (self.modes_y > 1)
        return mx | my

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule: keep |k_i| <= modes_i / 3."""
        keep = np.abs(self.kx2d) <= self.modes_x / 3.0
        if self.modes_y > 1:
            keep = keep & (np.abs(self.ky2d) <= self.modes_y / 3.0)
        return keep

    def laplacian_eigenvalues(self) -> np.ndarray:
        """Sorted |k|^2 over the usable nonzero lattice, with multiplicity."""
        valid = ~self.nyquist_mask & (self.k_sq > 0)
        return np.sort(self.k_sq[valid])

    def physical_coordinates(self) -> tuple:
        x = 2.0 * np.pi * np.arange(self.modes_x) / self.modes_x
        y = 2.0 * np.pi * np.arange(self.modes_y) / self.modes_y
        return np.meshgrid(x, y)


@dataclass
class SpectralField:
    """Coefficient array on a grid; one component (scalar) or two (velocity)."""

    grid: Grid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim == 2:
            c = c[None, :, :]
        if c.shape[1:] != self.grid.shape or c.shape[0] not in (1, 2):
            raise GridMismatchError(
                f"coefficient shape {c.shape} does not fit grid {self.grid.shape}"
            )
        self.coeffs = c

    # -- construction -----------------------------------------------------

    @classmethod
    def zeros(cls, grid: Grid, components: int = 1) -> "SpectralField":
        return cls(grid, np.zeros((components,) + grid.shape, dtype=np.complex128))

    @classmethod
    def from_physical(cls, grid: Grid, values: np.ndarray) -> "SpectralField":
        """Transform real samples; Nyquist content is discarded."""
        v = np.asarray(values, dtype=float)
        if v.ndim == 2:
            v = v[None, :, :]
        if v.shape[1:] != grid.shape:
            raise GridMismatchError(
                f"sample shape {v.shape} does not fit grid {grid.shape}"
            )
        c = np.fft.fft2(v, axes=(-2, -1)) / grid.size
        c[:, grid.nyquist_mask] = 0.0
        return cls(grid, c)

    @classmethod
    def single_mode(cls, grid: Grid, k: tuple, amplitude: complex = 1.0,
                    component: int = 0, components: int = 1) -> "SpectralField":
        """Real field amplitude * 2*Re(a e^{i k.x}) built from one mode pair."""
        f = cls.zeros(grid, components)
        ix = int(k[0]) % grid.modes_x
        iy = (int(k[1]) % grid.modes_y) if grid.modes_y > 1 else 0
        jx = (-int(k[0])) % grid.modes_x
        jy = ((-int(k[1])) % grid.modes_y) if grid.modes_y > 1 else 0
        f.coeffs[component, iy, ix] += amplitude
        f.coeffs[component, jy, jx] += np.conj(amplitude)
        return f

    # -- basic queries ----------------------------------------------------

    @property
    def components(self) -> int:
        return self.coeffs.shape[0]

    def copy(self) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs.copy())

    def to_physical(self) -> np.ndarray:
        out = np.fft.ifft2(self.coeffs, axes=(-2, -1)) * self.grid.size
        return out.real

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        c = self.coeffs
        flipped = np.conj(np.roll(c[:, ::-1, ::-1], (1, 1), axis=(-2, -1)))
        scale = np.max(np.abs(c)) or 1.0
        return bool(np.max(np.abs(c - flipped)) <= tol * scale)

    @property
    def mean_is_zero(self) -> bool:
        """True when the k = 0 coefficient is exactly zero (all components)."""
        return bool(np.all(self.coeffs[:, 0, 0] == 0.0))

    def zero_mean(self) -> "SpectralField":
        out = self.copy()
        out.coeffs[:, 0, 0] = 0.0
        return out

    def divergence_norm(self) -> float:
        """Relative L2 size of div(u) for a two-component field."""
        if self.components != 2:
            raise GridMismatchError("divergence needs a two-component field")
        g = self.grid
        div = 1j * (g.kx2d * self.coeffs[0] + g.ky2d * self.coeffs[1])
        denom = np.sqrt(np.sum(np.abs(self.coeffs) ** 2))
        if denom == 0.0:
            return 0.0
        return float(np.sqrt(np.sum(np.abs(div) ** 2)) / denom)

    # -- arithmetic (value semantics) --------------------------------------

    def _check_compatible(self, other: "SpectralField"):
        if self.grid != other.grid or self.coeffs.shape != other.coeffs.shape:
            raise GridMismatchError("fields live on different grids")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check_compatible(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check_compatible(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True)
class GalerkinCutoff:
    """Split of the lattice at |k| <= k_cut; lambda_N is the first excluded |k|^2."""

    grid: Grid
    k_cut: float

    def __post_init__(self):
        if self.k_cut <= 0:
            raise ValueError("k_cut must be positive")
        if not np.any(self._low_raw()):
            raise ValueError("cutoff retains no nonzero mode")

    def _low_raw(self) -> np.ndarray:
        g = self.grid
        # tolerant <= so that k_cut = sqrt(n) retains |k|^2 == n exactly
        inside = g.k_sq <= self.k_cut ** 2 * (1.0 + 1e-12)
        return inside & ~g.nyquist_mask & (g.k_sq > 0)

    @cached_property
    def low_mask(self) -> np.ndarray:
        """Retained modes including k = 0, so low + high partitions everything."""
        g = self.grid
        inside = g.k_sq <= self.k_cut ** 2 * (1.0 + 1e-12)
        return inside & ~g.nyquist_mask

    @cached_property
    def high_mask(self) -> np.ndarray:
        return ~self.low_mask

    @cached_property
    def lambda_n(self) -> float:
        """Smallest Laplacian eigenvalue strictly above k_cut^2 on this lattice."""
        g = self.grid
        outside = ~self.low_mask & ~g.nyquist_mask & (g.k_sq > 0)
        if not np.any(outside):
            raise ValueError("cutoff excludes no mode; lambda_N undefined")
        return float(np.min(g.k_sq[outside]))

    def mode_count(self) -> int:
        """Number of retained nonzero lattice sites."""
        return int(np.count_nonzero(self._low_raw()))


# -- operators -------------------------------------------------------------


def _parseval_factor(grid: Grid) -> float:
    return (2.0 * np.pi) ** grid.dim


def inner(f: SpectralField, g: SpectralField) -> float:
    """L2 inner product over the box (real fields)."""
    f._check_compatible(g)
    return float(_parseval_factor(f.grid) *
                 np.real(np.sum(f.coeffs * np.conj(g.coeffs))))


def sobolev_norm(f: SpectralField, s: float = 0.0) -> float:
    """Homogeneous Sobolev norm ||Lambda^s f||_{L2}; s = 0 is the L2 norm."""
    g = f.grid
    power = np.abs(f.coeffs) ** 2
    if s == 0.0:
        total = np.sum(power)
    else:
        if s < 0 and not f.mean_is_zero:
            raise MeanZeroViolation("negative-order norm needs a mean-zero field")
        w = np.zeros(g.shape)
        nz = g.k_sq > 0
        w[nz] = g.k_sq[nz] ** s
        total = np.sum(power * w[None, :, :])
    return float(np.sqrt(_parseval_factor(g) * total))


def fractional_laplacian(f: SpectralField, s: float) -> SpectralField:
    """Apply Lambda^s = (-Delta)^{s/2}: multiply each mode by |k|^s."""
    g = f.grid
    if s < 0 and not f.mean_is_zero:
        raise MeanZeroViolation("negative Laplacian power needs a mean-zero field")
    mult = np.zeros(g.shape)
    nz = g.k_sq > 0
    mult[nz] = g.k_sq[nz] ** (s / 2.0)
    out = SpectralField(g, f.coeffs * mult[None, :, :])
    assert out.is_hermitian() or not f.is_hermitian()
    return out


def biot_savart(xi: SpectralField) -> SpectralField:
    """Velocity with curl(u) = xi: uhat = i (k2, -k1) xihat / |k|^2."""
    g = xi.grid
    if g.dim != 2:
        raise GridMismatchError("biot_savart needs a 2-d grid")
    if xi.components != 1:
        raise GridMismatchError("biot_savart takes a scalar vorticity")
    if not xi.mean_is_zero:
        raise MeanZeroViolation("vorticity must be mean-zero")
    inv = np.zeros(g.shape)
    nz = g.k_sq > 0
    inv[nz] = 1.0 / g.k_sq[nz]
    c = xi.coeffs[0]
    u = np.empty((2,) + g.shape, dtype=np.complex128)
    u[0] = 1j * g.ky2d * c * inv
    u[1] = -1j * g.kx2d * c * inv
    out = SpectralField(g, u)
    assert out.is_hermitian() or not xi.is_hermitian()
    return out


def curl(u: SpectralField) -> SpectralField:
    """Scalar curl d1 u2 - d2 u1 of a two-component field."""
    g = u.grid
    if u.components != 2:
        raise GridMismatchError("curl needs a two-component field")
    c = 1j * (g.kx2d * u.coeffs[1] - g.ky2d * u.coeffs[0])
    return SpectralField(g, c[None, :, :])


def leray_project(u: SpectralField) -> SpectralField:
    """Remove the gradient part: uhat -> uhat - k (k.uhat)/|k|^2."""
    g = u.grid
    if u.components != 2:
        raise GridMismatchError("leray_project needs a two-component field")
    inv = np.zeros(g.shape)
    nz = g.k_sq > 0
    inv[nz] = 1.0 / g.k_sq[nz]
    kdot = (g.kx2d * u.coeffs[0] + g.ky2d * u.coeffs[1]) * inv
    c = u.coeffs.copy()
    c[0] -= g.kx2d * kdot
    c[1] -= g.ky2d * kdot
    out = SpectralField(g, c)
    assert out.divergence_norm() <= 1e-12 or not u.is_hermitian()
    return out


def advect(vel: SpectralField, scalar: SpectralField, dealias: bool = True) -> SpectralField:
    """Pseudo-spectral vel . grad(scalar), dealiased by the 2/3 rule.

    vel must be divergence-free; with dealiasing the discrete pairing
    <vel.grad(s), s> then vanishes identically (skew symmetry).
    """
    g = vel.grid
    if scalar.grid != g:
        raise GridMismatchError("velocity and scalar live on different grids")
    if vel.components != 2 or scalar.components != 1:
        raise GridMismatchError("advect takes (velocity, scalar)")
    if vel.divergence_norm() > 1e-10:
        raise ValueError("advecting velocity is not divergence-free")
    size = g.size
    up = np.fft.ifft2(vel.coeffs, axes=(-2, -1)).real * size
    s = scalar.coeffs[0]
    gx = np.fft.ifft2(1j * g.kx2d * s).real * size
    gy = np.fft.ifft2(1j * g.ky2d * s).real * size
    prod = up[0] * gx + up[1] * gy
    c = np.fft.fft2(prod) / size
    c[g.nyquist_mask] = 0.0
    # int vel.grad(s) dx = 0 for divergence-free vel; kill the roundoff mean
    c[0, 0] = 0.0
    if dealias:
        c = c * g.dealias_mask
    return SpectralField(g, c[None, :, :])


def galerkin_project(f: SpectralField, cutoff: GalerkinCutoff, part: str = "low") -> SpectralField:
    """Project onto the retained (low) or complementary (high) modes."""
    if cutoff.grid != f.grid:
        raise GridMismatchError("cutoff built for a different grid")
    if part == "low":
        mask = cutoff.low_mask
    elif part == "high":
        mask = cutoff.high_mask
    else:
        raise ValueError("part must be 'low' or 'high'")
    return SpectralField(f.grid, f.coeffs * mask[None, :, :])
