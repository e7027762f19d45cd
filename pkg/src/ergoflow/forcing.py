"""Forcing direction sets, Wiener increment streams, and the shift-cost ledger.

A ForcingSet holds d real fields sigma_1..sigma_d in the model's prognostic
variable (vorticity for the fluid models, the velocity component for the wave
model). The driving noise is sum_j sigma_j dW_j with independent scalar Wiener
processes, so a drift shift G is absorbed into the noise exactly when
G = sum_j h_j sigma_j for a coefficient vector h; |h|^2 is the quadratic cost
rate that the ledger integrates against its budget.

Canonical sets force entire wavenumber shells with orthogonal cosine/sine
pairs (a single sine per mode in the odd 1-d case), which makes the span of
the directions exactly the set of forced lattice sites.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, RangeViolation
from .spectral import Grid, SpectralField, biot_savart, sobolev_norm


class NoisePath:
    """Counter-based Gaussian stream keyed by (seed, replica_id).

    Streams for different replica ids are statistically independent (Philox
    counter cipher with the pair packed into the 128-bit key), and the values
    drawn are a pure function of (seed, replica_id, position). Refinement
    consistency across different dt is NOT claimed: halving dt produces a
    fresh sequence, not a refinement of the coarse one (tests that need a
    common Brownian path across resolutions use PrescribedPath).
    """

    def __init__(self, seed: int, replica_id: int, dt: float, dimension: int):
        if dt <= 0 or dimension < 1:
            raise ValueError("dt must be positive and dimension at least 1")
        if not (0 <= seed < 2 ** 64 and 0 <= replica_id < 2 ** 64):
            raise ValueError("seed and replica_id must fit in 64 bits")
        self.seed = int(seed)
        self.replica_id = int(replica_id)
        self.dt = float(dt)
        self.dimension = int(dimension)
        self.position = 0
        self._gen = np.random.Generator(
            np.random.Philox(key=(self.seed << 64) | self.replica_id))

    def draw_normals(self, count: int) -> np.ndarray:
        """count standard normals, advancing the stream position."""
        self.position += count
        return self._gen.standard_normal(count)

    def sample_increments(self) -> np.ndarray:
        """One vector of d independent increments ~ N(0, dt)."""
        return np.sqrt(self.dt) * self.draw_normals(self.dimension)

    def reset(self):
        self.position = 0
        self._gen = np.random.Generator(
            np.random.Philox(key=(self.seed << 64) | self.replica_id))


class PrescribedPath:
    """Replays a stored increment table; used for cross-dt path comparisons."""

    def __init__(self, increments: np.ndarray, dt: float, normals: np.ndarray | None = None):
        self.increments = np.asarray(increments, dtype=float)
        if self.increments.ndim != 2:
            raise ValueError("increments must be (n_steps, dimension)")
        self.dt = float(dt)
        self.dimension = self.increments.shape[1]
        self.position = 0
        self._normals = None if normals is None else np.asarray(normals, float).ravel()
        self._normal_pos = 0

    def sample_increments(self) -> np.ndarray:
        if self.position >= self.increments.shape[0]:
            raise IndexError("prescribed path exhausted")
        out = self.increments[self.position]
        self.position += 1
        return out

    def draw_normals(self, count: int) -> np.ndarray:
        if self._normals is None:
            raise ValueError("this prescribed path carries no auxiliary normals")
        out = self._normals[self._normal_pos:self._normal_pos + count]
        if out.size != count:
            raise IndexError("prescribed normals exhausted")
        self._normal_pos += count
        return out

    @staticmethod
    def coarsen(increments: np.ndarray, factor: int) -> np.ndarray:
        """Sum consecutive groups of rows: the same Brownian path at dt*factor."""
        inc = np.asarray(increments, dtype=float)
        n = (inc.shape[0] // factor) * factor
        return inc[:n].reshape(-1, factor, inc.shape[1]).sum(axis=1)


def _representative_sites(grid: Grid, max_shell: int) -> list:
    """One site per +-k pair with 0 < |k|^2 <= max_shell, deterministic order."""
    sites = []
    half_x = grid.modes_x // 2
    half_y = grid.modes_y // 2 if grid.modes_y > 1 else 1
    for kx in range(-(half_x - 1), half_x):
        for ky in range(-(half_y - 1), half_y) if grid.modes_y > 1 else [0]:
            ksq = kx * kx + ky * ky
            if 0 < ksq <= max_shell and (kx > 0 or (kx == 0 and ky > 0)):
                sites.append((kx, ky, ksq))
    sites.sort(key=lambda s: (s[2], s[0], s[1]))
    if not sites:
        raise ValueError(f"no lattice sites with 0 < |k|^2 <= {max_shell}")
    return sites


def _amp_for(amplitude, ksq: int) -> float:
    if isinstance(amplitude, dict):
        if ksq not in amplitude:
            raise ValueError(f"no amplitude for shell |k|^2 = {ksq}")
        a = float(amplitude[ksq])
    else:
        a = float(amplitude)
    if a <= 0:
        raise ValueError("forcing amplitudes must be positive")
    return a


@dataclass
class ForcingSet:
    """d forcing directions in the prognostic variable, plus derived tables."""

    grid: Grid
    kind: str                      # 'vorticity' or 'sine'
    directions: np.ndarray         # (d, modes_y, modes_x) complex coefficients
    amplitude_table: dict          # shell |k|^2 -> amplitude
    forced_sites: list             # [(kx, ky), ...] representative sites
    direction_labels: list = field(default_factory=list)  # [(site_idx, 'cos'|'sin')]

    def __post_init__(self):
        d = self.directions.shape[0]
        if d < 1:
            raise ValueError("need at least one forcing direction")
        norms = self.direction_norms_sq
        gram = self.gram
        off = gram - np.diag(np.diag(gram))
        if np.max(np.abs(off)) > 1e-10 * np.max(norms):
            raise ValueError("forcing directions must be L2-orthogonal")

    # -- canonical constructors -------------------------------------------

    @classmethod
    def vorticity_shells(cls, grid: Grid, max_shell: int, amplitude) -> "ForcingSet":
        """Cosine/sine pairs a*cos(k.x), a*sin(k.x) on every 0 < |k|^2 <= max_shell."""
        if grid.dim != 2:
            raise GridMismatchError("vorticity forcing needs a 2-d grid")
        sites = _representative_sites(grid, max_shell)
        dirs, labels, table = [], [], {}
        for idx, (kx, ky, ksq) in enumerate(sites):
            a = _amp_for(amplitude, ksq)
            table[ksq] = a
            cos = SpectralField.single_mode(grid, (kx, ky), a / 2.0)
            sin = SpectralField.single_mode(grid, (kx, ky), a / 2.0 * (-1j))
            dirs.extend([cos.coeffs[0], sin.coeffs[0]])
            labels.extend([(idx, "cos"), (idx, "sin")])
        return cls(grid, "vorticity", np.array(dirs), table,
                   [(kx, ky) for kx, ky, _ in sites], labels)

    @classmethod
    def sine_modes(cls, grid: Grid, k_max: int, amplitude) -> "ForcingSet":
        """Odd directions a*sin(k x) for 1 <= k <= k_max on a 1-d grid."""
        if grid.dim != 1:
            raise GridMismatchError("sine forcing needs a 1-d grid")
        if k_max >= grid.modes_x // 2:
            raise ValueError("k_max exceeds the usable lattice")
        dirs, labels, table, sites = [], [], {}, []
        for idx, k in enumerate(range(1, k_max + 1)):
            a = _amp_for(amplitude, k * k)
            table[k * k] = a
            f = SpectralField.single_mode(grid, (k, 0), a / 2.0 * (-1j))
            dirs.append(f.coeffs[0])
            labels.append((idx, "sin"))
            sites.append((k, 0))
        return cls(grid, "sine", np.array(dirs), table, sites, labels)

    # -- derived tables (computed once) -------------------------------------

    @property
    def dimension(self) -> int:
        return self.directions.shape[0]

    @property
    def _parseval(self) -> float:
        return (2.0 * np.pi) ** self.grid.dim

    @property
    def direction_norms_sq(self) -> np.ndarray:
        if not hasattr(self, "_norms_sq"):
            self._norms_sq = self._parseval * np.sum(
                np.abs(self.directions) ** 2, axis=(1, 2))
        return self._norms_sq

    @property
    def gram(self) -> np.ndarray:
        if not hasattr(self, "_gram"):
            flat = self.directions.reshape(self.dimension, -1)
            self._gram = self._parseval * np.real(flat @ np.conj(flat.T))
        return self._gram

    @property
    def sigma_sq(self) -> float:
        """|sigma|^2 = sum_j ||sigma_j||_{L2}^2 in the prognostic variable."""
        return float(np.sum(self.direction_norms_sq))

    @property
    def span_mask(self) -> np.ndarray:
        """Lattice sites reachable by the directions."""
        if not hasattr(self, "_span"):
            self._span = np.any(np.abs(self.directions) > 0, axis=0)
        return self._span

    def velocity_directions(self) -> np.ndarray:
        """Biot-Savart images of vorticity directions, shape (d, 2, my, mx)."""
        if self.kind != "vorticity":
            raise ValueError("velocity image only defined for vorticity forcing")
        if not hasattr(self, "_veldirs"):
            out = [biot_savart(SpectralField(self.grid, c)).coeffs
                   for c in self.directions]
            self._veldirs = np.array(out)
        return self._veldirs

    @property
    def velocity_sigma_sq(self) -> float:
        """sum_j ||BS(sigma_j)||_{L2}^2, the energy injection rate in velocity."""
        v = self.velocity_directions()
        return float(self._parseval * np.sum(np.abs(v) ** 2))

    def covers(self, low_mask: np.ndarray) -> bool:
        """True when every nonzero retained site has a forcing direction."""
        nonzero_low = low_mask & (self.grid.k_sq > 0)
        return bool(np.all(self.span_mask[nonzero_low]))

    def field(self, j: int) -> SpectralField:
        return SpectralField(self.grid, self.directions[j].copy())


def pseudo_inverse_shift(sigma: ForcingSet, shift: SpectralField) -> np.ndarray:
    """Coefficients h with sum_j h_j sigma_j = shift, via the pseudo-inverse.

    Raises RangeViolation when the residual exceeds 1e-10 * ||shift||.
    |h|^2 = sum h_j^2 is the instantaneous quadratic cost rate.
    """
    if shift.grid != sigma.grid or shift.components != 1:
        raise GridMismatchError("shift must be a scalar field on the forcing grid")
    flat = sigma.directions.reshape(sigma.dimension, -1)
    b = sigma._parseval * np.real(flat.conj() @ shift.coeffs[0].ravel())
    h = np.linalg.solve(sigma.gram, b)
    recon = np.tensordot(h, sigma.directions, axes=(0, 0))
    shift_norm = sobolev_norm(shift)
    residual = float(np.sqrt(sigma._parseval) *
                     np.linalg.norm(recon - shift.coeffs[0]))
    if residual > 1e-10 * max(shift_norm, 1e-300):
        raise RangeViolation(
            f"shift lies outside the forcing span (residual {residual:.3e} "
            f"vs norm {shift_norm:.3e}); every controlled mode must be forced")
    return h


@dataclass
class GirsanovLedger:
    """Integrates the quadratic shift cost against a hard budget.

    The cost int |h|^2 ds is nondecreasing; once it reaches the budget the
    ledger stops, the cost freezes, and control_active stays False forever.
    A step's control is admitted only when cost < budget at the step's start,
    so the final cost can overshoot the budget by at most one step increment.
    """

    budget: float
    cost: float = 0.0
    time: float = 0.0
    stopped: bool = False
    stop_time: float | None = None

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if self.budget == 0.0:
            self.stopped = True
            self.stop_time = 0.0

    @property
    def control_active(self) -> bool:
        return not self.stopped and self.cost < self.budget

    def update(self, h_sq: float, dt: float) -> "GirsanovLedger":
        """Accumulate one step of cost h_sq * dt; freeze at the budget."""
        if h_sq < 0 or dt <= 0:
            raise ValueError("h_sq must be nonnegative and dt positive")
        self.time += dt
        if not self.stopped:
            self.cost += h_sq * dt
            if self.cost >= self.budget:
                self.stopped = True
                self.stop_time = self.time
        return self


def ledger_update(ledger: GirsanovLedger, h: np.ndarray, dt: float) -> GirsanovLedger:
    """Advance the ledger by one step with shift coefficients h."""
    return ledger.update(float(np.dot(h, h)), dt)
