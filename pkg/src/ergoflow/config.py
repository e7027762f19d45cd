"""YAML experiment configs: strict keys, materialized defaults, builders.

Schema (all blocks mappings; unknown keys are errors, not warnings):

    schema_version: 1
    model:
      variant: navier-stokes    # fractional-euler | euler-voigt | sine-gordon
      nu: 0.1                   # per-variant parameters, all defaulted
    grid:
      modes_x: 32
      modes_y: 32               # fluids default to modes_x; sine-gordon: 1
    forcing:
      max_shell: 2              # fluids; sine-gordon uses k_max instead
      amplitude: 1.0            # scalar or {shell |k|^2: amplitude}
    stepper:
      dt: 0.01
      t_end: 1.0
      checkpoint_every: 1
      scheme: auto
    control:                    # optional; required by the couple command
      k_cut: 1.0
      budget: 1.0e4
      gain: null                # null -> nu * lambda_N for navier-stokes
      form: linear-projection   # defaulted from the model kind
    ensemble:
      replicas: 1
      seed: 0
      success_factor: 1.0e-3
      envelope_radius: null
      max_diverged_fraction: 0.0
    initial:
      kind: random              # random | zero
      amplitude: 1.0
      decay: 2.0                # coefficient spectrum ~ |k|^-decay
      shadow_amplitude: null    # couple: size of the second draw
    output:
      directory: null           # null -> output root env var or ./runs
      formats: [ndjson, csv]
    ergodic:                    # optional; drives the ergodic command
      observables: [energy, re_mode_1_0, tanh_re_mode_0_1]
      sample_period: 1.0
      burn_in: 0.0
      tail_replicas: 0          # > 0 adds the envelope tail table
      tail_r_grid: [1.0, 2.0, 4.0, 8.0]
    inviscid:                   # optional; drives the inviscid-limit command
      eps: [0.04, 0.02, 0.01, 0.005]
      observables: [energy]
      avg_t_end: null           # observable-average horizon
      avg_sample_period: null
      burn_in: 0.0

parse_config fills every default, then actually builds the grid, model,
forcing, stepper, and control once so that cross-field rules (control form
versus model, forcing coverage of the cutoff, integer step counts) fail at
parse time with a key path rather than mid-run.
"""

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np
import yaml

from .coupling import ControlSpec
from .ergodic import Observable
from .errors import ConfigError, GridMismatchError
from .forcing import ForcingSet
from .models import (EulerVoigt, FractionalEuler, NavierStokes, SineGordon,
                     WaveState, is_fluid)
from .spectral import Grid, SpectralField, sobolev_norm
from .stepping import StepperConfig

SCHEMA_VERSION = 1

_VARIANT_DEFAULTS = {
    "navier-stokes": {"nu": 0.1, "advection": True},
    "fractional-euler": {"gamma": 1.0, "advection": True, "r_monitor": 2.5},
    "euler-voigt": {"gamma_damp": 0.5, "alpha": 1.0, "eps_visc": 0.0,
                    "advection": True},
    "sine-gordon": {"alpha_damp": 0.5, "beta": 1.0},
}

_TOP_KEYS = ("schema_version", "model", "grid", "forcing", "stepper",
             "control", "ensemble", "initial", "output", "ergodic", "inviscid")


def _require_mapping(value, path):
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{path} must be a mapping")
    return dict(value)


def _check_keys(block, allowed, path):
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key}")


def _filled(block, defaults, path):
    block = _require_mapping(block, path)
    _check_keys(block, defaults, path)
    out = dict(defaults)
    out.update(block)
    return out


def _num(value, path, *, positive=False, nonneg=False, integer=False,
         allow_none=False):
    if value is None:
        if allow_none:
            return None
        raise ConfigError(f"{path} is required")
    if isinstance(value, str):
        # YAML 1.1 reads bare scientific notation (1e4, 1.0e4) as a string
        try:
            value = float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number")
    if not math.isfinite(value):
        raise ConfigError(f"{path} must be finite")
    if integer and int(value) != value:
        raise ConfigError(f"{path} must be an integer")
    if positive and value <= 0:
        raise ConfigError(f"{path} must be positive")
    if nonneg and value < 0:
        raise ConfigError(f"{path} must be nonnegative")
    return int(value) if integer else float(value)


def parse_observable_name(name: str) -> Observable:
    if name == "energy":
        return Observable.energy()
    if name == "enstrophy":
        return Observable.enstrophy()
    m = re.fullmatch(r"re_mode_(-?\d+)_(-?\d+)", name)
    if m:
        return Observable.low_mode_real((int(m.group(1)), int(m.group(2))))
    m = re.fullmatch(r"tanh_re_mode_(-?\d+)_(-?\d+)", name)
    if m:
        return Observable.bounded_lipschitz((int(m.group(1)), int(m.group(2))))
    raise ConfigError(
        f"unknown observable {name!r} (expected energy, enstrophy, "
        "re_mode_KX_KY, or tanh_re_mode_KX_KY)")


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted-path KEY=VALUE overrides to the raw mapping in place.

    Values parse as YAML scalars; bare scientific notation like 1e4 (a string
    to YAML 1.1) is coerced to float, since overrides come from a shell.
    """
    for item in overrides or ():
        path, sep, raw = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        try:
            value = yaml.safe_load(raw) if raw != "" else None
        except yaml.YAMLError as err:
            raise ConfigError(f"override {path}: unparseable value ({err})")
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        node = data
        keys = path.split(".")
        for key in keys[:-1]:
            nxt = node.setdefault(key, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {path}: {key} is not a mapping")
            node = nxt
        node[keys[-1]] = value
    return data


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description; equality is structural."""

    resolved: dict

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and \
            self.resolved == other.resolved

    def serialize(self) -> str:
        return yaml.safe_dump(self.resolved, sort_keys=True,
                              default_flow_style=False)

    def sha256(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def block(self, name: str) -> dict:
        return self.resolved[name]

    @property
    def seed(self) -> int:
        return self.resolved["ensemble"]["seed"]

    @property
    def replicas(self) -> int:
        return self.resolved["ensemble"]["replicas"]

    @property
    def is_wave(self) -> bool:
        return self.resolved["model"]["variant"] == "sine-gordon"

    # -- builders ------------------------------------------------------------

    def build_grid(self) -> Grid:
        g = self.resolved["grid"]
        return Grid(g["modes_x"], g["modes_y"])

    def build_model(self):
        m = dict(self.resolved["model"])
        variant = m.pop("variant")
        try:
            if variant == "navier-stokes":
                return NavierStokes(**m)
            if variant == "fractional-euler":
                return FractionalEuler(**m)
            if variant == "euler-voigt":
                return EulerVoigt(**m)
            return SineGordon(**m)
        except ValueError as err:
            raise ConfigError(f"model: {err}")

    def build_forcing(self, grid: Grid) -> ForcingSet:
        f = self.resolved["forcing"]
        try:
            if self.is_wave:
                return ForcingSet.sine_modes(grid, f["k_max"], f["amplitude"])
            return ForcingSet.vorticity_shells(grid, f["max_shell"],
                                               f["amplitude"])
        except (ValueError, GridMismatchError) as err:
            raise ConfigError(f"forcing: {err}")

    def build_stepper(self) -> StepperConfig:
        s = self.resolved["stepper"]
        try:
            cfg = StepperConfig(dt=s["dt"], t_end=s["t_end"],
                                checkpoint_every=s["checkpoint_every"],
                                scheme=s["scheme"])
            cfg.n_steps
        except ValueError as err:
            raise ConfigError(f"stepper: {err}")
        return cfg

    def build_control(self) -> ControlSpec | None:
        c = self.resolved.get("control")
        if c is None:
            return None
        return ControlSpec(k_cut=c["k_cut"], budget=c["budget"],
                           gain=c["gain"], form=c["form"])

    def build_observables(self, block: str = "ergodic") -> list:
        names = self.resolved[block]["observables"]
        return [parse_observable_name(n) for n in names]

    # -- initial states --------------------------------------------------------

    def initial_sampler(self, grid: Grid):
        """rng -> one state (SpectralField, or WaveState for the wave model)."""
        ini = self.resolved["initial"]
        wave = self.is_wave

        def sampler(rng, amplitude=ini["amplitude"]):
            if ini["kind"] == "zero":
                if wave:
                    return WaveState(SpectralField.zeros(grid),
                                     SpectralField.zeros(grid))
                return SpectralField.zeros(grid)
            if wave:
                return _random_wave(grid, rng, amplitude, ini["decay"])
            return _random_vorticity(grid, rng, amplitude, ini["decay"])

        return sampler

    def pair_sampler(self, grid: Grid):
        """rng -> (leader, shadow); shadow uses shadow_amplitude if set."""
        ini = self.resolved["initial"]
        shadow_amp = ini["shadow_amplitude"]
        if shadow_amp is None:
            shadow_amp = ini["amplitude"]
        draw = self.initial_sampler(grid)

        def sampler(rng):
            return draw(rng), draw(rng, amplitude=shadow_amp)

        return sampler


def _random_vorticity(grid, rng, amplitude, decay):
    f = SpectralField.from_physical(grid, rng.standard_normal(grid.shape))
    c = f.coeffs
    w = np.zeros(grid.shape)
    nz = grid.k_sq > 0
    w[nz] = grid.k_sq[nz] ** (-decay / 2.0)
    c *= w
    c[:, ~grid.dealias_mask] = 0.0
    c[:, 0, 0] = 0.0
    norm = sobolev_norm(f)
    if norm > 0:
        c *= amplitude / norm
    return f


def _random_wave(grid, rng, amplitude, decay):
    band = max(grid.modes_x // 3, 1)
    u = SpectralField.zeros(grid)
    v = SpectralField.zeros(grid)
    for f in (u, v):
        for k in range(1, band + 1):
            a = rng.standard_normal() * k ** (-decay)
            f.coeffs[0, 0, k] = -0.5j * a
            f.coeffs[0, 0, -k % grid.modes_x] = 0.5j * a
    norm = np.sqrt(sobolev_norm(u, 1.0) ** 2 + sobolev_norm(v) ** 2)
    if norm > 0:
        u.coeffs *= amplitude / norm
        v.coeffs *= amplitude / norm
    return WaveState(u, v)


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}")
    return resolve_config(data)


def resolve_config(data) -> ExperimentConfig:
    """Validate a raw mapping, fill every default, and cross-check blocks."""
    data = _require_mapping(data, "config")
    _check_keys(data, _TOP_KEYS, "config")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is not supported "
                          f"(this build reads {SCHEMA_VERSION})")

    model_block = _require_mapping(data.get("model"), "model")
    variant = model_block.get("variant")
    if variant not in _VARIANT_DEFAULTS:
        raise ConfigError(
            f"model.variant must be one of {', '.join(_VARIANT_DEFAULTS)}")
    defaults = dict(_VARIANT_DEFAULTS[variant], variant=variant)
    model = _filled(model_block, defaults, "model")
    wave = variant == "sine-gordon"

    grid_in = _require_mapping(data.get("grid"), "grid")
    _check_keys(grid_in, ("modes_x", "modes_y"), "grid")
    modes_x = _num(grid_in.get("modes_x"), "grid.modes_x", positive=True,
                   integer=True)
    default_y = 1 if wave else modes_x
    modes_y = _num(grid_in.get("modes_y", default_y), "grid.modes_y",
                   positive=True, integer=True)
    if wave and modes_y != 1:
        raise ConfigError("grid.modes_y must be 1 for sine-gordon")
    if not wave and (modes_x < 4 or modes_y < 4):
        raise ConfigError("fluid grids need modes_x, modes_y >= 4")
    grid = {"modes_x": modes_x, "modes_y": modes_y}

    forcing_defaults = ({"k_max": 2, "amplitude": 1.0} if wave
                        else {"max_shell": 2, "amplitude": 1.0})
    forcing = _filled(data.get("forcing"), forcing_defaults, "forcing")
    key = "k_max" if wave else "max_shell"
    forcing[key] = _num(forcing[key], f"forcing.{key}", positive=True,
                        integer=True)
    amp = forcing["amplitude"]
    if isinstance(amp, dict):
        try:
            forcing["amplitude"] = {int(k): _num(v, f"forcing.amplitude[{k}]",
                                                 positive=True)
                                    for k, v in amp.items()}
        except (TypeError, ValueError):
            raise ConfigError("forcing.amplitude table keys must be integers")
    else:
        forcing["amplitude"] = _num(amp, "forcing.amplitude", positive=True)

    stepper = _filled(data.get("stepper"),
                      {"dt": 0.01, "t_end": 1.0, "checkpoint_every": 1,
                       "scheme": "auto"}, "stepper")
    stepper["dt"] = _num(stepper["dt"], "stepper.dt", positive=True)
    stepper["t_end"] = _num(stepper["t_end"], "stepper.t_end", nonneg=True)
    stepper["checkpoint_every"] = _num(stepper["checkpoint_every"],
                                       "stepper.checkpoint_every",
                                       positive=True, integer=True)
    if stepper["scheme"] not in ("auto", "exponential-em", "wave-block"):
        raise ConfigError(f"stepper.scheme {stepper['scheme']!r} unknown")
    if stepper["scheme"] == "exponential-em" and wave:
        raise ConfigError("stepper.scheme exponential-em is for fluid models")
    if stepper["scheme"] == "wave-block" and not wave:
        raise ConfigError("stepper.scheme wave-block is for the wave model")

    control = None
    if data.get("control") is not None:
        form_default = "sine-difference" if wave else "linear-projection"
        control = _filled(data["control"],
                          {"k_cut": None, "budget": None, "gain": None,
                           "form": form_default}, "control")
        control["k_cut"] = _num(control["k_cut"], "control.k_cut",
                                positive=True)
        control["budget"] = _num(control["budget"], "control.budget",
                                 nonneg=True)
        control["gain"] = _num(control["gain"], "control.gain", positive=True,
                               allow_none=True)

    ensemble = _filled(data.get("ensemble"),
                       {"replicas": 1, "seed": 0, "success_factor": 1e-3,
                        "envelope_radius": None, "max_diverged_fraction": 0.0},
                       "ensemble")
    ensemble["replicas"] = _num(ensemble["replicas"], "ensemble.replicas",
                                positive=True, integer=True)
    ensemble["seed"] = _num(ensemble["seed"], "ensemble.seed", nonneg=True,
                            integer=True)
    ensemble["success_factor"] = _num(ensemble["success_factor"],
                                      "ensemble.success_factor", positive=True)
    ensemble["envelope_radius"] = _num(ensemble["envelope_radius"],
                                       "ensemble.envelope_radius",
                                       positive=True, allow_none=True)
    ensemble["max_diverged_fraction"] = _num(
        ensemble["max_diverged_fraction"], "ensemble.max_diverged_fraction",
        nonneg=True)

    initial = _filled(data.get("initial"),
                      {"kind": "random", "amplitude": 1.0, "decay": 2.0,
                       "shadow_amplitude": None}, "initial")
    if initial["kind"] not in ("random", "zero"):
        raise ConfigError("initial.kind must be random or zero")
    initial["amplitude"] = _num(initial["amplitude"], "initial.amplitude",
                                nonneg=True)
    initial["decay"] = _num(initial["decay"], "initial.decay", nonneg=True)
    initial["shadow_amplitude"] = _num(initial["shadow_amplitude"],
                                       "initial.shadow_amplitude",
                                       nonneg=True, allow_none=True)

    output = _filled(data.get("output"),
                     {"directory": None, "formats": ["ndjson", "csv"]},
                     "output")
    if output["directory"] is not None and not isinstance(
            output["directory"], str):
        raise ConfigError("output.directory must be a string path")
    formats = output["formats"]
    if not isinstance(formats, list) or not formats or \
            any(f not in ("ndjson", "csv") for f in formats):
        raise ConfigError("output.formats must be a nonempty list drawn "
                          "from [ndjson, csv]")

    resolved = {
        "schema_version": SCHEMA_VERSION,
        "model": model,
        "grid": grid,
        "forcing": forcing,
        "stepper": stepper,
        "control": control,
        "ensemble": ensemble,
        "initial": initial,
        "output": output,
    }

    if data.get("ergodic") is not None:
        erg = _filled(data["ergodic"],
                      {"observables": ["energy", "re_mode_1_0",
                                       "tanh_re_mode_0_1"],
                       "sample_period": 1.0, "burn_in": 0.0,
                       "tail_replicas": 0,
                       "tail_r_grid": [1.0, 2.0, 4.0, 8.0]}, "ergodic")
        erg["sample_period"] = _num(erg["sample_period"],
                                    "ergodic.sample_period", positive=True)
        erg["burn_in"] = _num(erg["burn_in"], "ergodic.burn_in", nonneg=True)
        erg["tail_replicas"] = _num(erg["tail_replicas"],
                                    "ergodic.tail_replicas", nonneg=True,
                                    integer=True)
        erg["tail_r_grid"] = [_num(r, "ergodic.tail_r_grid", positive=True)
                              for r in erg["tail_r_grid"]]
        for name in erg["observables"]:
            parse_observable_name(name)
        resolved["ergodic"] = erg

    if data.get("inviscid") is not None:
        inv = _filled(data["inviscid"],
                      {"eps": [0.04, 0.02, 0.01, 0.005],
                       "observables": ["energy"], "avg_t_end": None,
                       "avg_sample_period": None, "burn_in": 0.0}, "inviscid")
        inv["eps"] = [_num(e, "inviscid.eps", nonneg=True) for e in inv["eps"]]
        inv["avg_t_end"] = _num(inv["avg_t_end"], "inviscid.avg_t_end",
                                positive=True, allow_none=True)
        inv["avg_sample_period"] = _num(inv["avg_sample_period"],
                                        "inviscid.avg_sample_period",
                                        positive=True, allow_none=True)
        inv["burn_in"] = _num(inv["burn_in"], "inviscid.burn_in", nonneg=True)
        for name in inv["observables"]:
            parse_observable_name(name)
        resolved["inviscid"] = inv

    cfg = ExperimentConfig(resolved)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: ExperimentConfig):
    """Build everything once so incompatibilities surface at parse time."""
    grid = cfg.build_grid()
    model = cfg.build_model()
    forcing = cfg.build_forcing(grid)
    cfg.build_stepper()
    control = cfg.build_control()
    if control is not None:
        control.resolve(model, grid, forcing)
    if not is_fluid(model) and cfg.resolved.get("ergodic") is not None:
        raise ConfigError("ergodic diagnostics run on the fluid models")
