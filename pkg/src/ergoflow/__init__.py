"""ergoflow: stochastically forced PDEs on periodic boxes, with coupling diagnostics."""

__version__ = "0.1.0"

from .config import (
    ExperimentConfig,
    apply_overrides,
    parse_config,
    resolve_config,
)
from .coupling import (
    ControlSpec,
    EnsembleSummary,
    PairResult,
    fit_contraction_rate,
    ic_stream,
    run_ensemble,
    run_pair,
    wilson_interval,
)
from .ergodic import (
    AgreementReport,
    AverageSeries,
    InviscidReport,
    Observable,
    TailTable,
    birkhoff_average,
    envelope_exceedances,
    ergodic_agreement,
    fit_order,
    inviscid_limit_study,
    martingale_tail_check,
)
from .errors import (
    ConfigError,
    DivergedTrajectory,
    GridMismatchError,
    InsufficientData,
    MeanZeroViolation,
    RangeViolation,
)
from .forcing import (
    ForcingSet,
    GirsanovLedger,
    NoisePath,
    PrescribedPath,
    pseudo_inverse_shift,
)
from .models import (
    FLUID_VARIANTS,
    EulerVoigt,
    FractionalEuler,
    NavierStokes,
    SineGordon,
    WaveState,
    is_fluid,
)
from .spectral import (
    GalerkinCutoff,
    Grid,
    SpectralField,
    advect,
    biot_savart,
    curl,
    fractional_laplacian,
    galerkin_project,
    inner,
    leray_project,
    sobolev_norm,
)
from .stepping import (
    FluidStepper,
    StepperConfig,
    Trajectory,
    WaveStepper,
    integrate,
    read_checkpoint,
    write_checkpoint,
)

__all__ = [
    "ExperimentConfig",
    "apply_overrides",
    "parse_config",
    "resolve_config",
    "ControlSpec",
    "EnsembleSummary",
    "PairResult",
    "fit_contraction_rate",
    "ic_stream",
    "run_ensemble",
    "run_pair",
    "wilson_interval",
    "AgreementReport",
    "AverageSeries",
    "InviscidReport",
    "Observable",
    "TailTable",
    "birkhoff_average",
    "envelope_exceedances",
    "ergodic_agreement",
    "fit_order",
    "inviscid_limit_study",
    "martingale_tail_check",
    "ConfigError",
    "DivergedTrajectory",
    "GridMismatchError",
    "InsufficientData",
    "MeanZeroViolation",
    "RangeViolation",
    "ForcingSet",
    "GirsanovLedger",
    "NoisePath",
    "PrescribedPath",
    "pseudo_inverse_shift",
    "FLUID_VARIANTS",
    "EulerVoigt",
    "FractionalEuler",
    "NavierStokes",
    "SineGordon",
    "WaveState",
    "is_fluid",
    "GalerkinCutoff",
    "Grid",
    "SpectralField",
    "advect",
    "biot_savart",
    "curl",
    "fractional_laplacian",
    "galerkin_project",
    "inner",
    "leray_project",
    "sobolev_norm",
    "FluidStepper",
    "StepperConfig",
    "Trajectory",
    "WaveStepper",
    "integrate",
    "read_checkpoint",
    "write_checkpoint",
]
