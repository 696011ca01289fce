"""Reflected SDE simulation in bounded domains with coupled rate estimation."""

from .brownian import (
    BrownianPath,
    DyadicIndex,
    dump_increments,
    load_increments,
    refine,
    restrict,
    sample_path,
    wz_knot_slopes,
    wz_slope,
    wz_value,
)
from .coefficients import (
    CoefficientSet,
    constant,
    finite_difference_correction,
    ito_drift,
    linear,
    make_coefficients,
    stratonovich_correction,
    trig,
)
from .geometry import (
    ConeCoverCertificate,
    DomainSpec,
    SkorokhodStepResult,
    annulus,
    ball,
    box,
    check_d1,
    check_d2,
    check_d3,
    cone_angle,
    interval,
    make_domain,
    project_to_closure,
    skorokhod_step,
)
from .harness import (
    HolderReport,
    LyapunovDecayReport,
    LyapunovTrace,
    RateReport,
    estimate_strong_error,
    fit_rate,
    holder_report,
    lyapunov_decay_check,
    lyapunov_trace,
    run_coupling_stats,
)
from .solvers import (
    ReflectedPath,
    coupled_solve,
    solve_reference,
    solve_wz,
    sup_distance,
)

__all__ = [
    "BrownianPath",
    "CoefficientSet",
    "ConeCoverCertificate",
    "DomainSpec",
    "DyadicIndex",
    "HolderReport",
    "LyapunovDecayReport",
    "LyapunovTrace",
    "RateReport",
    "ReflectedPath",
    "SkorokhodStepResult",
    "annulus",
    "ball",
    "box",
    "check_d1",
    "check_d2",
    "check_d3",
    "cone_angle",
    "constant",
    "coupled_solve",
    "dump_increments",
    "estimate_strong_error",
    "finite_difference_correction",
    "fit_rate",
    "holder_report",
    "interval",
    "ito_drift",
    "linear",
    "load_increments",
    "lyapunov_decay_check",
    "lyapunov_trace",
    "make_coefficients",
    "make_domain",
    "project_to_closure",
    "refine",
    "restrict",
    "run_coupling_stats",
    "sample_path",
    "skorokhod_step",
    "solve_reference",
    "solve_wz",
    "stratonovich_correction",
    "sup_distance",
    "trig",
    "wz_knot_slopes",
    "wz_slope",
    "wz_value",
]
