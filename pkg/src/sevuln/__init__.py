"""Sensitivity-based vulnerability analysis of power-system state estimation."""

__version__ = "0.1.0"

from .errors import SEVulnError
from .estimator import SolverOptions, bdd_chi_square, estimate_state, kkt_residual
from .measurements import (
    Measurement,
    MeasurementConfig,
    MeasurementSet,
    load_config,
    measurement_function,
    synthesize_measurements,
)
from .network import Branch, Bus, Network, build_admittance, load_case, parse_case, scale_demands
from .powerflow import StateVector, solve_power_flow
from .robustness import (
    SeedPolicy,
    analyze_ensemble,
    center_columns,
    invariance_verdict,
    svd_analysis,
    sweep_operating_conditions,
)
from .scoring import ScoreParams, l_score, rank_measurements, score_measurements, s_score, s_shape, v_score
from .sensitivity import (
    assemble_kkt_blocks,
    finite_difference_check,
    measurement_sensitivities,
    weight_sensitivities,
)

from importlib.resources import files as _files


def data_path(name):
    """Path of a bundled case or measurement file (e.g. ``"case4.m"``)."""
    return _files(__name__).joinpath("data", name)
