"""Distributed Kalman fusion under stochastic component selection and delays."""

from .models import SensorModel, SystemModel, check_rank_conditions, validate_model
from .local_filter import (CrossCovariance, LocalFilterState, SteadyFilter,
                           cross_covariance_step, init_filter, kalman_step,
                           steady_state)
from .channel import (CompressedPacket, DelayedLink, SelectionScheme,
                      build_scheme, enumerate_masks, make_packet, sample_mask,
                      send_and_deliver)
from .covariance import CovarianceLedger, hadamard, odot
from .fusion import (CseState, FusionResult, SteadyFusion, Trace,
                     compute_steady_weights, cse_step, fuse, run_dkfe,
                     run_sdkfe)
from .stability import (AugmentedSystem, LmiCertificate, StabilityReport,
                        build_augmented, check_convergence_conditions,
                        check_no_delay_tests, exact_ms_test, f_operator,
                        lmi_feasibility, select_probabilities)
from .scenario import Scenario, bundled_scenario_path, load_scenario

__all__ = [
    "SensorModel", "SystemModel", "check_rank_conditions", "validate_model",
    "CrossCovariance", "LocalFilterState", "SteadyFilter",
    "cross_covariance_step", "init_filter", "kalman_step", "steady_state",
    "CompressedPacket", "DelayedLink", "SelectionScheme", "build_scheme",
    "enumerate_masks", "make_packet", "sample_mask", "send_and_deliver",
    "CovarianceLedger", "hadamard", "odot",
    "CseState", "FusionResult", "SteadyFusion", "Trace",
    "compute_steady_weights", "cse_step", "fuse", "run_dkfe", "run_sdkfe",
    "AugmentedSystem", "LmiCertificate", "StabilityReport", "build_augmented",
    "check_convergence_conditions", "check_no_delay_tests", "exact_ms_test",
    "f_operator", "lmi_feasibility", "select_probabilities",
    "Scenario", "bundled_scenario_path", "load_scenario",
]
