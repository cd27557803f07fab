"""Carleman audit: conjugated decompositions, integration-by-parts identities and weighted functionals."""
from .decomposition import ConjugateDecomposition, conjugate_decompose
from .functionals import (CalibrationCheck, FunctionalReport, InadmissibleError, beam_inequality_check,
                          calibrate_then_verify, check_dteta_inequality, coupled_inequality_check,
                          heat_inequality_check, random_adjoint_trajectories)
from .ibp import ALL_PAIRS, MAIN_PAIRS, REMAINDER_PAIRS, cross_product_closed_form, cross_product_ledger, \
    verify_ibp_identity
from .samples import BeamSample, HeatSample, random_beam_sample, random_heat_sample

__all__ = [
    "ConjugateDecomposition", "conjugate_decompose", "CalibrationCheck", "FunctionalReport", "InadmissibleError",
    "beam_inequality_check", "calibrate_then_verify", "check_dteta_inequality", "coupled_inequality_check",
    "heat_inequality_check", "random_adjoint_trajectories", "ALL_PAIRS", "MAIN_PAIRS", "REMAINDER_PAIRS",
    "cross_product_closed_form", "cross_product_ledger", "verify_ibp_identity", "BeamSample", "HeatSample",
    "random_beam_sample", "random_heat_sample",
]
