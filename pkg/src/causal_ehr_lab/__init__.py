"""Synthetic EHR confounding benchmarks and doubly robust effect estimation."""
from .cohort import Cohort, PatientRecord, Vocabulary, read_cohort, write_cohort
from .estimators import EstimateReport, PredictionTable, cv_tmle_rr, naive_rr, tmle_rr
from .synth import SynthConfig, generate, persistent_config, transient_config

__version__ = "0.1.0"

__all__ = [
    "Cohort", "PatientRecord", "Vocabulary", "read_cohort", "write_cohort",
    "EstimateReport", "PredictionTable", "cv_tmle_rr", "naive_rr", "tmle_rr",
    "SynthConfig", "generate", "persistent_config", "transient_config",
]
