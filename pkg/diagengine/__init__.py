from .structural import (StructuralModel, enumerate_msos, fault_signature, isolability,
                         select_tests, compute_matching, design_residuals, dm_decompose)
from .model_io import load_model, loads_model
from .simulator import SimConfig, FaultProfile, simulate, make_cubic_toy
from .pnn import PnnArchitecture, TrainConfig, ProbabilisticNetwork, train_member
from .ensemble import EnsemblePredictor, aggregate, train_ensemble
from .decision import Decision, DecisionConfig, classify, minimal_diagnoses, inv_norm_cdf
from .metrics import sensitivity_matrix, isolation_performance, scalar_metrics
from .harness import DiagnosisExperiment, cli
from .config import CONFIG, load_config
