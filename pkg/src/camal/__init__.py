"""LSM-tree cost models, a counting storage engine, and an active-learning tuner."""
from .analytic import (CalibrationConstants, Environment, LsmConfig, Policy, best_analytic_config,
                       calibrated_cost, cost, default_config, extrapolate, level_count,
                       theoretical_opt_memory, theoretical_opt_T)
from .samples import CostSample, SampleStore
from .workload import KeyDistribution, WorkloadMix, generate_stream, test_workloads, training_workloads

__version__ = "0.1.0"
