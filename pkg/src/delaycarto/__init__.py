"""Tracking and predicting end-to-end delays on every monitored path of a
network from measurements on a few of them."""

from .baseline import KrigingConfig, network_kriging_predict
from .covmodel import DelayTrace, ModelParams, simulate_trace
from .estimation import EstimatedParams, TrainingConfig, training_phase
from .harness import EvaluationReport, ExperimentConfig, nmspe, run_experiment, sweep_s
from .kkf import FilterState, PredictionResult, run_filter, step
from .selection import Cardinality, NodeBudget, PartitionMatroid, SelectionProblem, greedy_select
from .topology import Network, load_network, random_network

__version__ = "0.1.0"
