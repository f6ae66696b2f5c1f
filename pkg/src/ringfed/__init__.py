"""Deterministic federated learning simulator with RingFed client pre-aggregation."""

from .algos import fedavg_aggregate, local_train, ring_exchange, scaffold_server_update
from .data import Dataset, load_idx, partition_dirichlet, partition_iid, partition_pathological
from .metrics import MetricsLog, MetricsRecord, cc_ratio, rounds_to_target, tail_stats
from .nn import MLP, LogisticRegression, OptimizerState, backward, forward_loss, init_params, sgd_step
from .orchestrator import CommLedger, Federation, RunConfig, run_experiment, select_clients

__version__ = "0.1.0"
