"""Round-level protocol driver for FedAvg, RingFed, FedProx and SCAFFOLD."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .algos import (ClientUpdate, ExchangeConfig, Plain, Prox, Scaffold, ScaffoldState,
                    fedavg_aggregate, local_train, ring_exchange, scaffold_server_update)
from .data import ClientShard, Dataset, PartitionSpec, load_idx, partition
from .errors import ConfigurationError, RingFedError
from .metrics import MetricsLog, MetricsRecord

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "ringfed", "fedprox", "scaffold")
# rounds-to-target accuracy thresholds used when none is configured
DEFAULT_TARGETS = {"mnist": 0.90, "fmnist": 0.75}


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "fedavg"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_limit: int | None = None
    num_clients: int = 100
    select_frac: float = 0.3
    rounds: int = 100
    epochs: int = 5
    periods: int = 6
    gamma: float = 0.8
    batch_size: int = 10
    lr: float = 0.005
    momentum: float = 0.9
    lr_decay: float = 1.0
    partition: str = "pathological"
    alpha: float = 0.001
    shards_per_client: int = 2
    model: str = "mlp"
    hidden_dim: int = 64
    mu: float = 0.01
    server_lr: float = 1.0
    seed: int = 0
    exchange_semantics: str = "snapshot"
    exchange_final_period: bool = False
    weighted_average: bool = False
    ring_order: str = "ascending"
    dataset: str = "mnist"
    target_accuracy: float | None = None
    tail_window: int = 50

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm: expected one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.num_clients < 1:
            raise ConfigurationError(f"num_clients: must be positive, got {self.num_clients}")
        if not 0.0 < self.select_frac <= 1.0:
            raise ConfigurationError(f"select_frac: must lie in (0, 1], got {self.select_frac}")
        if self.clients_per_round < 1:
            raise ConfigurationError(
                f"select_frac: {self.num_clients} x {self.select_frac} rounds to zero clients"
            )
        for name in ("epochs", "periods", "batch_size", "hidden_dim", "shards_per_client"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be at least 1, got {getattr(self, name)}")
        if self.rounds < 0:
            raise ConfigurationError(f"rounds: must be non-negative, got {self.rounds}")
        if self.train_limit is not None and self.train_limit < 1:
            raise ConfigurationError(f"train_limit: must be positive, got {self.train_limit}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma: must lie in [0, 1], got {self.gamma}")
        if self.lr < 0:
            raise ConfigurationError(f"lr: must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError(f"momentum: must lie in [0, 1], got {self.momentum}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError(f"lr_decay: must lie in (0, 1], got {self.lr_decay}")
        if self.partition not in ("iid", "pathological", "dirichlet"):
            raise ConfigurationError(f"partition: unknown scheme {self.partition!r}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha: must be positive, got {self.alpha}")
        if self.model not in ("mlp", "logistic"):
            raise ConfigurationError(f"model: expected 'mlp' or 'logistic', got {self.model!r}")
        if self.mu < 0:
            raise ConfigurationError(f"mu: must be non-negative, got {self.mu}")
        if self.server_lr <= 0:
            raise ConfigurationError(f"server_lr: must be positive, got {self.server_lr}")
        if self.exchange_semantics not in ("snapshot", "sequential"):
            raise ConfigurationError(f"exchange_semantics: unknown value {self.exchange_semantics!r}")
        if self.ring_order not in ("ascending", "shuffled"):
            raise ConfigurationError(f"ring_order: unknown value {self.ring_order!r}")
        if self.target_accuracy is not None and not 0.0 < self.target_accuracy < 1.0:
            raise ConfigurationError(f"target_accuracy: must lie in (0, 1), got {self.target_accuracy}")
        if self.target_accuracy is None and self.dataset not in DEFAULT_TARGETS:
            raise ConfigurationError(f"target_accuracy: required for dataset {self.dataset!r}")
        if self.tail_window < 1:
            raise ConfigurationError(f"tail_window: must be at least 1, got {self.tail_window}")

    @property
    def clients_per_round(self) -> int:
        return int(self.num_clients * self.select_frac + 0.5)

    @property
    def resolved_target(self) -> float:
        if self.target_accuracy is not None:
            return self.target_accuracy
        return DEFAULT_TARGETS[self.dataset]

    @property
    def effective_momentum(self) -> float:
        # the tuning grid's momentum 1.0 means plain SGD; literal beta=1 never decays
        return 0.0 if self.momentum == 1.0 else self.momentum

    @property
    def periods_per_round(self) -> int:
        return self.periods if self.algorithm == "ringfed" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clients_per_round"] = self.clients_per_round
        d["effective_momentum"] = self.effective_momentum
        d["resolved_target"] = self.resolved_target
        return d

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class CommLedger:
    """Cumulative counts of whole-parameter-vector transmissions."""

    uplink_units: int = 0
    downlink_units: int = 0
    peer_units: int = 0

    def add(self, other: "CommLedger") -> None:
        self.uplink_units += other.uplink_units
        self.downlink_units += other.downlink_units
        self.peer_units += other.peer_units


class SimulationError(RingFedError):
    """A training round failed; the message names the round and client."""


def select_clients(num_clients: int, select_frac: float, round_seed) -> list[int]:
    """Uniformly pick ``round(num_clients * select_frac)`` distinct ids, ascending."""
    if not 0.0 < select_frac <= 1.0:
        raise ConfigurationError(f"select_frac must lie in (0, 1], got {select_frac}")
    k = int(num_clients * select_frac + 0.5)
    if k < 1:
        raise ConfigurationError(f"{num_clients} x {select_frac} rounds to zero clients")
    if k == num_clients:
        return list(range(num_clients))
    chosen = np.random.default_rng(round_seed).choice(num_clients, size=k, replace=False)
    return sorted(int(c) for c in chosen)


def build_model(cfg: RunConfig, dataset: Dataset) -> nn.Model:
    if cfg.model == "logistic":
        return nn.LogisticRegression(dataset.input_dim, dataset.num_classes)
    return nn.MLP(dataset.input_dim, cfg.hidden_dim, dataset.num_classes)


def evaluate(model: nn.Model, params: np.ndarray, dataset: Dataset) -> tuple[float, float]:
    """Accuracy and mean loss on the whole dataset."""
    loss, correct = nn.forward_loss(model, params, dataset.features, dataset.labels)
    return correct / len(dataset), loss


class Federation:
    """One experiment's simulated server plus its clients.

    Clients are stateless between rounds apart from SCAFFOLD control variates.
    """

    def __init__(self, cfg: RunConfig, train: Dataset, test: Dataset, shards: list[ClientShard] | None = None):
        self.cfg = cfg
        self.train = train
        self.test = test
        self.model = build_model(cfg, train)
        if shards is None:
            spec = PartitionSpec(cfg.partition, cfg.num_clients, cfg.seed, cfg.shards_per_client, cfg.alpha)
            shards = partition(train, spec)
        if len(shards) != cfg.num_clients:
            raise ConfigurationError(f"{len(shards)} shards for {cfg.num_clients} clients")
        self.shards = shards
        self.ledger = CommLedger()
        self.scaffold = ScaffoldState.zeros(self.model.param_count)

    def _optimizer(self, round_index: int) -> nn.OptimizerState:
        return nn.OptimizerState(self.cfg.lr, self.cfg.effective_momentum, self.cfg.lr_decay, round_index)

    def _train(self, client: int, params, epochs, opt, variant, round_index, period=0, epochs_per_period=None):
        shard = self.shards[client]
        try:
            update = local_train(self.model, self.train, params, shard, epochs, opt, self.cfg.batch_size,
                                 variant, seed=self.cfg.seed, round_index=round_index, period=period,
                                 epochs_per_period=epochs_per_period)
        except RingFedError as exc:
            raise SimulationError(f"round {round_index}, client {client}: {exc}") from exc
        if not np.all(np.isfinite(update.params)):
            raise SimulationError(f"round {round_index}, client {client}: parameters diverged to non-finite values")
        return update

    def select(self, round_index: int) -> list[int]:
        return select_clients(self.cfg.num_clients, self.cfg.select_frac, [self.cfg.seed, 1, round_index])

    def ring(self, selected: list[int], round_index: int) -> ExchangeConfig:
        order = list(selected)
        if self.cfg.ring_order == "shuffled":
            order = [int(c) for c in np.random.default_rng([self.cfg.seed, 2, round_index]).permutation(order)]
        return ExchangeConfig(self.cfg.gamma, tuple(order))

    def _round_ledger(self, k: int, exchanges: int) -> CommLedger:
        return CommLedger(k, self.cfg.num_clients, k * exchanges)

    def run_round_fedavg(self, global_params: np.ndarray, round_index: int, variant_for=None):
        cfg = self.cfg
        selected = self.select(round_index)
        updates = []
        for c in selected:
            variant = Plain() if variant_for is None else variant_for(c)
            updates.append(self._train(c, global_params, cfg.epochs, self._optimizer(round_index), variant, round_index))
        return updates, self._round_ledger(len(selected), 0)

    def run_round_ringfed(self, global_params: np.ndarray, round_index: int):
        cfg = self.cfg
        selected = self.select(round_index)
        exchange = self.ring(selected, round_index)
        if len(selected) < 2:
            log.info("round %d: ring of %d client(s), no exchange", round_index, len(selected))
        opts = {c: self._optimizer(round_index) for c in selected}
        current = {c: global_params for c in selected}
        exchanges = 0
        for p in range(cfg.periods):
            for c in selected:
                current[c] = self._train(c, current[c], cfg.epochs, opts[c], Plain(), round_index,
                                         period=p, epochs_per_period=cfg.epochs).params
            if p < cfg.periods - 1 or cfg.exchange_final_period:
                mixed = ring_exchange([current[c] for c in exchange.ring_order], exchange.gamma,
                                      cfg.exchange_semantics)
                current = dict(zip(exchange.ring_order, mixed))
                exchanges += 1
        updates = [ClientUpdate(c, current[c], len(self.shards[c])) for c in selected]
        return updates, self._round_ledger(len(selected), exchanges)

    def step(self, global_params: np.ndarray, round_index: int) -> tuple[np.ndarray, CommLedger]:
        """Run one communication round and return the new global parameters."""
        cfg = self.cfg
        if cfg.algorithm == "ringfed":
            updates, delta = self.run_round_ringfed(global_params, round_index)
        elif cfg.algorithm == "fedprox":
            updates, delta = self.run_round_fedavg(global_params, round_index, lambda c: Prox(cfg.mu))
        elif cfg.algorithm == "scaffold":
            state = self.scaffold
            updates, delta = self.run_round_fedavg(
                global_params, round_index, lambda c: Scaffold(state.server_control, state.control_for(c)))
            new_params, self.scaffold = scaffold_server_update(
                state, updates, global_params, cfg.num_clients, cfg.server_lr)
            self.ledger.add(delta)
            return new_params, delta
        else:
            updates, delta = self.run_round_fedavg(global_params, round_index)
        self.ledger.add(delta)
        return fedavg_aggregate(updates, weighted=cfg.weighted_average), delta

    def record(self, round_index: int, params: np.ndarray) -> MetricsRecord:
        acc, loss = evaluate(self.model, params, self.test)
        return MetricsRecord(round_index, acc, loss, self.ledger.uplink_units,
                             self.ledger.downlink_units, self.ledger.peer_units)

    def run(self, params: np.ndarray | None = None, progress=None) -> tuple[MetricsLog, np.ndarray]:
        if params is None:
            params = nn.init_params(self.model, self.cfg.seed)
        metrics = MetricsLog(config=self.cfg.to_dict())
        metrics.append(self.record(0, params))
        for t in range(self.cfg.rounds):
            params, _ = self.step(params, t)
            metrics.append(self.record(t + 1, params))
            if progress is not None:
                progress(metrics.records[-1])
        return metrics, params


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    for name in ("train_images", "train_labels", "test_images", "test_labels"):
        if not getattr(cfg, name):
            raise ConfigurationError(f"{name}: dataset path is required")
    train = load_idx(cfg.train_images, cfg.train_labels)
    test = load_idx(cfg.test_images, cfg.test_labels, num_classes=train.num_classes)
    return train, test


def run_experiment(cfg: RunConfig, train: Dataset | None = None, test: Dataset | None = None,
                   progress=None) -> MetricsLog:
    """Initialize once from ``cfg.seed``, train ``cfg.rounds`` rounds, evaluate after each.

    Record 0 is the evaluation of the initial parameters.  Datasets are read
    from the configured paths unless passed in.
    """
    if train is None or test is None:
        train, test = load_datasets(cfg)
    if cfg.train_limit is not None:
        train = train.head(cfg.train_limit)
    metrics, _ = Federation(cfg, train, test).run(progress=progress)
    return metrics
