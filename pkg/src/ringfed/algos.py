"""Local training, server aggregation and the client ring exchange."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import ClientShard, Dataset, epoch_key, sample_batch
from .errors import ConfigurationError, ProtocolError

log = logging.getLogger(__name__)


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    num_examples: int
    # SCAFFOLD only: the client's refreshed control variate
    control: np.ndarray | None = None


@dataclass(frozen=True)
class ExchangeConfig:
    gamma: float
    ring_order: tuple[int, ...]

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if len(set(self.ring_order)) != len(self.ring_order):
            raise ConfigurationError(f"ring order repeats a client: {self.ring_order}")


@dataclass
class ScaffoldState:
    server_control: np.ndarray
    client_controls: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, param_count: int) -> "ScaffoldState":
        return cls(np.zeros(param_count))

    def control_for(self, client_id: int) -> np.ndarray:
        c = self.client_controls.get(client_id)
        return np.zeros_like(self.server_control) if c is None else c


@dataclass(frozen=True)
class Plain:
    pass


@dataclass(frozen=True)
class Prox:
    mu: float


@dataclass(frozen=True)
class Scaffold:
    server_control: np.ndarray
    client_control: np.ndarray


def local_train(
    model: nn.Model,
    dataset: Dataset,
    params: np.ndarray,
    shard: ClientShard,
    epochs: int,
    opt: nn.OptimizerState,
    batch_size: int,
    variant=Plain(),
    *,
    seed: int = 0,
    round_index: int = 0,
    period: int = 0,
    epochs_per_period: int | None = None,
) -> ClientUpdate:
    """Run ``epochs`` SGD passes over a client's shard starting from ``params``.

    ``opt`` is used (and its velocity advanced) in place, so a caller that
    trains the same client across several periods keeps its momentum.  For
    ``Prox`` the anchor is ``params`` as passed in.
    """
    if epochs < 1:
        raise ConfigurationError(f"epochs must be at least 1, got {epochs}")
    epochs_per_period = epochs if epochs_per_period is None else epochs_per_period
    w = params.copy()
    anchor = params
    correction = None
    if isinstance(variant, Scaffold):
        correction = variant.server_control - variant.client_control
    steps = 0
    grad = np.empty_like(w)
    for e in range(epochs):
        key = epoch_key(seed, shard.client_id, round_index, period, e, epochs_per_period)
        for idx in sample_batch(shard, batch_size, key):
            nn.backward(model, w, dataset.features[idx], dataset.labels[idx], out=grad)
            if isinstance(variant, Prox) and variant.mu != 0.0:
                grad += variant.mu * (w - anchor)
            elif correction is not None:
                grad += correction
            nn.sgd_step_(w, grad, opt)
            steps += 1

    control = None
    if isinstance(variant, Scaffold):
        # option II of the SCAFFOLD control update
        lr = opt.effective_lr
        if steps and lr > 0:
            control = variant.client_control - variant.server_control + (anchor - w) / (steps * lr)
        else:
            control = variant.client_control.copy()
    return ClientUpdate(shard.client_id, w, len(shard), control)


def _ordered(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    length = ordered[0].params.shape
    for u in ordered:
        if u.params.shape != length:
            raise ProtocolError(f"client {u.client_id} sent {u.params.shape}, expected {length}")
    return ordered


def fedavg_aggregate(updates: list[ClientUpdate], weighted: bool = False) -> np.ndarray:
    """Mean of client parameters, accumulated in ascending client id order.

    The unweighted mean is a running mean, so identical inputs come back
    bit-for-bit.  ``weighted`` switches to the ``num_examples``-weighted mean.
    """
    ordered = _ordered(updates)
    if not weighted:
        mean = ordered[0].params.astype(np.float64, copy=True)
        for i, u in enumerate(ordered[1:], start=2):
            mean += (u.params - mean) / i
        return mean
    total = np.zeros_like(ordered[0].params)
    n = sum(u.num_examples for u in ordered)
    for u in ordered:
        total += (u.num_examples / n) * u.params
    return total


def ring_exchange(params_by_position: list[np.ndarray], gamma: float,
                  semantics: str = "snapshot") -> list[np.ndarray]:
    """Mix every client with its ring predecessor.

    Position ``k`` receives ``gamma * w[k-1] + (1 - gamma) * w[k]``, with
    position 0 receiving from the last position.  ``"snapshot"`` reads only
    pre-exchange values; ``"sequential"`` updates positions in order
    ``1, 2, ..., K-1, 0`` in place, so each read sees earlier writes.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
    if semantics not in ("snapshot", "sequential"):
        raise ConfigurationError(f"unknown exchange semantics {semantics!r}")
    old = [np.array(p, dtype=np.float64) for p in params_by_position]
    k = len(old)
    if k < 2:
        log.info("ring of %d client(s): exchange skipped", k)
        return old
    if gamma == 0.0:
        return old
    if semantics == "snapshot":
        if gamma == 1.0:
            return [old[-1]] + old[:-1]
        return [gamma * old[i - 1] + (1.0 - gamma) * old[i] for i in range(k)]
    new = old
    for i in range(1, k):
        new[i] = gamma * new[i - 1] + (1.0 - gamma) * new[i]
    new[0] = gamma * new[k - 1] + (1.0 - gamma) * new[0]
    return new


def scaffold_server_update(
    state: ScaffoldState,
    updates: list[ClientUpdate],
    global_params: np.ndarray,
    total_clients: int,
    lr_server: float = 1.0,
) -> tuple[np.ndarray, ScaffoldState]:
    """Move the server model by the mean client delta and refresh control variates."""
    ordered = _ordered(updates)
    delta = np.zeros_like(global_params)
    control_delta = np.zeros_like(global_params)
    controls = dict(state.client_controls)
    for u in ordered:
        delta += u.params - global_params
        if u.control is None:
            raise ProtocolError(f"client {u.client_id} sent no control variate")
        control_delta += u.control - state.control_for(u.client_id)
        controls[u.client_id] = u.control
    k = len(ordered)
    new_params = global_params + lr_server * (delta / k)
    new_server_control = state.server_control + (k / total_clients) * (control_delta / k)
    return new_params, ScaffoldState(new_server_control, controls)
