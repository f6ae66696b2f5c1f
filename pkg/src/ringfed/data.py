"""Dataset ingestion (IDX format) and client partitioning."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, IngestionError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, d) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ConfigurationError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def head(self, n: int) -> "Dataset":
        """The first ``n`` examples, in file order."""
        return Dataset(self.features[:n], self.labels[:n], self.num_classes)


def _read_idx(path: Path, expected_magic: int, ndim: int) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except (OSError, EOFError) as exc:
        raise IngestionError(path, f"cannot read file ({exc})") from exc

    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IngestionError(path, "truncated header")
    magic, = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IngestionError(path, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = len(raw) - header_len
    if payload < expected:
        raise IngestionError(path, f"truncated payload: {payload} bytes, header promises {expected}")
    if payload > expected:
        raise IngestionError(path, f"{payload - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; ``.gz`` files are decompressed transparently.

    Pixels are scaled to [0, 1] and flattened row-major.  ``num_classes``
    defaults to ``max(label) + 1``.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            labels_path,
            f"{labels.shape[0]} labels but {images_path.name} holds {images.shape[0]} images",
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    elif labels.size and labels.max() >= num_classes:
        raise IngestionError(labels_path, f"label {labels.max()} outside [0, {num_classes})")
    return Dataset(features, labels, num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (gzip when the suffix is ``.gz``).  Used for fixtures."""
    path = Path(path)
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def make_synthetic(n: int, input_dim: int = 2, num_classes: int = 2, seed: int = 0,
                   spread: float = 0.12) -> Dataset:
    """Gaussian blobs clipped to [0, 1]; labels balanced round-robin."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, input_dim))
    labels = np.arange(n, dtype=np.int64) % num_classes
    features = centers[labels] + spread * rng.standard_normal((n, input_dim))
    return Dataset(np.clip(features, 0.0, 1.0), labels, num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray
    seed: int

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str  # "iid" | "pathological" | "dirichlet"
    num_clients: int
    seed: int = 0
    shards_per_client: int = 2
    alpha: float = 0.5

    def __post_init__(self):
        if self.scheme not in ("iid", "pathological", "dirichlet"):
            raise ConfigurationError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise ConfigurationError(f"num_clients must be positive, got {self.num_clients}")
        if self.scheme == "pathological" and self.shards_per_client < 1:
            raise ConfigurationError("shards_per_client must be positive")
        if self.scheme == "dirichlet" and not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")


def _shards(blocks: Sequence[np.ndarray], seed: int) -> list[ClientShard]:
    return [ClientShard(k, np.asarray(b, dtype=np.int64), seed) for k, b in enumerate(blocks)]


def partition_iid(ds: Dataset, num_clients: int, seed: int) -> list[ClientShard]:
    """Random equal split; the last ``N mod num_clients`` permuted indices are dropped."""
    n = len(ds)
    if num_clients > n:
        raise ConfigurationError(f"{num_clients} clients for only {n} examples")
    perm = np.random.default_rng(seed).permutation(n)
    per_client = n // num_clients
    if n % num_clients:
        log.info("iid partition drops %d of %d examples", n % num_clients, n)
    perm = perm[: per_client * num_clients]
    return _shards(np.split(perm, num_clients), seed)


def partition_pathological(ds: Dataset, num_clients: int, shards_per_client: int,
                           seed: int) -> list[ClientShard]:
    """Label-sorted shards dealt to clients by a seeded permutation."""
    n = len(ds)
    total = num_clients * shards_per_client
    if total < 1 or n % total:
        raise ConfigurationError(
            f"{num_clients} clients x {shards_per_client} shards does not divide {n} examples"
        )
    order = np.argsort(ds.labels, kind="stable")
    shards = np.split(order, total)
    shard_labels = [frozenset(np.unique(ds.labels[s]).tolist()) for s in shards]
    groups = _deal(shard_labels, num_clients, shards_per_client, np.random.default_rng(seed))
    return _shards([np.concatenate([shards[s] for s in g]) for g in groups], seed)


def _deal(shard_labels: list[frozenset], num_clients: int, per_client: int,
          rng: np.random.Generator) -> list[list[int]]:
    """Group shards into clients so that no client sees more labels than it holds shards.

    A shard straddling a label boundary is grouped with partners sharing its
    labels; the remaining single-label shards are dealt in a seeded random
    order.  When no such grouping exists the plain random deal is used.
    """
    limit = max(per_client, max(len(labels) for labels in shard_labels))
    order = [int(s) for s in rng.permutation(len(shard_labels))]
    plain = [order[k * per_client:(k + 1) * per_client] for k in range(num_clients)]
    mixed = [s for s in order if len(shard_labels[s]) > 1]
    free = [s for s in order if len(shard_labels[s]) == 1]
    if len(mixed) > num_clients:
        log.warning("%d label-straddling shards for %d clients, dealing at random", len(mixed), num_clients)
        return plain
    groups = []
    for s in mixed:
        group, labels = [s], set(shard_labels[s])
        while len(group) < per_client:
            fit = next((c for c in free if len(labels | shard_labels[c]) <= limit), None)
            if fit is None:
                log.warning("no label-compatible partner for shard %d, dealing at random", s)
                return plain
            free.remove(fit)
            group.append(fit)
            labels |= shard_labels[fit]
        groups.append(group)
    groups += [free[i:i + per_client] for i in range(0, len(free), per_client)]
    return [groups[i] for i in rng.permutation(len(groups))]


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions * total``."""
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps lower client ids first among equal remainders
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_counts(ds: Dataset, num_clients: int, alpha: float, seed: int):
    """Per-class proportions and the rounded counts allocated to each client.

    Returns ``(proportions, counts)``, both of shape ``(num_classes, num_clients)``.
    """
    rng = np.random.default_rng(seed)
    class_sizes = np.bincount(ds.labels, minlength=ds.num_classes)
    props = rng.dirichlet(np.full(num_clients, alpha), size=ds.num_classes)
    counts = np.stack([largest_remainder(p, int(m)) for p, m in zip(props, class_sizes)])
    return props, counts


def partition_dirichlet(ds: Dataset, num_clients: int, alpha: float, seed: int) -> list[ClientShard]:
    """Each class is spread over clients by proportions drawn from Dir(alpha)."""
    if not alpha > 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    _, counts = dirichlet_counts(ds, num_clients, alpha, seed)
    rng = np.random.default_rng([seed, 1])
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        bounds = np.cumsum(counts[c])[:-1]
        for k, chunk in enumerate(np.split(members, bounds)):
            parts[k].append(chunk)
    blocks = [np.sort(np.concatenate(p)) for p in parts]
    return _shards(blocks, seed)


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.scheme == "iid":
        return partition_iid(ds, spec.num_clients, spec.seed)
    if spec.scheme == "pathological":
        return partition_pathological(ds, spec.num_clients, spec.shards_per_client, spec.seed)
    return partition_dirichlet(ds, spec.num_clients, spec.alpha, spec.seed)


def epoch_key(seed: int, client_id: int, round_index: int, period: int, epoch: int,
              epochs_per_period: int) -> list[int]:
    """Entropy for one epoch's shuffle.

    Period and epoch are folded into a single within-round epoch counter so a
    round of ``P`` periods of ``E`` epochs shuffles exactly like one plain
    round of ``P * E`` epochs.
    """
    return [seed, client_id, round_index, period * epochs_per_period + epoch]


def sample_batch(shard: ClientShard, batch_size: int, epoch_seed) -> Iterator[np.ndarray]:
    """Yield one epoch of batches (index arrays); the final short batch is kept."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be at least 1, got {batch_size}")
    if len(shard) == 0:
        raise ConfigurationError(f"client {shard.client_id} has an empty shard")
    order = shard.indices[np.random.default_rng(epoch_seed).permutation(len(shard))]
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]
