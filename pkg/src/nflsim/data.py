"""Synthetic classification tasks and their allocation across clients.

Each class is an isotropic Gaussian blob around a mean placed on a sphere.
Allocation follows the usual federated benchmark recipes: an IID split, a
label-sorted shard split where every client sees exactly ``k`` classes, and a
mixed variant where client groups get different ``k``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_classes: int = 4
    n_features: int = 16
    separation: float = 3.0
    noise: float = 1.0
    n_total: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.n_features < 2:
            raise ConfigurationError("need at least 2 classes and 2 features")
        if self.separation <= 0 or self.noise <= 0:
            raise ConfigurationError("separation and noise must be positive")
        if self.n_total < self.n_classes:
            raise ConfigurationError("fewer samples than classes")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)

    def histogram(self) -> np.ndarray:
        counts = np.bincount(self.labels, minlength=self.n_classes).astype(np.float64)
        total = counts.sum()
        return counts / total if total else counts


def class_means(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0x6D65616E])
    v = rng.standard_normal((spec.n_classes, spec.n_features))
    return spec.separation * v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_class(spec: SyntheticTaskSpec, label: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Fresh draws from one class-conditional distribution."""
    mean = class_means(spec)[label]
    return mean + spec.noise * rng.standard_normal((count, spec.n_features))


def generate_task(spec: SyntheticTaskSpec) -> Dataset:
    """``n_total`` labelled points with class counts balanced to within one."""
    rng = np.random.default_rng([spec.seed, 0x64617461])
    means = class_means(spec)
    labels = np.arange(spec.n_total) % spec.n_classes
    labels = np.sort(labels)
    inputs = means[labels] + spec.noise * rng.standard_normal((spec.n_total, spec.n_features))
    order = rng.permutation(spec.n_total)
    return Dataset(inputs[order], labels[order].astype(np.int64), spec.n_classes)


@dataclass(frozen=True)
class AllocationScheme:
    """How samples are dealt to clients.

    ``kind`` is ``"iid"``, ``"non_iid"`` (every client holds ``k`` classes) or
    ``"mixed"`` (``groups`` is a list of ``(n_clients, k)`` pairs, assigned to
    client ids in order). ``sizes`` is ``"equal"`` or ``"log_normal"``.
    """

    kind: str = "iid"
    k: int | None = None
    groups: tuple[tuple[int, int], ...] = ()
    sizes: str = "equal"
    sigma_ln: float = 1.0
    test_fraction: float = 0.1
    min_shard: int = 4

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(v) for v in g) for g in self.groups))
        if self.kind not in ("iid", "non_iid", "mixed"):
            raise ConfigurationError(f"unknown allocation kind {self.kind!r}")
        if self.kind == "non_iid" and (self.k is None or self.k < 1):
            raise ConfigurationError("non_iid allocation needs k >= 1")
        if self.kind == "mixed" and not self.groups:
            raise ConfigurationError("mixed allocation needs explicit groups")
        if self.sizes not in ("equal", "log_normal"):
            raise ConfigurationError(f"unknown size distribution {self.sizes!r}")
        if self.sizes == "log_normal" and self.sigma_ln <= 0:
            raise ConfigurationError("sigma_ln must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must lie in (0, 1)")

    def classes_per_client(self, n_clients: int, n_classes: int) -> list[int]:
        if self.kind == "iid":
            return [n_classes] * n_clients
        if self.kind == "non_iid":
            ks = [self.k] * n_clients
        else:
            if sum(size for size, _ in self.groups) != n_clients:
                raise ConfigurationError(
                    f"mixed group sizes sum to {sum(s for s, _ in self.groups)}, expected {n_clients}"
                )
            ks = [k for size, k in self.groups for _ in range(size)]
        for k in ks:
            if not 1 <= k <= n_classes:
                raise ConfigurationError(f"k={k} infeasible with {n_classes} classes")
        return ks


@dataclass
class ClientDataset:
    client_id: int
    train: Dataset
    test: Dataset
    histogram: np.ndarray = field(init=False)

    def __post_init__(self):
        self.histogram = self.train.histogram()

    @property
    def size(self) -> int:
        return len(self.train) + len(self.test)

    @property
    def classes(self) -> np.ndarray:
        return np.flatnonzero(self.histogram)


def _split_sizes(total: int, parts: int, rng: np.random.Generator, sizes: str, sigma: float,
                 minimum: int) -> np.ndarray:
    """Integer sizes summing to ``total``; log-normal ones keep ``minimum`` each."""
    if parts * minimum > total:
        raise ConfigurationError(f"cannot cut {total} samples into {parts} parts of >= {minimum}")
    if sizes == "equal":
        out = np.full(parts, total // parts)
        out[: total % parts] += 1
        return out
    # location chosen so the draws have mean total/parts before rescaling
    mu = np.log(total / parts) - sigma ** 2 / 2.0
    raw = rng.lognormal(mu, sigma, size=parts)
    spare = total - parts * minimum
    ideal = spare * raw / raw.sum()
    out = np.floor(ideal).astype(np.int64)
    remainder = spare - out.sum()
    # largest-remainder correction conserves the total exactly
    order = np.argsort(-(ideal - out), kind="stable")
    out[order[:remainder]] += 1
    return out + minimum


def _train_test_split(ds: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Per-class split so train and test share the client's class mix."""
    train_idx, test_idx = [], []
    for c in np.unique(ds.labels):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = int(round(fraction * len(idx)))
        if len(idx) > 1:
            n_test = min(max(n_test, 1), len(idx) - 1)
        else:
            n_test = 0
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    if not test_idx:
        raise ConfigurationError("client too small for a train/test split")
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


def allocate(dataset: Dataset, scheme: AllocationScheme, n_clients: int, seed: int) -> list[ClientDataset]:
    """Partition ``dataset`` over ``n_clients`` clients; no sample is used twice."""
    if n_clients < 1:
        raise ConfigurationError("need at least one client")
    rng = np.random.default_rng([seed, 0x616C6C6F63])
    n_classes = dataset.n_classes
    ks = scheme.classes_per_client(n_clients, n_classes)

    if scheme.kind == "iid":
        # Stratified: every class is spread evenly along the ordering, so any
        # contiguous cut holds the global class mix up to rounding.
        key = np.empty(len(dataset))
        for c in range(n_classes):
            idx = np.flatnonzero(dataset.labels == c)
            key[idx] = (rng.permutation(len(idx)) + rng.random(len(idx))) / max(len(idx), 1)
        order = np.argsort(key, kind="stable")
        sizes = _split_sizes(len(dataset), n_clients, rng, scheme.sizes, scheme.sigma_ln, scheme.min_shard)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        parts = [order[bounds[i]:bounds[i + 1]] for i in range(n_clients)]
    else:
        # Class assignment: walk a cursor around the (shuffled) class ring so each
        # client gets k consecutive, hence distinct, classes and class loads stay
        # balanced to within one shard.
        ring = rng.permutation(n_classes)
        client_classes = []
        cursor = 0
        for k in ks:
            client_classes.append([int(ring[(cursor + t) % n_classes]) for t in range(k)])
            cursor += k
        owners: dict[int, list[int]] = {c: [] for c in range(n_classes)}
        for cid in rng.permutation(n_clients):
            for c in client_classes[cid]:
                owners[c].append(int(cid))
        parts_lists: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c in range(n_classes):
            # label-sorted data cut into contiguous shards, one per owning client
            idx = rng.permutation(np.flatnonzero(dataset.labels == c))
            holders = owners[c]
            if not holders:
                continue
            sizes = _split_sizes(len(idx), len(holders), rng, scheme.sizes, scheme.sigma_ln, scheme.min_shard)
            bounds = np.concatenate([[0], np.cumsum(sizes)])
            for j, cid in enumerate(holders):
                parts_lists[cid].append(idx[bounds[j]:bounds[j + 1]])
        parts = [np.concatenate(p) if p else np.empty(0, dtype=np.int64) for p in parts_lists]

    clients = []
    for cid, idx in enumerate(parts):
        ds = dataset.subset(np.sort(idx))
        train, test = _train_test_split(ds, scheme.test_fraction, rng)
        clients.append(ClientDataset(cid, train, test))
    return clients


def pooled_test(clients: Sequence[ClientDataset]) -> Dataset:
    return Dataset(
        np.concatenate([c.test.inputs for c in clients]),
        np.concatenate([c.test.labels for c in clients]),
        clients[0].test.n_classes,
    )


# ---------------------------------------------------------------- persistence

_HEADER = ("client", "split", "label")


def export_clients(clients: Sequence[ClientDataset], path: str | Path) -> None:
    """One sample per line: client id, split, label, then the features."""
    path = Path(path)
    n_features = clients[0].train.inputs.shape[1]
    n_classes = clients[0].train.n_classes
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_HEADER) + [f"x{j}" for j in range(n_features)] + [f"classes={n_classes}"])
        for c in clients:
            for split, ds in (("train", c.train), ("test", c.test)):
                for x, y in zip(ds.inputs, ds.labels):
                    writer.writerow([c.client_id, split, int(y)] + [repr(float(v)) for v in x])


def import_clients(path: str | Path) -> list[ClientDataset]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_classes = int(header[-1].split("=", 1)[1])
        rows: dict[int, dict[str, tuple[list, list]]] = {}
        for row in reader:
            cid, split, label = int(row[0]), row[1], int(row[2])
            slot = rows.setdefault(cid, {"train": ([], []), "test": ([], [])})[split]
            slot[0].append([float(v) for v in row[3:]])
            slot[1].append(label)
    out = []
    for cid in sorted(rows):
        parts = {
            split: Dataset(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64), n_classes)
            for split, (xs, ys) in rows[cid].items()
        }
        out.append(ClientDataset(cid, parts["train"], parts["test"]))
    return out
