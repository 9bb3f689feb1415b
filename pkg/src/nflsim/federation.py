"""FedAvg building blocks: client sampling, honest and poisoned local
training, and plain or differentially private aggregation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClientDataset, Dataset
from .errors import ConfigurationError, ProtocolError
from .nn import LayerStack, WeightVector, backward_raw, forward_raw, softmax_cross_entropy


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 20
    clients_per_round: int = 10
    batch_size: int = 10
    local_epochs: int = 1
    lr: float = 0.1
    lr_decay: float = 0.992
    rounds: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigurationError("need 1 <= clients_per_round <= n_clients")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("local_epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must lie in (0, 1]")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")

    def lr_at(self, round_: int) -> float:
        """Learning rate used by clients in round ``round_`` (1-based): ``lr * lr_decay ** round_``."""
        return self.lr * self.lr_decay ** round_


@dataclass(frozen=True)
class DpConfig:
    enabled: bool = False
    clip: float = 15.0
    sigma: float = 0.001

    def __post_init__(self):
        if self.clip <= 0:
            raise ConfigurationError("clip bound must be positive")
        if self.sigma < 0:
            raise ConfigurationError("noise std must be non-negative")


@dataclass(frozen=True)
class AttackConfig:
    """Backdoor attackers: ``fraction`` of all clients, ``per_round`` of them
    sampled every round, training ``epochs`` local epochs on batches that mix
    ``mix`` relabelled source-class samples into every batch."""

    fraction: float = 0.0
    per_round: int = 0
    label_map: tuple[tuple[int, int], ...] = ()
    mix: int = 3
    epochs: int = 5

    def __post_init__(self):
        object.__setattr__(self, "label_map", tuple((int(s), int(t)) for s, t in self.label_map))
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigurationError("attacker fraction must lie in [0, 1]")
        if self.per_round < 0 or self.mix < 0 or self.epochs < 1:
            raise ConfigurationError("invalid attack counts")

    def n_attackers(self, n_clients: int) -> int:
        return int(round(self.fraction * n_clients))

    def validate(self, fed: FederationConfig, n_classes: int) -> None:
        if self.per_round > fed.clients_per_round:
            raise ConfigurationError("attacker quota exceeds clients per round")
        if self.per_round > self.n_attackers(fed.n_clients):
            raise ConfigurationError("attacker quota exceeds the number of attackers")
        if self.n_attackers(fed.n_clients) and self.epochs < fed.local_epochs:
            raise ConfigurationError("attackers must train at least as many epochs as honest clients")
        if self.label_map and self.mix >= fed.batch_size:
            raise ConfigurationError("backdoor mix must leave room for normal samples in a batch")
        check_label_map(self.label_map, n_classes)


def check_label_map(label_map, n_classes: int) -> None:
    for s, t in label_map:
        if not (0 <= s < n_classes and 0 <= t < n_classes):
            raise ConfigurationError(f"label map {s}->{t} outside the {n_classes} classes")


@dataclass
class ClientState:
    client_id: int
    data: ClientDataset
    is_attacker: bool = False
    local: WeightVector | None = None      # v_i, only once recovery touched this client
    paired: WeightVector | None = None     # the w_i that v_i was last trained alongside
    private: WeightVector | None = None    # P_i, frozen baseline


@dataclass(frozen=True)
class NoiseDraw:
    vector: WeightVector
    norm: float

    @classmethod
    def of(cls, vector: WeightVector) -> "NoiseDraw":
        return cls(vector, vector.norm())


@dataclass(frozen=True)
class Upload:
    """The only thing a client ever sends the server."""

    client_id: int
    round: int
    weights: WeightVector


def choose_attackers(n_clients: int, attack: AttackConfig, rng: np.random.Generator) -> tuple[int, ...]:
    n = attack.n_attackers(n_clients)
    return tuple(sorted(int(i) for i in rng.choice(n_clients, size=n, replace=False)))


def sample_active(round_: int, cfg: FederationConfig, attack: AttackConfig,
                  attackers: Sequence[int], rng: np.random.Generator) -> tuple[int, ...]:
    """K client ids for this round with exactly ``attack.per_round`` attackers."""
    attackers = sorted(attackers)
    if attack.per_round > len(attackers):
        raise ConfigurationError("not enough attackers for the per-round quota")
    bad = set(attackers)
    honest = [i for i in range(cfg.n_clients) if i not in bad]
    n_honest = cfg.clients_per_round - attack.per_round
    if n_honest > len(honest):
        raise ConfigurationError("not enough honest clients for the round")
    picked = list(rng.choice(attackers, size=attack.per_round, replace=False)) if attack.per_round else []
    picked += list(rng.choice(honest, size=n_honest, replace=False)) if n_honest else []
    return tuple(sorted(int(i) for i in picked))


def _sgd_on_batches(stack: LayerStack, w: WeightVector, batches, lr: float) -> WeightVector:
    flat = w.copy_values()
    params = stack.unpack(flat)
    grad = np.empty_like(flat)
    for x, y in batches:
        pre, post = forward_raw(stack, params, x)
        _, d_logits = softmax_cross_entropy(post[-1], y)
        grad.fill(0.0)
        backward_raw(stack, params, x, pre, post, d_logits, grad)
        flat -= lr * grad
    return WeightVector._wrap(flat, w.layout)


def local_batches(data: Dataset, batch_size: int, epochs: int, rng: np.random.Generator):
    """Shuffled mini-batches, reshuffled every epoch."""
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield data.inputs[idx], data.labels[idx]


def client_update(state: ClientState, stack: LayerStack, w_global: WeightVector,
                  cfg: FederationConfig, lr: float, rng: np.random.Generator,
                  epochs: int | None = None) -> WeightVector:
    """E epochs of mini-batch SGD from the broadcast weights on local train data."""
    stack.check(w_global)
    epochs = cfg.local_epochs if epochs is None else epochs
    return _sgd_on_batches(stack, w_global, local_batches(state.data.train, cfg.batch_size, epochs, rng), lr)


def poisoned_batches(data: Dataset, backdoor: Dataset, attack: AttackConfig, batch_size: int,
                     rng: np.random.Generator):
    """Batches of ``batch_size`` holding exactly ``attack.mix`` relabelled samples each."""
    mapping = dict(attack.label_map)
    keep = np.isin(backdoor.labels, list(mapping))
    pool_x = backdoor.inputs[keep]
    pool_y = np.array([mapping[int(y)] for y in backdoor.labels[keep]], dtype=np.int64)
    if len(pool_y) < attack.mix:
        raise ConfigurationError("backdoor pool smaller than the per-batch mix")
    clean = batch_size - attack.mix
    n = len(data)
    for _ in range(attack.epochs):
        order = rng.permutation(n)
        for start in range(0, n, clean):
            idx = order[start:start + clean]
            bd = rng.choice(len(pool_y), size=attack.mix, replace=False)
            yield (np.concatenate([data.inputs[idx], pool_x[bd]]),
                   np.concatenate([data.labels[idx], pool_y[bd]]))


def attacker_update(state: ClientState, stack: LayerStack, w_global: WeightVector,
                    cfg: FederationConfig, attack: AttackConfig, backdoor: Dataset | None,
                    lr: float, rng: np.random.Generator) -> WeightVector:
    if not state.is_attacker:
        raise ProtocolError(f"client {state.client_id} is not an attacker")
    stack.check(w_global)
    check_label_map(attack.label_map, stack.n_outputs)
    if not attack.label_map or attack.mix == 0:
        return client_update(state, stack, w_global, cfg, lr, rng, epochs=attack.epochs)
    if backdoor is None:
        raise ConfigurationError("a label map needs a backdoor pool")
    batches = poisoned_batches(state.data.train, backdoor, attack, cfg.batch_size, rng)
    return _sgd_on_batches(stack, w_global, batches, lr)


def _stacked(updates: Sequence[WeightVector]) -> np.ndarray:
    if not updates:
        raise ProtocolError("aggregation over an empty set of updates")
    layout = updates[0].layout
    for u in updates[1:]:
        if u.layout != layout:
            raise ConfigurationError("updates have different layouts")
    return np.stack([u.values for u in updates])


def aggregate_plain(updates: Sequence[WeightVector]) -> WeightVector:
    """Simple (unweighted) average of the uploaded weights."""
    arr = _stacked(updates)
    return WeightVector._wrap(arr.sum(axis=0) / len(updates), updates[0].layout)


def clip_update(delta: WeightVector, bound: float) -> WeightVector:
    if bound <= 0:
        raise ConfigurationError("clip bound must be positive")
    norm = delta.norm()
    if norm <= bound:
        return delta
    return delta * (bound / norm)


def aggregate_dp(w_prev: WeightVector, updates: Sequence[WeightVector], dp: DpConfig,
                 rng: np.random.Generator) -> tuple[WeightVector, NoiseDraw]:
    """w_prev + mean of clipped deltas + one N(0, sigma^2 I) draw.

    An unclipped client contributes ``w_i`` itself rather than
    ``w_prev + (w_i - w_prev)``; the two are equal in exact arithmetic and this
    keeps the noiseless, unclipped case bit-identical to ``aggregate_plain``.
    """
    if not dp.enabled:
        raise ProtocolError("aggregate_dp called with differential privacy disabled")
    _stacked(updates)
    w_prev._check(updates[0])
    rows = []
    for u in updates:
        delta = u - w_prev
        clipped = clip_update(delta, dp.clip)
        rows.append(u.values if clipped is delta else w_prev.values + clipped.values)
    mean = np.stack(rows).sum(axis=0) / len(updates)
    if dp.sigma > 0:
        noise = rng.normal(0.0, dp.sigma, size=mean.shape)
    else:
        noise = np.zeros_like(mean)
    draw = NoiseDraw.of(WeightVector._wrap(noise, w_prev.layout))
    return WeightVector._wrap(mean + noise, w_prev.layout), draw
