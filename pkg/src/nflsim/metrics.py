"""Accuracy, private baselines and the performance gain of federation over them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, InsufficientDataError
from .federation import AttackConfig, FederationConfig, _sgd_on_batches, local_batches
from .nn import LayerStack, WeightVector

SCHEMES = ("equal", "by_size", "custom")


def train_private_baseline(data: Dataset, stack: LayerStack, epochs: int, lr: float,
                           batch_size: int, rng: np.random.Generator,
                           init: WeightVector | None = None) -> WeightVector:
    """Train the shared architecture on one client's data alone."""
    w = stack.init(rng) if init is None else init
    if epochs <= 0:
        return w
    return _sgd_on_batches(stack, w, local_batches(data, batch_size, epochs, rng), lr)


def baseline_epochs(fed: FederationConfig, attack: AttackConfig | None = None) -> int:
    """Epochs matching an honest client's expected local training over the run.

    Honest clients fill the ``K - quota`` non-attacker slots of every round.
    """
    slots, pool = fed.clients_per_round, fed.n_clients
    if attack is not None:
        slots -= attack.per_round
        pool -= attack.n_attackers(fed.n_clients)
    expected = fed.rounds * slots / max(pool, 1) * fed.local_epochs
    return max(1, int(round(expected)))


@dataclass(frozen=True)
class GainReport:
    round: int
    federated: np.ndarray  # V_G per client
    private: np.ndarray    # V_P per client
    weights: np.ndarray
    scheme: str
    clients: tuple[int, ...] = ()

    @property
    def per_client(self) -> np.ndarray:
        return self.federated - self.private

    @property
    def beta(self) -> float:
        return float(self.weights @ self.per_client)


def gain_weights(scheme: str, sizes: Sequence[int], custom: Sequence[float] | None = None) -> np.ndarray:
    n = len(sizes)
    if scheme == "equal":
        return np.full(n, 1.0 / n)
    if scheme == "by_size":
        s = np.asarray(sizes, dtype=np.float64)
        return s / s.sum()
    if scheme == "custom":
        if custom is None or len(custom) != n:
            raise ConfigurationError("custom weighting needs one weight per client")
        a = np.asarray(custom, dtype=np.float64)
        if abs(a.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"custom weights sum to {a.sum()!r}, not 1")
        return a
    raise ConfigurationError(f"unknown weighting scheme {scheme!r}")


def gain(federated_acc: Sequence[float], private_acc: Sequence[float], sizes: Sequence[int],
         scheme: str = "equal", custom: Sequence[float] | None = None, round_: int = 0,
         clients: Sequence[int] = ()) -> GainReport:
    vg = np.asarray(federated_acc, dtype=np.float64)
    vp = np.asarray(private_acc, dtype=np.float64)
    if vg.shape != vp.shape or vg.shape[0] != len(sizes):
        raise ConfigurationError("per-client accuracies and sizes disagree in length")
    return GainReport(round_, vg, vp, gain_weights(scheme, sizes, custom), scheme, tuple(clients))


def nfl_verdict(history: Sequence[GainReport], window: int = 10, horizon: int | None = None) -> bool:
    """True when the weighted gain is negative in any round of the final window.

    With ``horizon`` the window is the last ``window`` rounds up to it (reports
    may be sparser than every round); otherwise it is the last ``window`` reports.
    """
    if window < 1:
        raise ConfigurationError("window must be >= 1")
    if horizon is None:
        if len(history) < window:
            raise InsufficientDataError(f"{len(history)} reports, need {window}")
        recent = history[-window:]
    else:
        if horizon < window:
            raise InsufficientDataError(f"horizon {horizon} shorter than the window {window}")
        recent = [g for g in history if g.round > horizon - window]
        if not recent:
            raise InsufficientDataError("no gain report inside the final window")
    return any(g.beta < 0 for g in recent)


@dataclass(frozen=True)
class AccuracySnapshot:
    round: int
    central: float
    local: float
    per_client: tuple[float, ...] = field(default=())


def central_and_local_accuracy(central_predictions: np.ndarray, pooled_labels: np.ndarray,
                               client_predictions: Sequence[np.ndarray],
                               client_labels: Sequence[np.ndarray], round_: int = 0) -> AccuracySnapshot:
    """Central accuracy on the pooled test set and the unweighted mean of each
    client's serving-model accuracy on its own test set."""
    if len(pooled_labels) == 0 or any(len(y) == 0 for y in client_labels):
        raise ConfigurationError("empty test set")
    central = float(np.mean(np.asarray(central_predictions) == np.asarray(pooled_labels)))
    per_client = tuple(float(np.mean(np.asarray(p) == np.asarray(y)))
                       for p, y in zip(client_predictions, client_labels))
    local = float(np.mean(per_client)) if per_client else float("nan")
    return AccuracySnapshot(round_, central, local, per_client)
