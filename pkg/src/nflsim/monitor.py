"""Server-side divergence monitoring and NFL detection.

The server only sees uploaded weights and its own aggregation noise, so the
detector works from two numbers per round: the mean distance between client
uploads and the aggregate (``weight_divergence``) and the norm of the noise it
added. Their difference, ``delta``, should settle near zero in a healthy
federation; the detector counts rounds where it stays above ``epsilon``.

For single-layer softmax regression the module also evaluates the analytic
upper bound on the divergence, which tests use as an oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ProtocolError, UnsupportedModelError
from .federation import NoiseDraw, clip_update
from .nn import LayerStack, WeightVector, backward_raw, forward_raw, softmax_cross_entropy


def weight_divergence(updates: Sequence[WeightVector], w_agg: WeightVector) -> float:
    """Mean Euclidean distance of the uploaded weights from the aggregate."""
    if not updates:
        raise ProtocolError("weight divergence over an empty set of updates")
    for u in updates:
        w_agg._check(u)
    diffs = np.stack([u.values for u in updates]) - w_agg.values
    return float(np.linalg.norm(diffs, axis=1).sum() / len(updates))


def delta(w_div: float, noise: NoiseDraw | None) -> float:
    return w_div - (noise.norm if noise is not None else 0.0)


@dataclass(frozen=True)
class DetectorConfig:
    epsilon: float = 0.1
    patience: int = 250  # r': rounds with delta > epsilon tolerated before reporting

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")


@dataclass(frozen=True)
class DetectorState:
    count: int = 0
    flag: bool = False
    detected_round: int | None = None
    rounds: int = 0
    history: tuple[tuple[float, float, float], ...] = ()

    def record(self, w_div: float, noise_norm: float, d: float) -> "DetectorState":
        return replace(self, history=self.history + ((w_div, noise_norm, d),))


def detector_step(state: DetectorState, delta_r: float, cfg: DetectorConfig) -> DetectorState:
    """Count the round if delta exceeds epsilon; raise the flag (once, for good)
    as soon as the count exceeds the patience."""
    round_ = state.rounds + 1
    count = state.count + (1 if delta_r > cfg.epsilon else 0)
    if not state.flag and count > cfg.patience:
        return replace(state, count=count, flag=True, detected_round=round_, rounds=round_)
    return replace(state, count=count, rounds=round_)


# ---------------------------------------------------------------- analytic bound


def _require_single_layer(stack: LayerStack | None) -> None:
    if stack is not None and len(stack) != 1:
        raise UnsupportedModelError(
            f"the divergence bound needs single-layer softmax regression, got {len(stack)} layers"
        )


def estimate_lipschitz_logistic(inputs: np.ndarray, curvature: float = 0.5,
                                stack: LayerStack | None = None) -> float:
    """Smoothness constant of the mean softmax-regression gradient over ``inputs``.

    The per-sample Hessian is ``(diag(p) - p p^T) kron (x~ x~^T)`` with
    ``x~ = (x, 1)``; the first factor's spectral norm is at most 1/2 for any
    number of classes, so the default ``curvature`` is 0.5. A single-logit
    sigmoid parameterisation would allow 0.25.
    """
    _require_single_layer(stack)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.size == 0:
        return 0.0
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    return float(curvature * np.mean(np.sum(inputs * inputs, axis=1) + 1.0))


@dataclass(frozen=True)
class BoundInputs:
    """Everything the divergence bound needs for one round.

    ``priors[i, y]`` is client i's label distribution, ``lipschitz[y]`` the
    class-conditional smoothness constant and ``gmax[i, s]`` the largest
    class-conditional gradient norm at client i's weights after ``s`` local
    steps (``s = 0 .. T-1``).
    """

    priors: np.ndarray
    lipschitz: np.ndarray
    gmax: np.ndarray
    lr: float
    steps: int
    sigma: float = 0.0
    dim: int = 0

    def __post_init__(self):
        p = np.asarray(self.priors, dtype=np.float64)
        lam = np.asarray(self.lipschitz, dtype=np.float64)
        g = np.asarray(self.gmax, dtype=np.float64)
        if self.steps < 1:
            raise ConfigurationError("need at least one local step")
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigurationError("client priors must each sum to 1")
        if (lam < 0).any():
            raise ConfigurationError("Lipschitz constants must be non-negative")
        if g.shape != (p.shape[0], self.steps):
            raise ConfigurationError(f"gmax must have shape {(p.shape[0], self.steps)}, got {g.shape}")
        for arr in (p, lam, g):
            if not np.isfinite(arr).all():
                raise ConfigurationError("bound inputs must be finite")
        object.__setattr__(self, "priors", p)
        object.__setattr__(self, "lipschitz", lam)
        object.__setattr__(self, "gmax", g)


def expected_noise_norm(sigma: float, dim: int) -> float:
    """E||N(0, sigma^2 I_dim)||."""
    if sigma == 0 or dim == 0:
        return 0.0
    return sigma * math.sqrt(2.0) * math.exp(math.lgamma((dim + 1) / 2) - math.lgamma(dim / 2))


def divergence_term(inputs: BoundInputs, active: Sequence[int] | None = None) -> float:
    """The data-dependent part of the bound (everything except the noise)."""
    idx = list(range(inputs.priors.shape[0])) if active is None else list(active)
    k = len(idx)
    if k == 0:
        raise ProtocolError("bound over an empty client set")
    a = 1.0 + inputs.lr * inputs.priors @ inputs.lipschitz  # per client
    T = inputs.steps
    total = 0.0
    for i in idx:
        powers = a[i] ** np.arange(T)
        for j in idx:
            if j == i:
                continue
            spread = np.abs(inputs.priors[i] - inputs.priors[j]).sum()
            # g_max at client j after T-1-t steps, weighted by a_i^t
            total += spread * float(powers @ inputs.gmax[j, ::-1])
    return inputs.lr / k ** 2 * total


def divergence_bound(inputs: BoundInputs, active: Sequence[int] | None = None,
                noise_norm: float | None = None, stack: LayerStack | None = None) -> float:
    """Upper bound on the round's weight divergence.

    The noise term is the realised ``noise_norm`` when given (per-realisation
    check), otherwise its expectation under ``sigma`` and ``dim``.
    """
    _require_single_layer(stack)
    noise = expected_noise_norm(inputs.sigma, inputs.dim) if noise_norm is None else noise_norm
    return noise + divergence_term(inputs, active)


def class_gradients(stack: LayerStack, w: WeightVector, pools: Sequence[np.ndarray]) -> np.ndarray:
    """Rows of mean gradients over each class pool (zeros for empty pools)."""
    params = stack.unpack(w.values)
    out = np.zeros((len(pools), stack.n_params))
    for y, xs in enumerate(pools):
        if len(xs) == 0:
            continue
        pre, post = forward_raw(stack, params, xs)
        _, d = softmax_cross_entropy(post[-1], np.full(len(xs), y))
        backward_raw(stack, params, xs, pre, post, d, out[y])
    return out


@dataclass
class BoundRound:
    round: int
    w_div: float
    noise_norm: float
    bound: float
    clipped: bool


def bound_check_federation(stack: LayerStack, w0: WeightVector, pools: Sequence[np.ndarray],
                           priors: np.ndarray, lr: float, steps: int, rounds: int,
                           sigma: float = 0.0, clip: float = math.inf,
                           rng: np.random.Generator | None = None) -> list[BoundRound]:
    """Run a federation of full-batch softmax-regression clients and evaluate
    the bound every round.

    Client i's objective is ``sum_y priors[i, y] * mean-loss over pools[y]``,
    so its gradient decomposes exactly over shared class-conditional pools,
    which is the setting the bound is derived for. Every client participates
    every round and ``g_max`` is logged at each local step.
    """
    _require_single_layer(stack)
    priors = np.asarray(priors, dtype=np.float64)
    n_clients = priors.shape[0]
    lipschitz = np.array([estimate_lipschitz_logistic(xs) if len(xs) else 0.0 for xs in pools])
    rng = rng if rng is not None else np.random.default_rng(0)
    w = w0
    out = []
    for r in range(1, rounds + 1):
        uploads, gmax = [], np.zeros((n_clients, steps))
        for i in range(n_clients):
            flat = w.copy_values()
            for s in range(steps):
                wv = WeightVector._wrap(flat.copy(), w.layout)
                grads = class_gradients(stack, wv, pools)
                gmax[i, s] = np.linalg.norm(grads, axis=1).max()
                flat -= lr * (priors[i] @ grads)
            uploads.append(WeightVector._wrap(flat, w.layout))
        deltas = [u - w for u in uploads]
        clipped = any(d.norm() > clip for d in deltas)
        mean_delta = np.stack([clip_update(d, clip).values for d in deltas]).sum(axis=0) / n_clients
        noise = rng.normal(0.0, sigma, size=len(w)) if sigma > 0 else np.zeros(len(w))
        w_new = WeightVector._wrap(w.values + mean_delta + noise, w.layout)
        noise_norm = float(np.linalg.norm(noise))
        w_div = weight_divergence(uploads, w_new)
        inputs = BoundInputs(priors, lipschitz, gmax, lr, steps, sigma, len(w))
        out.append(BoundRound(r, w_div, noise_norm, divergence_bound(inputs, noise_norm=noise_norm), clipped))
        w = w_new
    return out
