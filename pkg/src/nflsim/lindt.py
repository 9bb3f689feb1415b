"""Layer-wise intertwined dual-model training.

A client keeps a private local model ``v`` with the same architecture as the
global model ``w``. At every hidden layer an attaching module mixes the two
representations into ``h`` which feeds the next local layer::

    score = sigmoid(<L, G> / ||L||)        (one scalar per sample)
    h     = score * G + (1 - score) * L

Training minimises the sum of the global head's and the local head's
cross-entropy; both parameter sets receive exact gradients, including the
path through ``score``. Only the global weights ever leave the client.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .federation import ClientState, FederationConfig, local_batches
from .nn import (
    Batch,
    LayerStack,
    WeightVector,
    activate,
    activation_grad,
    backward_raw,
    forward_raw,
    softmax_cross_entropy,
)

MODES = ("detect_and_recover", "all_time")
STOPPING = ("persist", "all_clients_once", "delta_below_eps")


@dataclass(frozen=True)
class LindtConfig:
    enabled: bool = True
    mode: str = "detect_and_recover"
    stopping: str = "persist"
    window: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown LINDT mode {self.mode!r}")
        if self.stopping not in STOPPING:
            raise ConfigurationError(f"unknown stopping strategy {self.stopping!r}")
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")


def _sigmoid(q: np.ndarray) -> np.ndarray:
    out = np.empty_like(q)
    pos = q >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-q[pos]))
    e = np.exp(q[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class AttachState:
    score: np.ndarray      # (B,)
    h: np.ndarray          # (B, width)
    projection: np.ndarray  # <L, G> / ||L|| before the sigmoid
    local_norm: np.ndarray


def attach(G: np.ndarray, L: np.ndarray) -> AttachState:
    """Attaching module for one layer; rows are samples.

    A zero local representation has no direction to project on; its score is
    fixed at sigmoid(0) = 0.5 and treated as constant for differentiation.
    """
    G = np.asarray(G, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if G.shape != L.shape:
        raise ConfigurationError(f"attach needs equal shapes, got {G.shape} and {L.shape}")
    squeeze = G.ndim == 1
    if squeeze:
        G, L = G[None, :], L[None, :]
    norm = np.linalg.norm(L, axis=1)
    dot = np.einsum("ij,ij->i", L, G)
    q = np.divide(dot, norm, out=np.zeros_like(dot), where=norm > 0)
    score = _sigmoid(q)
    # L + s (G - L) keeps h == L bit-exactly when both sides agree
    h = L + score[:, None] * (G - L)
    if squeeze:
        return AttachState(score, h[0], q, norm)
    return AttachState(score, h, q, norm)


@dataclass(frozen=True)
class DualModel:
    stack: LayerStack
    w: WeightVector
    v: WeightVector

    def __post_init__(self):
        if len(self.stack) < 2:
            raise ConfigurationError("a dual model needs at least one hidden layer to attach")
        self.stack.check(self.w)
        self.stack.check(self.v)


@dataclass(frozen=True)
class DualOutput:
    global_acts: list[np.ndarray]
    local_acts: list[np.ndarray]
    attach: list[AttachState]

    @property
    def global_logits(self) -> np.ndarray:
        return self.global_acts[-1]

    @property
    def local_logits(self) -> np.ndarray:
        return self.local_acts[-1]


@dataclass
class _Trace:
    g_pre: list
    g_post: list
    l_in: list
    l_pre: list
    l_post: list
    att: list


def _dual_forward_raw(stack: LayerStack, wp, vp, x: np.ndarray) -> _Trace:
    g_pre, g_post = forward_raw(stack, wp, x)
    l_in, l_pre, l_post, att = [], [], [], []
    a = x
    last = len(stack) - 1
    for m, (layer, (V, c)) in enumerate(zip(stack.layers, vp)):
        l_in.append(a)
        z = a @ V + c
        out = activate(layer.activation, z)
        l_pre.append(z)
        l_post.append(out)
        if m < last:
            st = attach(g_post[m], out)
            att.append(st)
            a = st.h
    return _Trace(g_pre, g_post, l_in, l_pre, l_post, att)


def _dual_backward_raw(stack: LayerStack, wp, vp, x, tr: _Trace, y: np.ndarray,
                       gw: np.ndarray, gv: np.ndarray) -> float:
    loss_g, d_glogits = softmax_cross_entropy(tr.g_post[-1], y)
    loss_l, delta = softmax_cross_entropy(tr.l_post[-1], y)
    views = stack.unpack(gv)
    extra: dict[int, np.ndarray] = {}
    for m in range(len(stack) - 1, -1, -1):
        gV, gc = views[m]
        gV += tr.l_in[m].T @ delta
        gc += delta.sum(axis=0)
        if m == 0:
            break
        dh = delta @ vp[m][0].T
        st = tr.att[m - 1]
        G, L = tr.g_post[m - 1], tr.l_post[m - 1]
        s = st.score
        ds = np.einsum("ij,ij->i", dh, G - L)
        dq = ds * s * (1.0 - s)
        inv = np.divide(1.0, st.local_norm, out=np.zeros_like(st.local_norm), where=st.local_norm > 0)
        dG = s[:, None] * dh + (dq * inv)[:, None] * L
        dL = ((1.0 - s)[:, None] * dh + (dq * inv)[:, None] * G
              - (dq * st.projection * inv * inv)[:, None] * L)
        extra[m - 1] = dG
        prev = stack.layers[m - 1].activation
        delta = dL * activation_grad(prev, tr.l_pre[m - 1], tr.l_post[m - 1])
    backward_raw(stack, wp, x, tr.g_pre, tr.g_post, d_glogits, gw, extra=extra)
    return loss_g + loss_l


def _inputs(stack: LayerStack, x) -> np.ndarray:
    x = x.inputs if isinstance(x, Batch) else np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != stack.n_inputs:
        raise ConfigurationError(f"layer 0 expects {stack.n_inputs} features, got {x.shape[1]}")
    return x


def dual_forward(dm: DualModel, x) -> DualOutput:
    x = _inputs(dm.stack, x)
    tr = _dual_forward_raw(dm.stack, dm.stack.unpack(dm.w.values), dm.stack.unpack(dm.v.values), x)
    return DualOutput(tr.g_post, tr.l_post, tr.att)


def dual_loss_and_grads(dm: DualModel, batch: Batch) -> tuple[float, WeightVector, WeightVector]:
    """Sum of both heads' mean cross-entropy and its gradients w.r.t. w and v."""
    stack = dm.stack
    x = _inputs(stack, batch)
    wp, vp = stack.unpack(dm.w.values), stack.unpack(dm.v.values)
    tr = _dual_forward_raw(stack, wp, vp, x)
    gw = np.zeros(stack.n_params)
    gv = np.zeros(stack.n_params)
    loss = _dual_backward_raw(stack, wp, vp, x, tr, batch.labels, gw, gv)
    return loss, WeightVector._wrap(gw, dm.w.layout), WeightVector._wrap(gv, dm.v.layout)


def dual_client_update(state: ClientState, stack: LayerStack, w_global: WeightVector,
                       cfg: FederationConfig, lr: float, rng: np.random.Generator
                       ) -> tuple[WeightVector, WeightVector]:
    """One round of dual training; stores the new ``v`` on ``state`` and
    returns ``(w_i, v_i)``. Only ``w_i`` is meant for upload."""
    stack.check(w_global)
    if len(stack) < 2:
        raise ConfigurationError("a dual model needs at least one hidden layer to attach")
    v0 = w_global if state.local is None else state.local
    stack.check(v0)
    w = w_global.copy_values()
    v = v0.copy_values()
    wp, vp = stack.unpack(w), stack.unpack(v)
    gw = np.empty_like(w)
    gv = np.empty_like(v)
    for x, y in local_batches(state.data.train, cfg.batch_size, cfg.local_epochs, rng):
        tr = _dual_forward_raw(stack, wp, vp, x)
        gw.fill(0.0)
        gv.fill(0.0)
        _dual_backward_raw(stack, wp, vp, x, tr, y, gw, gv)
        # both steps use gradients of the same loss evaluation
        w -= lr * gw
        v -= lr * gv
    w_out = WeightVector._wrap(w, w_global.layout)
    v_out = WeightVector._wrap(v, w_global.layout)
    state.local = v_out
    state.paired = w_out
    return w_out, v_out


def local_logits(stack: LayerStack, w: WeightVector, v: WeightVector | None, x, active: bool) -> np.ndarray:
    x = _inputs(stack, x)
    if active and v is not None:
        tr = _dual_forward_raw(stack, stack.unpack(w.values), stack.unpack(v.values), x)
        return tr.l_post[-1]
    _, post = forward_raw(stack, stack.unpack(w.values), x)
    return post[-1]


def local_predict(stack: LayerStack, w: WeightVector, v: WeightVector | None, x, active: bool) -> np.ndarray:
    """Labels served to a client: the local head while recovery is active,
    the plain global model otherwise (or before this client has a ``v``)."""
    return np.argmax(local_logits(stack, w, v, x, active), axis=1)


# ---------------------------------------------------------------- recovery control


@dataclass(frozen=True)
class RecoveryState:
    active: bool = False
    started_round: int | None = None
    participated: frozenset = frozenset()
    calm_rounds: int = 0
    stopped_round: int | None = None

    @classmethod
    def initial(cls, cfg: LindtConfig) -> "RecoveryState":
        if cfg.enabled and cfg.mode == "all_time":
            return cls(active=True, started_round=1)
        return cls()


@dataclass(frozen=True)
class RoundEvents:
    round: int
    nfl_flag: bool
    participants: Sequence[int]
    delta: float
    epsilon: float
    n_clients: int


def recovery_controller(rec: RecoveryState, ev: RoundEvents, cfg: LindtConfig) -> RecoveryState:
    """Advance the recovery state at the end of a round.

    Participation and calm-round counting only include rounds in which dual
    training actually ran, i.e. rounds that started with recovery active.
    """
    if not cfg.enabled or rec.stopped_round is not None:
        return rec
    if not rec.active:
        if cfg.mode == "all_time" or ev.nfl_flag:
            return RecoveryState(active=True, started_round=ev.round)
        return rec
    participated = rec.participated | frozenset(int(i) for i in ev.participants)
    calm = rec.calm_rounds + 1 if ev.delta < ev.epsilon else 0
    out = replace(rec, participated=participated, calm_rounds=calm)
    if cfg.stopping == "all_clients_once" and len(participated) >= ev.n_clients:
        return replace(out, active=False, stopped_round=ev.round)
    if cfg.stopping == "delta_below_eps" and calm >= cfg.window:
        return replace(out, active=False, stopped_round=ev.round)
    return out
