"""Shared test utilities: finite differences and small random models."""
from __future__ import annotations

import numpy as np

from nflsim.nn import Batch, LayerStack, forward_raw

STEP = 1e-5
REL_TOL = 1e-4
KINK = 1e-3  # relu pre-activations closer than this to 0 make finite differences meaningless


def central_difference(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at flat vector ``x``."""
    g = np.zeros_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + step
        up = f(x)
        x[k] = orig - step
        down = f(x)
        x[k] = orig
        g[k] = (up - down) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_stack(rng: np.random.Generator, n_layers: int | None = None, activation: str | None = None,
                 max_width: int = 6) -> LayerStack:
    n_layers = n_layers or int(rng.integers(2, 4))
    widths = [int(w) for w in rng.integers(2, max_width + 1, size=n_layers + 1)]
    act = activation or str(rng.choice(["relu", "tanh", "identity"]))
    return LayerStack.mlp(widths, act)


def random_batch(rng: np.random.Generator, stack: LayerStack, size: int | None = None) -> Batch:
    size = size or int(rng.integers(1, 6))
    x = rng.normal(size=(size, stack.n_inputs))
    y = rng.integers(0, stack.n_outputs, size=size)
    return Batch(x, y)


def near_kink(stack: LayerStack, flats, x: np.ndarray) -> bool:
    """True if any relu unit of any of the given parameter vectors sits within
    ``KINK`` of zero for the batch, where the loss is not differentiable."""
    for flat in flats:
        pre, _ = forward_raw(stack, stack.unpack(flat), x)
        for layer, z in zip(stack.layers, pre):
            if layer.activation == "relu" and (np.abs(z) < KINK).any():
                return True
    return False


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
