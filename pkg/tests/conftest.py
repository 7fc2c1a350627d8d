"""Shared fixtures and helpers: small random networks and finite differences."""
from __future__ import annotations

import numpy as np
import pytest

from intertwiners.intertwiner import Activation
from intertwiners.network import ForwardCache, NetworkSpec, init_weights, run_layers
from intertwiners.numerics import make_rng

ALL_KINDS = [
    Activation.identity(),
    Activation.sigmoid(),
    Activation.relu(),
    Activation.leaky_relu(0.1),
    Activation.rbf(),
    Activation.polynomial(2),
    Activation.polynomial(3),
]


@pytest.fixture
def rng():
    return make_rng(12345)


def _preactivation(spec: NetworkSpec, w, x, l: int) -> np.ndarray:
    cache = ForwardCache(start=0)
    run_layers(spec, w, x, 0, l, cache=cache)
    return cache.caches[l].u


def rescale_to_unit_preactivations(spec: NetworkSpec, w, x):
    """Scale each layer so its pre-activations have unit spread on ``x``.

    Tail ratios of repeated powers grow without bound, so polynomial layers
    are instead scaled to ``max |u| = 1`` on ``x``, which keeps fresh inputs
    far inside the activation's overflow guard. Batch-norm running
    statistics are set near the observed statistics.
    """
    for l in range(1, spec.depth + 1):
        layer = w[l]
        h = x if l == 1 else run_layers(spec, w, x, 0, l - 1)[0]
        z = h @ layer.W.T + (0.0 if layer.b is None else layer.b)
        s = float(np.std(z)) or 1.0
        layer.W /= s
        if layer.b is not None:
            layer.b /= s
        if layer.bn is not None:
            z = z / s
            layer.bn.mean = z.mean(axis=0) * (1.0 + 0.1 * np.cos(np.arange(z.shape[1])))
            layer.bn.var = z.var(axis=0) * (1.0 + 0.2 * np.sin(np.arange(z.shape[1])) ** 2) + 1e-3
        if l < spec.depth and spec.activation(l).kind == "polynomial":
            peak = float(np.max(np.abs(_preactivation(spec, w, x, l))))
            if layer.bn is not None:
                layer.bn.gamma /= peak
                layer.bn.beta /= peak
            else:
                layer.W /= peak
                layer.b /= peak
    return w


def random_net(rng, kind, depth: int, max_width: int = 16, batchnorm: bool = False, bias_scale: float = 0.3,
               n_in: int | None = None, n_out: int | None = None):
    """A random ``(spec, weights)`` pair with every hidden layer using ``kind``."""
    dims = [n_in or int(rng.integers(2, max_width + 1))]
    dims += [int(rng.integers(2, max_width + 1)) for _ in range(depth - 1)]
    dims.append(n_out or int(rng.integers(2, max_width + 1)))
    spec = NetworkSpec(dims, kind, batchnorm)
    w = init_weights(spec, rng, bias_scale=bias_scale, randomize_bn=batchnorm)
    n_cal = 40_000 if getattr(kind, "kind", Activation.parse(kind).kind) == "polynomial" else 256
    rescale_to_unit_preactivations(spec, w, rng.standard_normal((n_cal, dims[0])))
    return spec, w


def finite_difference(fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``arr`` (modified in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        up = fn()
        arr[i] = old - eps
        down = fn()
        arr[i] = old
        grad[i] = (up - down) / (2.0 * eps)
    return grad


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-3, float(np.max(np.abs(a))), float(np.max(np.abs(b)))))


ACCEPTANCE_LINES = []


def record_criterion(number: int, ok: bool, text: str) -> bool:
    """Remember one PASS/FAIL line; they are repeated in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
