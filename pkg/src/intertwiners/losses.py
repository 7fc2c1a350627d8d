"""Mean losses over a batch and their gradients with respect to the logits."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError

LOSS_KINDS = ("cross_entropy", "mse")


def _targets(labels, n_out: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 1:
        onehot = np.zeros((y.shape[0], n_out))
        onehot[np.arange(y.shape[0]), y.astype(np.int64)] = 1.0
        return onehot
    return y.astype(np.float64)


def log_softmax(z):
    z = z - np.max(z, axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def loss_and_grad(out, labels, loss_kind: str):
    """Return ``(mean loss, d loss / d out)``.

    ``mse`` sums squared error over outputs and averages over samples;
    integer labels are one-hot encoded first.
    """
    n = out.shape[0]
    if loss_kind == "cross_entropy":
        y = np.asarray(labels).astype(np.int64)
        logp = log_softmax(out)
        loss = -float(np.mean(logp[np.arange(n), y]))
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        return loss, grad / n
    if loss_kind == "mse":
        diff = out - _targets(labels, out.shape[1])
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    raise ConfigError(f"unknown loss {loss_kind!r}; expected one of {LOSS_KINDS}")


def loss(out, labels, loss_kind: str) -> float:
    return loss_and_grad(out, labels, loss_kind)[0]


def accuracy(out, labels) -> float:
    return float(np.mean(np.argmax(out, axis=1) == np.asarray(labels)))
