"""Synthetic classification tasks, backprop and training loops."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import losses, numerics
from .errors import ConfigError, DivergenceError, NumericalError
from .intertwiner import Activation, random_element
from .network import (BN_MOMENTUM, ForwardCache, NetworkSpec, WeightSet, backward, forward, init_weights,
                      run_layers, validate_weights)

DATASET_KINDS = ("blobs", "rings", "teacher")
OPTIMIZERS = ("adam", "sgd")
TRANSFORMS = ("identity", "g_relu", "orthogonal")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1 or self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError(f"dataset needs an (N, n0) input matrix and N labels, got "
                              f"{self.inputs.shape} and {self.labels.shape}")
        if np.any(self.labels < 0):
            raise ConfigError("labels must be non-negative class indices")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_drops: int = 4
    lr_drop_factor: float = 0.5
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    loss: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr_drops < 0 or not 0.0 < self.lr_drop_factor <= 1.0:
            raise ConfigError("lr_drops must be >= 0 and lr_drop_factor in (0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in losses.LOSS_KINDS:
            raise ConfigError(f"loss must be one of {losses.LOSS_KINDS}, got {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch with evenly spaced drops."""
        drops = sum(1 for i in range(1, self.lr_drops + 1) if epoch >= i * self.epochs / (self.lr_drops + 1))
        return self.learning_rate * self.lr_drop_factor ** drops

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**obj)


# --------------------------------------------------------------------------
# data


def teacher_network(n0: int, classes: int, rng: np.random.Generator, hidden=(32,)):
    """A random ReLU network whose output biases roughly balance the classes."""
    spec = NetworkSpec([n0, *hidden, classes], "relu")
    w = init_weights(spec, rng, bias_scale=0.1)
    pool = rng.standard_normal((4096, n0))
    out = forward(spec, w, pool)
    w.layers[-1].b = w.layers[-1].b - out.mean(axis=0)
    for _ in range(50):
        counts = np.bincount(np.argmax(forward(spec, w, pool), axis=1), minlength=classes)
        w.layers[-1].b = w.layers[-1].b - 0.05 * np.log((counts + 1) / (len(pool) / classes))
    return spec, w


def synth_dataset(kind: str, n0: int, classes: int, n: int, rng: np.random.Generator, teacher=None,
                  split: str = "train") -> Dataset:
    """Draw a synthetic dataset.

    ``blobs``: Gaussian clusters around well-separated random means.
    ``rings``: concentric shells whose radius encodes the class.
    ``teacher``: standard-normal inputs labelled by the argmax of a frozen
    random network, passed as ``teacher=(spec, weights)`` or drawn from
    ``rng``.
    """
    if classes < 2:
        raise ConfigError(f"need at least two classes, got {classes}")
    if n < 1 or n0 < 1:
        raise ConfigError("n and n0 must be positive")
    if kind == "blobs":
        means = rng.standard_normal((classes, n0))
        means *= 4.0 / np.linalg.norm(means, axis=1, keepdims=True).clip(1e-12)
        labels = rng.integers(0, classes, n)
        x = means[labels] + 0.5 * rng.standard_normal((n, n0))
    elif kind == "rings":
        labels = rng.integers(0, classes, n)
        direction = rng.standard_normal((n, n0))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True).clip(1e-12)
        radius = 1.0 + labels + 0.15 * rng.standard_normal(n)
        x = direction * radius[:, None]
    elif kind == "teacher":
        if teacher is None:
            teacher = teacher_network(n0, classes, rng)
        tspec, tw = teacher
        x = rng.standard_normal((n, n0))
        labels = np.argmax(forward(tspec, tw, x), axis=1)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}")
    return Dataset(x, labels, split)


def synth_split(kind: str, n0: int, classes: int, n_train: int, n_val: int, seed: int, teacher=None):
    """Train and validation sets drawn from one task (same means/teacher)."""
    rng = numerics.make_rng(seed)
    if kind == "teacher" and teacher is None:
        teacher = teacher_network(n0, classes, rng)
    full = synth_dataset(kind, n0, classes, n_train + n_val, rng, teacher=teacher)
    return full.subset(slice(0, n_train), "train"), full.subset(slice(n_train, None), "val")


# --------------------------------------------------------------------------
# gradients


def backprop_grads(spec: NetworkSpec, w: WeightSet, batch, loss_kind: str = "cross_entropy",
                   train_mode=False, frozen=()):
    """Mean loss on ``batch = (x, y)`` and its gradient for every trainable tensor.

    Returns ``(loss, grads)`` with ``grads[l][name]`` for ``name`` in
    ``W, b, gamma, beta``. Layers listed in ``frozen`` are omitted.
    """
    x, y = batch
    cache = ForwardCache(start=0)
    out, _ = run_layers(spec, w, np.asarray(x, dtype=np.float64), 0, spec.depth, train=train_mode, cache=cache)
    loss, dout = losses.loss_and_grad(out, y, loss_kind)
    grads, _, _ = backward(spec, w, cache, dout, train=train_mode)
    for l in frozen:
        grads.pop(l, None)
    for l, g in grads.items():
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite gradient for layer {l} {name}")
    return loss, grads


def evaluate(spec: NetworkSpec, w: WeightSet, data: Dataset, loss_kind: str = "cross_entropy"):
    out = forward(spec, w, data.inputs)
    return losses.loss(out, data.labels, loss_kind), losses.accuracy(out, data.labels)


class Optimizer:
    """SGD with momentum or Adam, over a dict of named parameter arrays."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        cfg = self.cfg
        self.t += 1
        for key, g in grads.items():
            p = params[key]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.optimizer == "sgd":
                buf = self.state.get(key)
                buf = g.copy() if buf is None else cfg.momentum * buf + g
                self.state[key] = buf
                p -= lr * buf
            else:
                m, v = self.state.get(key, (np.zeros_like(p), np.zeros_like(p)))
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                self.state[key] = (m, v)
                mhat = m / (1.0 - 0.9 ** self.t)
                vhat = v / (1.0 - 0.999 ** self.t)
                p -= lr * mhat / (np.sqrt(vhat) + 1e-8)


def _param_refs(w: WeightSet) -> dict:
    refs = {}
    for l, layer in enumerate(w.layers, start=1):
        refs[(l, "W")] = layer.W
        if layer.b is not None:
            refs[(l, "b")] = layer.b
        if layer.bn is not None:
            refs[(l, "gamma")] = layer.bn.gamma
            refs[(l, "beta")] = layer.bn.beta
    return refs


def _update_running_stats(spec, w, cache, layers):
    for l in layers:
        lc = cache.caches[l]
        n = lc.z.shape[0]
        bn = w[l].bn
        unbiased = lc.batch_var * n / max(n - 1, 1)
        bn.mean *= 1.0 - BN_MOMENTUM
        bn.mean += BN_MOMENTUM * lc.batch_mean
        bn.var *= 1.0 - BN_MOMENTUM
        bn.var += BN_MOMENTUM * unbiased


def train(spec: NetworkSpec, w0: WeightSet, data: Dataset, cfg: TrainConfig, val: Dataset | None = None,
          frozen=()):
    """Minibatch training; returns the best-validation weights and the history.

    ``frozen`` lists layers whose parameters (and batch-norm statistics) stay
    fixed. The validation set defaults to the training set. History rows
    hold ``epoch``, ``train_loss`` and ``val_acc``; ties in validation
    accuracy keep the earliest epoch.

    Raises:
        DivergenceError: on a non-finite loss; ``history`` is attached.
    """
    validate_weights(spec, w0)
    val = data if val is None else val
    frozen = set(frozen)
    w = w0.copy()
    params = {k: v for k, v in _param_refs(w).items() if k[0] not in frozen}
    bn_train = {l for l in range(1, spec.depth) if spec.has_bn(l) and l not in frozen}
    opt = Optimizer(cfg)
    rng = numerics.make_rng(cfg.seed)
    n = len(data)
    history = []
    best, best_acc = None, -1.0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = data.inputs[idx], data.labels[idx]
            cache = ForwardCache(start=0)
            try:
                out, _ = run_layers(spec, w, x, 0, spec.depth, train=bn_train, cache=cache)
            except NumericalError as exc:
                raise DivergenceError(f"epoch {epoch + 1}: {exc}", history) from exc
            loss, dout = losses.loss_and_grad(out, y, cfg.loss)
            if not math.isfinite(loss):
                raise DivergenceError(f"epoch {epoch + 1}: non-finite training loss", history)
            grads, _, _ = backward(spec, w, cache, dout, train=bn_train)
            flat = {(l, name): g for l, gl in grads.items() if l not in frozen for name, g in gl.items()}
            _update_running_stats(spec, w, cache, bn_train)
            opt.step(params, flat, lr)
            total += loss * len(idx)
            count += len(idx)
        try:
            _, acc = evaluate(spec, w, val, cfg.loss)
        except NumericalError as exc:
            raise DivergenceError(f"epoch {epoch + 1}: {exc}", history) from exc
        history.append({"epoch": epoch + 1, "train_loss": total / count, "val_acc": acc})
        if acc > best_acc:
            best, best_acc = w.copy(), acc
    return best, history


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_acc"], lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({"epoch": row["epoch"], "train_loss": repr(float(row["train_loss"])),
                             "val_acc": repr(float(row["val_acc"]))})


# --------------------------------------------------------------------------
# rotation penalty


def transform_matrix(transform: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if transform == "identity":
        return np.eye(n)
    if transform == "g_relu":
        return random_element(Activation.relu(), n, rng).to_matrix()
    if transform == "orthogonal":
        return numerics.random_orthogonal(rng, n)
    raise ConfigError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")


def apply_preactivation_transform(spec: NetworkSpec, w: WeightSet, l: int, a) -> WeightSet:
    """Replace ``W_l, b_l`` by ``A W_l, A b_l``."""
    w2 = w.copy()
    w2[l].W = a @ w2[l].W
    if w2[l].b is not None:
        w2[l].b = a @ w2[l].b
    return w2


@dataclass
class RotationResult:
    transform: str
    baseline_acc: float
    transformed_acc: float
    finetuned_acc: float

    @property
    def penalty(self) -> float:
        """Accuracy points lost after fine-tuning."""
        return 100.0 * (self.baseline_acc - self.finetuned_acc)


def rotation_penalty_experiment(spec: NetworkSpec, data: Dataset, l: int, transform: str, cfg: TrainConfig,
                                rng: np.random.Generator, val: Dataset | None = None,
                                w_base: WeightSet | None = None) -> RotationResult:
    """Transform the pre-activation of layer ``l``, freeze layers ``<= l`` and fine-tune the rest.

    A baseline network is trained first unless ``w_base`` is given.
    """
    if not 1 <= l < spec.depth or spec.activation(l).kind != "relu":
        raise ConfigError(f"layer {l} is not a hidden ReLU layer")
    if spec.has_bn(l):
        raise ConfigError("the rotation experiment expects no batch norm at the transformed layer")
    val = data if val is None else val
    if w_base is None:
        w_base, _ = train(spec, init_weights(spec, rng), data, cfg, val)
    _, base_acc = evaluate(spec, w_base, val)
    a = transform_matrix(transform, spec.dims[l], rng)
    w_t = apply_preactivation_transform(spec, w_base, l, a)
    _, t_acc = evaluate(spec, w_t, val)
    w_ft, _ = train(spec, w_t, data, cfg, val, frozen=range(1, l + 1))
    _, ft_acc = evaluate(spec, w_ft, val)
    return RotationResult(transform, base_acc, t_acc, ft_acc)
