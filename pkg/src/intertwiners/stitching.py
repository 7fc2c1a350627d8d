"""Stitching layers between two frozen networks.

``S(f, g, l, phi) = g_{>l} o phi o f_{<=l}``. The stitching map ``phi`` is
linear without bias and comes in four parameterizations:

* ``full``: any d x d matrix.
* ``reduced_rank``: ``U V`` with inner dimension ``rank``.
* ``grelu``: ``P diag(lam)`` with ``P`` kept doubly stochastic by clamping
  and Sinkhorn iterations after every step, and ``lam >= 0``. At evaluation
  ``P`` is thresholded to the nearest permutation.
* ``softsort``: ``SoftSort(s, tau) diag(exp(lam))``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .errors import ConfigError, DimensionError, DivergenceError, FormatError
from .metrics import linear_sum_assignment
from .network import ForwardCache, NetworkSpec, WeightSet, backward, forward_upto, run_layers, validate_weights
from .trainer import Dataset

VARIANTS = ("full", "reduced_rank", "grelu", "softsort")
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# permutation relaxations


def sinkhorn_project(m, iters: int = 16) -> np.ndarray:
    """Clamp to non-negative and run ``iters`` column-then-row normalizations.

    Rows or columns that are entirely zero after clamping are reset to
    ``1/d``. The last step normalizes rows, so row sums are 1 up to rounding.
    """
    p = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    d = p.shape[0]
    if p.shape != (d, d):
        raise DimensionError(f"expected a square matrix, got {p.shape}")
    if iters < 1:
        raise ConfigError("need at least one Sinkhorn iteration")
    p[np.sum(p, axis=1) == 0.0, :] = 1.0 / d
    p[:, np.sum(p, axis=0) == 0.0] = 1.0 / d
    for _ in range(iters):
        p /= p.sum(axis=0, keepdims=True)
        p /= p.sum(axis=1, keepdims=True)
    return p


def threshold_permutation(p) -> np.ndarray:
    """Permutation ``q`` (row ``i`` -> column ``q[i]``) maximizing ``tr(P Q^T)``."""
    perm, _ = linear_sum_assignment(p)
    return perm


def permutation_matrix(q) -> np.ndarray:
    q = np.asarray(q)
    m = np.zeros((len(q), len(q)))
    m[np.arange(len(q)), q] = 1.0
    return m


def _softsort_parts(s, tau):
    order = np.argsort(-s, kind="stable")
    t = s[order]
    diff = t[:, None] - s[None, :]
    logits = -np.abs(diff) / tau
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p, order, diff


def softsort(s, tau: float) -> np.ndarray:
    """Row-stochastic relaxation of the descending sort permutation of ``s``.

    ``P[i, j] = softmax_j(-|sort(s)_i - s_j| / tau)``.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    return _softsort_parts(np.asarray(s, dtype=np.float64), tau)[0]


# --------------------------------------------------------------------------
# layers


class StitchLayer:
    """A bias-free linear stitching map ``h -> M h``."""

    variant = None

    def matrix(self) -> np.ndarray:
        raise NotImplementedError

    def eval_matrix(self) -> np.ndarray:
        """Matrix used at evaluation time (thresholded where applicable)."""
        return self.matrix()

    def params(self) -> dict:
        raise NotImplementedError

    def grads(self, g_m) -> dict:
        """Chain ``dL/dM`` into the layer's own parameters."""
        raise NotImplementedError

    def project(self, update_scale: bool = True) -> None:
        pass

    def __call__(self, h, evaluation: bool = False):
        m = self.eval_matrix() if evaluation else self.matrix()
        return np.asarray(h, dtype=np.float64) @ m.T

    def to_json(self) -> dict:
        return {"format_version": FORMAT_VERSION, "variant": self.variant,
                **{k: np.asarray(v).tolist() for k, v in self.params().items()}, **self._extra_json()}

    def _extra_json(self):
        return {}


@dataclass(eq=False)
class FullAffine(StitchLayer):
    M: np.ndarray
    variant = "full"

    def matrix(self):
        return self.M

    def params(self):
        return {"M": self.M}

    def grads(self, g_m):
        return {"M": g_m}


@dataclass(eq=False)
class ReducedRank(StitchLayer):
    U: np.ndarray
    V: np.ndarray
    variant = "reduced_rank"

    def matrix(self):
        return self.U @ self.V

    def params(self):
        return {"U": self.U, "V": self.V}

    def grads(self, g_m):
        return {"U": g_m @ self.V.T, "V": self.U.T @ g_m}


@dataclass(eq=False)
class GRelu(StitchLayer):
    """``P diag(lam)`` with ``P`` in the Birkhoff polytope."""

    P: np.ndarray
    lam: np.ndarray
    sinkhorn_iters: int = 16
    thresholded: np.ndarray | None = field(default=None, repr=False)
    variant = "grelu"

    def matrix(self):
        return self.P * self.lam[None, :]

    def eval_matrix(self):
        if self.thresholded is None:
            return self.matrix()
        return permutation_matrix(self.thresholded) * self.lam[None, :]

    def params(self):
        return {"P": self.P, "lam": self.lam}

    def grads(self, g_m):
        return {"P": g_m * self.lam[None, :], "lam": np.sum(g_m * self.P, axis=0)}

    def project(self, update_scale=True):
        self.P[...] = sinkhorn_project(self.P, self.sinkhorn_iters)
        np.maximum(self.lam, 0.0, out=self.lam)

    def threshold(self) -> np.ndarray:
        """Fix the nearest permutation for evaluation and return it."""
        self.thresholded = threshold_permutation(self.P)
        return self.thresholded

    def _extra_json(self):
        return {"sinkhorn_iters": self.sinkhorn_iters,
                "thresholded": None if self.thresholded is None else self.thresholded.tolist()}


@dataclass(eq=False)
class SoftSortLayer(StitchLayer):
    s: np.ndarray
    tau: float
    lam: np.ndarray
    variant = "softsort"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")

    def matrix(self):
        return softsort(self.s, self.tau) * np.exp(self.lam)[None, :]

    def eval_matrix(self):
        p = softsort(self.s, self.tau)
        hard = np.zeros_like(p)
        hard[np.arange(len(p)), np.argmax(p, axis=1)] = 1.0
        return hard * np.exp(self.lam)[None, :]

    def params(self):
        return {"s": self.s, "lam": self.lam}

    def grads(self, g_m):
        p, order, diff = _softsort_parts(self.s, self.tau)
        scale = np.exp(self.lam)
        g_p = g_m * scale[None, :]
        g_lam = np.sum(g_m * p, axis=0) * scale
        g_logits = p * (g_p - np.sum(g_p * p, axis=1, keepdims=True))
        sgn = np.sign(diff) / self.tau
        g_s = np.sum(g_logits * sgn, axis=0)
        g_t = -np.sum(g_logits * sgn, axis=1)
        g_s[order] += g_t
        return {"s": g_s, "lam": g_lam}

    def _extra_json(self):
        return {"tau": self.tau}


def stitch_layer_from_json(obj) -> StitchLayer:
    try:
        if obj.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported stitch layer format_version {obj.get('format_version')!r}")
        v = obj["variant"]
        arr = lambda k: np.array(obj[k], dtype=np.float64)
        if v == "full":
            return FullAffine(arr("M"))
        if v == "reduced_rank":
            return ReducedRank(arr("U"), arr("V"))
        if v == "grelu":
            t = obj.get("thresholded")
            return GRelu(arr("P"), arr("lam"), int(obj.get("sinkhorn_iters", 16)),
                         None if t is None else np.array(t, dtype=np.int64))
        if v == "softsort":
            return SoftSortLayer(arr("s"), float(obj["tau"]), arr("lam"))
    except (KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"malformed stitch layer: {exc}") from exc
    raise FormatError(f"unknown stitch variant {v!r}")


def save_stitch_layer(path, layer: StitchLayer) -> None:
    Path(path).write_text(json.dumps(layer.to_json()))


def load_stitch_layer(path) -> StitchLayer:
    try:
        return stitch_layer_from_json(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON") from exc


def init_stitch_layer(variant: str, d: int, rng: np.random.Generator, rank: int | None = None,
                      sinkhorn_iters: int = 16, tau: float | None = None) -> StitchLayer:
    """Starting point for training.

    ``full`` starts at the identity, ``reduced_rank`` at a random rank-r
    factorization, ``grelu`` at the barycenter of the Birkhoff polytope
    plus a small positive perturbation, ``softsort`` at random scores.
    """
    if variant == "full":
        return FullAffine(np.eye(d))
    if variant == "reduced_rank":
        r = rank or max(1, d // 4)
        if not 1 <= r <= d:
            raise ConfigError(f"rank must lie in 1..{d}, got {r}")
        return ReducedRank(rng.standard_normal((d, r)) / math.sqrt(d), rng.standard_normal((r, d)) / math.sqrt(r))
    if variant == "grelu":
        p = np.full((d, d), 1.0 / d) * (1.0 + 0.01 * rng.random((d, d)))
        return GRelu(sinkhorn_project(p, sinkhorn_iters), np.ones(d), sinkhorn_iters)
    if variant == "softsort":
        return SoftSortLayer(rng.standard_normal(d), tau if tau is not None else 1.0 / d, np.zeros(d))
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# --------------------------------------------------------------------------
# stitched networks


class Stitched:
    """``g_{>l} o phi o f_{<=l}`` with its own copy of the tail weights.

    The copy lets batch-norm recalibration change running statistics without
    touching ``g``.
    """

    def __init__(self, f_spec: NetworkSpec, f_w: WeightSet, g_spec: NetworkSpec, g_w: WeightSet, l: int,
                 phi: StitchLayer, allow_in_block: bool = False):
        validate_weights(f_spec, f_w)
        validate_weights(g_spec, g_w)
        if not 1 <= l <= min(f_spec.depth, g_spec.depth) - 1:
            raise ConfigError(f"stitch layer {l} is not a hidden layer of both networks")
        if f_spec.dims[l] != g_spec.dims[l]:
            raise DimensionError(f"width mismatch at layer {l}: {f_spec.dims[l]} vs {g_spec.dims[l]}")
        if (f_spec.in_block(l) or g_spec.in_block(l)) and not allow_in_block:
            raise ConfigError(f"layer {l} lies inside a residual block; pass allow_in_block=True to stitch there")
        if f_spec.in_block(l) != g_spec.in_block(l):
            raise ConfigError(f"layer {l} is inside a residual block in only one of the networks")
        self.f_spec, self.f_w = f_spec, f_w
        self.g_spec, self.g_w = g_spec, g_w.copy()
        self.l = l
        self.phi = phi

    def head(self, x):
        """``f_{<=l}(x)`` as ``(trunk, h)``; ``trunk`` is ``None`` outside blocks."""
        state = forward_upto(self.f_spec, self.f_w, np.atleast_2d(x), self.l)
        return state if isinstance(state, tuple) else (None, state)

    def tail(self, trunk, y, train=False, cache=None):
        out, _ = run_layers(self.g_spec, self.g_w, y, self.l, self.g_spec.depth, trunk=trunk, train=train,
                            cache=cache)
        return out

    def forward(self, x, evaluation: bool = True):
        trunk, h = self.head(x)
        return self.tail(trunk, self.phi(h, evaluation))

    def evaluate(self, data: Dataset, evaluation: bool = True):
        out = self.forward(data.inputs, evaluation)
        return losses.loss(out, data.labels, "cross_entropy"), losses.accuracy(out, data.labels)


def build_stitched(f_spec, f_w, g_spec, g_w, l, phi: StitchLayer, allow_in_block: bool = False) -> Stitched:
    return Stitched(f_spec, f_w, g_spec, g_w, l, phi, allow_in_block)


@dataclass
class StitchConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    sinkhorn_iters: int = 16
    reg_alpha: float = 0.1
    head_start_epochs: int = 10
    lr_drops: int = 0
    lr_drop_factor: float = 0.1
    rank: int | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.head_start_epochs <= self.epochs:
            raise ConfigError("head_start_epochs must lie in 0..epochs")
        if self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn_iters must be at least 1")
        if not 0.0 <= self.momentum < 1.0 or self.lr < 0 or self.reg_alpha < 0:
            raise ConfigError("invalid lr, momentum or reg_alpha")
        if self.lr_drops < 0 or not 0.0 < self.lr_drop_factor <= 1.0:
            raise ConfigError("lr_drops must be >= 0 and lr_drop_factor in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch with evenly spaced drops."""
        drops = sum(1 for i in range(1, self.lr_drops + 1) if epoch >= i * self.epochs / (self.lr_drops + 1))
        return self.lr * self.lr_drop_factor ** drops

    @classmethod
    def from_dict(cls, obj: dict) -> "StitchConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown stitching option(s): {sorted(unknown)}")
        return cls(**obj)


def train_stitch(f, g, l: int, variant: str, data: Dataset, cfg: StitchConfig, rng: np.random.Generator,
                 val: Dataset | None = None, allow_in_block: bool = False, phi: StitchLayer | None = None,
                 callback=None):
    """Fit ``phi`` by SGD with momentum while ``f`` and ``g`` stay frozen.

    ``f`` and ``g`` are ``(spec, weights)`` pairs. For ``grelu`` the loss
    gains ``-reg_alpha * |P|_F`` and each step is followed by the projection
    onto the Birkhoff polytope; ``lam`` is held at 1 for the first
    ``head_start_epochs`` epochs. ``callback(phi)``, if given, runs after
    every projected step. Returns ``(layer, history)``; history rows hold
    ``epoch``, ``train_loss`` and ``val_acc`` (relaxed map).
    """
    f_spec, f_w = f
    g_spec, g_w = g
    d = f_spec.dims[l]
    if phi is None:
        phi = init_stitch_layer(variant, d, rng, cfg.rank, cfg.sinkhorn_iters, cfg.tau)
    st = Stitched(f_spec, f_w, g_spec, g_w, l, phi, allow_in_block)
    trunk_all, h_all = st.head(data.inputs)
    val = data if val is None else val
    params = phi.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(data)
    history = []
    for epoch in range(cfg.epochs):
        frozen_scale = epoch < cfg.head_start_epochs
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            h = h_all[idx]
            trunk = None if trunk_all is None else trunk_all[idx]
            m = phi.matrix()
            cache = ForwardCache(start=l)
            out = st.tail(trunk, h @ m.T, cache=cache)
            loss, dout = losses.loss_and_grad(out, data.labels[idx], "cross_entropy")
            if not math.isfinite(loss):
                raise DivergenceError(f"stitch training diverged in epoch {epoch + 1}", history)
            _, g_y, _ = backward(st.g_spec, st.g_w, cache, dout)
            grads = phi.grads(g_y.T @ h)
            if isinstance(phi, GRelu) and cfg.reg_alpha:
                norm = np.linalg.norm(phi.P)
                if norm > 0:
                    grads["P"] = grads["P"] - cfg.reg_alpha * phi.P / norm
                loss -= cfg.reg_alpha * norm
            if frozen_scale and "lam" in grads:
                grads.pop("lam")
            for k, gk in grads.items():
                velocity[k] = cfg.momentum * velocity[k] + gk
                params[k] -= lr * velocity[k]
            phi.project()
            if callback is not None:
                callback(phi)
            total += loss * len(idx)
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise DivergenceError(f"stitch parameters became non-finite in epoch {epoch + 1}", history)
        _, acc = st.evaluate(val, evaluation=False)
        history.append({"epoch": epoch + 1, "train_loss": total / n, "val_acc": acc})
    if isinstance(phi, GRelu):
        phi.threshold()
    return phi, history


def bn_recalibrate(stitched: Stitched, train_data: Dataset, batch_size: int = 32) -> bool:
    """Recompute the tail's batch-norm running statistics with the evaluation map.

    One pass over ``train_data`` in order, in training mode, averaging batch
    means and unbiased batch variances. Weights are not changed. Returns
    ``False`` when the tail has no batch norm.
    """
    spec = stitched.g_spec
    layers = [j for j in range(stitched.l + 1, spec.depth) if spec.has_bn(j)]
    if not layers:
        return False
    sums = {j: [np.zeros(spec.dims[j]), np.zeros(spec.dims[j])] for j in layers}
    count = 0
    n = len(train_data)
    for start in range(0, n, batch_size):
        x = train_data.inputs[start:start + batch_size]
        if len(x) < 2:
            continue
        trunk, h = stitched.head(x)
        cache = ForwardCache(start=stitched.l)
        stitched.tail(trunk, stitched.phi(h, evaluation=True), train=set(layers), cache=cache)
        for j in layers:
            lc = cache.caches[j]
            sums[j][0] += lc.batch_mean
            sums[j][1] += lc.batch_var * len(x) / (len(x) - 1)
        count += 1
    if count == 0:
        raise ConfigError("need at least one batch of two or more examples to recalibrate")
    for j in layers:
        bn = stitched.g_w[j].bn
        bn.mean = sums[j][0] / count
        bn.var = sums[j][1] / count
    return True


def accuracy_points(acc: float) -> float:
    return 100.0 * acc


def stitching_penalty(f, g, stitched: Stitched, val_data: Dataset) -> float:
    """``mean(acc f, acc g) - acc S`` in accuracy points."""
    from .trainer import evaluate
    _, acc_f = evaluate(f[0], f[1], val_data)
    _, acc_g = evaluate(g[0], g[1], val_data)
    _, acc_s = stitched.evaluate(val_data)
    return 100.0 * (0.5 * (acc_f + acc_g) - acc_s)


@dataclass
class StitchResult:
    layer: int
    variant: str
    seed: int
    penalty: float
    acc_f: float
    acc_g: float
    acc_stitched: float
    phi: StitchLayer = field(repr=False, default=None)

    def row(self) -> dict:
        return {"layer": self.layer, "variant": self.variant, "seed": self.seed, "penalty": self.penalty,
                "acc_f": self.acc_f, "acc_g": self.acc_g, "acc_stitched": self.acc_stitched}


def stitch_pipeline(f, g, l: int, variant: str, train_data: Dataset, val_data: Dataset, cfg: StitchConfig,
                    seed: int, allow_in_block: bool = False) -> StitchResult:
    """Train, threshold, recalibrate batch norm and score one stitching cell."""
    from . import numerics
    from .trainer import evaluate
    rng = numerics.make_rng(seed)
    phi, _ = train_stitch(f, g, l, variant, train_data, cfg, rng, val_data, allow_in_block)
    st = Stitched(f[0], f[1], g[0], g[1], l, phi, allow_in_block)
    bn_recalibrate(st, train_data, cfg.batch_size)
    _, acc_f = evaluate(f[0], f[1], val_data)
    _, acc_g = evaluate(g[0], g[1], val_data)
    _, acc_s = st.evaluate(val_data)
    return StitchResult(l, variant, seed, 100.0 * (0.5 * (acc_f + acc_g) - acc_s), acc_f, acc_g, acc_s, phi)
