"""Feedforward networks, truncated evaluation and the group action on weights.

A network with ``dims = [n_0, ..., n_k]`` computes, for ``l = 1..k``::

    z_l = W_l h_{l-1} + b_l
    u_l = batchnorm_l(z_l)              (if enabled; b_l is then omitted)
    h_l = sigma_l(u_l)                  (l < k)
    h_l = h_{r} + sigma_l(u_l)          (l a residual layer with predecessor r)

and outputs ``u_k``. Residual layers ``R = {r_1 < ... < r_m}`` are evenly
spaced by the block depth; the skip into ``r_{i+1}`` carries ``h_{r_i}``.

Inputs are row-major batches of shape ``(N, n_0)``; a single vector is also
accepted.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .errors import ConfigError, DimensionError, FormatError, GroupMembershipError, NumericalError
from .intertwiner import Activation, Element, GeneralElement, MonomialElement, invert, phi

FORMAT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetworkSpec:
    dims: tuple
    activations: tuple
    batchnorm: tuple = None
    residual: tuple = ()
    block_depth: int | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        k = len(dims) - 1
        if k < 1 or any(d < 1 for d in dims):
            raise ConfigError(f"dims must list at least two positive widths, got {list(self.dims)}")
        acts = self.activations
        if isinstance(acts, (str, Activation)):
            acts = [acts] * (k - 1)
        acts = tuple(Activation.parse(a) for a in acts)
        if len(acts) != k - 1:
            raise ConfigError(f"activation: need one per hidden layer ({k - 1}), got {len(acts)}")
        bn = self.batchnorm
        if bn is None or isinstance(bn, bool):
            bn = [bool(bn)] * (k - 1)
        elif not isinstance(bn, (list, tuple)) or not all(isinstance(b, (bool, np.bool_)) for b in bn):
            raise ConfigError(f"batchnorm: expected a boolean or a list of booleans, got {bn!r}")
        bn = tuple(bool(b) for b in bn)
        if len(bn) != k - 1:
            raise ConfigError(f"batchnorm: need one flag per hidden layer ({k - 1}), got {len(bn)}")
        res = tuple(sorted(int(r) for r in (self.residual or ())))
        depth = self.block_depth
        if res:
            if len(res) < 2:
                raise ConfigError("residual: need at least two residual layers to form a block")
            if depth is None:
                depth = res[1] - res[0]
            depth = int(depth)
            if depth < 1 or any(b - a != depth for a, b in zip(res, res[1:])):
                raise ConfigError(f"residual: layers {list(res)} are not evenly spaced by block_depth {depth}")
            if res[0] < 2 or res[-1] > k - 1:
                raise ConfigError(f"residual: layers must lie in 2..{k - 1}, got {list(res)}")
            if len({dims[r] for r in res}) != 1:
                raise ConfigError(f"residual: layers {list(res)} must share one width")
        else:
            depth = None
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "batchnorm", bn)
        object.__setattr__(self, "residual", res)
        object.__setattr__(self, "block_depth", depth)

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    def activation(self, l: int) -> Activation:
        return self.activations[l - 1]

    def has_bn(self, l: int) -> bool:
        return l < self.depth and self.batchnorm[l - 1]

    def skip_source(self, l: int) -> int | None:
        """Residual layer whose output is added into layer ``l``, if any."""
        if l in self.residual and l != self.residual[0]:
            return l - self.block_depth
        return None

    def in_block(self, m: int) -> bool:
        """True when ``m`` lies strictly between two residual layers."""
        r = self.residual
        return bool(r) and r[0] < m < r[-1] and m not in r

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "activation": [str(a) for a in self.activations],
            "batchnorm": list(self.batchnorm),
            "residual": {"layers": list(self.residual), "block_depth": self.block_depth} if self.residual else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkSpec":
        if not isinstance(obj, dict):
            raise ConfigError("spec must be a JSON object")
        for key in ("dims", "activation"):
            if key not in obj:
                raise ConfigError(f"spec is missing field {key!r}")
        res = obj.get("residual") or {}
        if not isinstance(res, dict):
            raise ConfigError("spec field 'residual' must be an object or null")
        try:
            return cls(obj["dims"], obj["activation"], obj.get("batchnorm"),
                       tuple(res.get("layers", ())), res.get("block_depth"))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"spec: {exc}") from exc


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = BN_EPS

    def copy(self) -> "BatchNorm":
        return BatchNorm(self.gamma.copy(), self.beta.copy(), self.mean.copy(), self.var.copy(), self.eps)


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray | None
    bn: BatchNorm | None = None

    def copy(self) -> "Layer":
        return Layer(self.W.copy(), None if self.b is None else self.b.copy(),
                     None if self.bn is None else self.bn.copy())


@dataclass
class WeightSet:
    layers: list

    def copy(self) -> "WeightSet":
        return WeightSet([layer.copy() for layer in self.layers])

    def __getitem__(self, l: int) -> Layer:
        """1-based layer access."""
        return self.layers[l - 1]

    def __len__(self):
        return len(self.layers)

    def arrays(self):
        """Yield ``(layer, name, array)`` for every stored tensor."""
        for l, layer in enumerate(self.layers, start=1):
            yield l, "W", layer.W
            if layer.b is not None:
                yield l, "b", layer.b
            if layer.bn is not None:
                for name in ("gamma", "beta", "mean", "var"):
                    yield l, name, getattr(layer.bn, name)

    def equals(self, other: "WeightSet") -> bool:
        a, b = list(self.arrays()), list(other.arrays())
        return len(a) == len(b) and all(
            x[:2] == y[:2] and x[2].shape == y[2].shape and np.array_equal(x[2], y[2]) for x, y in zip(a, b))


def validate_weights(spec: NetworkSpec, w: WeightSet) -> None:
    if len(w) != spec.depth:
        raise DimensionError(f"weights have {len(w)} layers, spec has {spec.depth}")
    for l in range(1, spec.depth + 1):
        layer = w[l]
        shape = (spec.dims[l], spec.dims[l - 1])
        if layer.W.shape != shape:
            raise DimensionError(f"layer {l}: W has shape {layer.W.shape}, expected {shape}")
        n = spec.dims[l]
        if spec.has_bn(l):
            if layer.bn is None:
                raise DimensionError(f"layer {l}: spec enables batch norm but no parameters are stored")
            for name in ("gamma", "beta", "mean", "var"):
                if getattr(layer.bn, name).shape != (n,):
                    raise DimensionError(f"layer {l}: batch-norm {name} must have length {n}")
            if np.any(layer.bn.var <= 0):
                raise ConfigError(f"layer {l}: batch-norm running variances must be positive")
        elif layer.bn is not None:
            raise DimensionError(f"layer {l}: batch-norm parameters stored but the spec disables batch norm")
        if layer.b is None:
            if not spec.has_bn(l):
                raise DimensionError(f"layer {l}: bias missing")
        elif layer.b.shape != (n,):
            raise DimensionError(f"layer {l}: b has shape {layer.b.shape}, expected ({n},)")


def init_weights(spec: NetworkSpec, rng: np.random.Generator, bias_scale: float = 0.0,
                 randomize_bn: bool = False, gain: float | None = None) -> WeightSet:
    """Gaussian weights with std ``gain / sqrt(fan_in)``; biases with std ``bias_scale``.

    The default gain is sqrt(2) (He) for ReLU-like layers and 1 otherwise.
    Deep polynomial networks need a smaller gain to stay in range.

    Layers feeding a batch norm get no bias. ``randomize_bn`` draws
    non-trivial gains, shifts and running statistics, which is useful for
    testing inference-mode invariances.
    """
    layers = []
    for l in range(1, spec.depth + 1):
        fan_in, n = spec.dims[l - 1], spec.dims[l]
        g = gain
        if g is None:
            # scale for the activation this layer feeds (the last layer feeds none)
            kind = spec.activation(l).kind if l < spec.depth else "identity"
            g = math.sqrt(2.0) if kind in ("relu", "leaky_relu") else 1.0
        W = rng.standard_normal((n, fan_in)) * (g / math.sqrt(fan_in))
        if spec.has_bn(l):
            if randomize_bn:
                bn = BatchNorm(1.0 + 0.3 * rng.standard_normal(n), 0.3 * rng.standard_normal(n),
                               0.3 * rng.standard_normal(n), np.exp(0.3 * rng.standard_normal(n)))
            else:
                bn = BatchNorm(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n))
            layers.append(Layer(W, None, bn))
        else:
            b = bias_scale * rng.standard_normal(n) if bias_scale else np.zeros(n)
            layers.append(Layer(W, b))
    return WeightSet(layers)


# --------------------------------------------------------------------------
# evaluation


def _as_batch(x, width: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"expected inputs of width {width}, got shape {x.shape}")
    return x, single


@dataclass
class LayerCache:
    h_in: np.ndarray
    z: np.ndarray
    u: np.ndarray
    zhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None


@dataclass
class ForwardCache:
    start: int
    caches: dict = field(default_factory=dict)


def _check_finite(arr, l):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced at layer {l}")


def _train_mode(train, l: int) -> bool:
    return train if isinstance(train, bool) else l in train


def run_layers(spec: NetworkSpec, w: WeightSet, h, start: int, stop: int, trunk=None,
               train: bool = False, cache: ForwardCache | None = None):
    """Evaluate layers ``start+1 .. stop`` on a batch.

    ``h`` is the state after layer ``start`` and ``trunk`` the latest residual
    value when ``start`` lies inside a block. Returns ``(h, trunk)`` after
    layer ``stop``. With ``train=True`` batch norm uses batch statistics;
    ``train`` may also be a set of layer indices to put in that mode.
    """
    if start in spec.residual and trunk is None:
        trunk = h
    for l in range(start + 1, stop + 1):
        layer = w[l]
        z = h @ layer.W.T
        if layer.b is not None:
            z = z + layer.b
        lc = LayerCache(h_in=h, z=z, u=z) if cache is not None else None
        if spec.has_bn(l):
            bn = layer.bn
            if _train_mode(train, l):
                mu, var = z.mean(axis=0), z.var(axis=0)
            else:
                mu, var = bn.mean, bn.var
            inv_std = 1.0 / np.sqrt(var + bn.eps)
            zhat = (z - mu) * inv_std
            u = bn.gamma * zhat + bn.beta
            if lc is not None:
                lc.zhat, lc.inv_std, lc.batch_mean, lc.batch_var = zhat, inv_std, mu, var
        else:
            u = z
        if lc is not None:
            lc.u = u
            cache.caches[l] = lc
        if l == spec.depth:
            _check_finite(u, l)
            return u, None
        a = spec.activation(l)(u)
        src = spec.skip_source(l)
        if src is not None:
            if trunk is None:
                raise ConfigError(f"layer {l} needs the residual trunk value from layer {src}")
            a = trunk + a
        _check_finite(a, l)
        if l in spec.residual:
            trunk = a
        h = a
    return h, (trunk if spec.in_block(stop) or stop in spec.residual else None)


def forward(spec: NetworkSpec, w: WeightSet, x) -> np.ndarray:
    """Network output for one input vector or a batch of row vectors."""
    x, single = _as_batch(x, spec.dims[0])
    out, _ = run_layers(spec, w, x, 0, spec.depth)
    return out[0] if single else out


def _check_split(spec: NetworkSpec, m: int):
    if not 1 <= m <= spec.depth - 1:
        raise ConfigError(f"split layer must lie in 1..{spec.depth - 1}, got {m}")


def forward_upto(spec: NetworkSpec, w: WeightSet, x, m: int):
    """Hidden state after layer ``m``.

    Inside a residual block the state is the pair ``(trunk, h_m)`` because the
    pending skip connection is needed to finish the block.
    """
    _check_split(spec, m)
    x, single = _as_batch(x, spec.dims[0])
    h, trunk = run_layers(spec, w, x, 0, m)
    if single:
        h = h[0]
        trunk = None if trunk is None else trunk[0]
    return (trunk, h) if spec.in_block(m) else h


def forward_from(spec: NetworkSpec, w: WeightSet, state, m: int) -> np.ndarray:
    """Finish the forward pass from the state returned by :func:`forward_upto`."""
    _check_split(spec, m)
    if spec.in_block(m):
        if not isinstance(state, tuple) or len(state) != 2:
            raise ConfigError(f"layer {m} lies inside a residual block; pass the (trunk, hidden) pair")
        trunk, h = state
        h, single = _as_batch(h, spec.dims[m])
        trunk, _ = _as_batch(trunk, spec.dims[spec.residual[0]])
    else:
        h, single = _as_batch(state, spec.dims[m])
        trunk = None
    out, _ = run_layers(spec, w, h, m, spec.depth, trunk=trunk)
    return out[0] if single else out


def backward(spec: NetworkSpec, w: WeightSet, cache: ForwardCache, dout, train: bool = False):
    """Reverse pass over the layers recorded in ``cache``.

    Returns ``(grads, d_h, d_trunk)``: ``grads[l]`` maps parameter names to
    gradients, ``d_h`` and ``d_trunk`` are the gradients with respect to the
    starting state.
    """
    grads = {}
    g_h = None
    g_trunk = None
    for l in range(spec.depth, cache.start, -1):
        lc = cache.caches[l]
        layer = w[l]
        if l == spec.depth:
            g_u = dout
        else:
            total = g_h if g_trunk is None or l not in spec.residual else g_h + g_trunk
            g_a = total
            if l in spec.residual:
                g_trunk = total if spec.skip_source(l) is not None else None
            g_u = g_a * spec.activation(l).derivative(lc.u)
        g = {}
        if spec.has_bn(l):
            bn = layer.bn
            g["gamma"] = np.sum(g_u * lc.zhat, axis=0)
            g["beta"] = np.sum(g_u, axis=0)
            g_zhat = g_u * bn.gamma
            if _train_mode(train, l):
                n = g_zhat.shape[0]
                g_z = lc.inv_std / n * (n * g_zhat - g_zhat.sum(axis=0)
                                        - lc.zhat * np.sum(g_zhat * lc.zhat, axis=0))
            else:
                g_z = g_zhat * lc.inv_std
        else:
            g_z = g_u
        g["W"] = g_z.T @ lc.h_in
        if layer.b is not None:
            g["b"] = g_z.sum(axis=0)
        grads[l] = g
        g_h = g_z @ layer.W
    start = cache.start
    if start in spec.residual and g_trunk is not None:
        g_h = g_h + g_trunk
        g_trunk = None
    return grads, g_h, g_trunk


# --------------------------------------------------------------------------
# group action


@dataclass
class GroupAssignment:
    """One group element per hidden layer, plus optional batch-norm scales.

    ``elements[l-1]`` acts on layer ``l``. ``scales[l-1]`` is the positive
    vector ``c_l`` of a batch-norm layer (``None`` means all ones).
    """

    elements: list
    scales: list = None

    def __post_init__(self):
        if self.scales is None:
            self.scales = [None] * len(self.elements)

    @classmethod
    def identity(cls, spec: NetworkSpec) -> "GroupAssignment":
        return cls([MonomialElement.identity(spec.activation(l), spec.dims[l]) for l in range(1, spec.depth)])

    def to_json(self) -> dict:
        return {"elements": [e.to_json() for e in self.elements],
                "scales": [None if c is None else [float(v) for v in c] for c in self.scales]}

    @classmethod
    def from_json(cls, obj) -> "GroupAssignment":
        from .intertwiner import element_from_json
        try:
            elements = [element_from_json(e) for e in obj["elements"]]
            scales = obj.get("scales") or [None] * len(elements)
            return cls(elements, [None if c is None else np.asarray(c, dtype=np.float64) for c in scales])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed assignment: {exc}") from exc


def random_assignment(spec: NetworkSpec, rng: np.random.Generator, permutations_only: bool = False,
                      sigma: float = 0.5) -> GroupAssignment:
    from .intertwiner import random_element, random_permutation_element
    elements, scales = [], []
    for l in range(1, spec.depth):
        kind, n = spec.activation(l), spec.dims[l]
        if permutations_only:
            e = random_permutation_element(kind, n, rng)
        else:
            e = random_element(kind, n, rng, sigma)
            if spec.has_bn(l) and isinstance(e, GeneralElement):
                # batch norm only commutes with monomial maps
                e = MonomialElement(kind, rng.permutation(n), rng.choice([-1.0, 1.0], n) * np.exp(sigma * rng.standard_normal(n)))
        elements.append(e)
        if spec.has_bn(l) and not permutations_only and kind.kind in ("relu", "leaky_relu", "polynomial", "identity"):
            c = np.exp(sigma * rng.standard_normal(n))
            scales.append(c / c.mean())
        else:
            scales.append(None)
    if spec.residual:
        # the action is only a symmetry when residual layers share one element
        r0 = spec.residual[0]
        for r in spec.residual[1:]:
            elements[r - 1] = elements[r0 - 1]
            scales[r - 1] = scales[r0 - 1]
    return GroupAssignment(elements, scales)


def output_element(spec: NetworkSpec, ga: GroupAssignment, l: int) -> Element:
    """Element by which the pre-activation ``u_l`` is transformed.

    Without batch norm this is ``A_l``. After a batch norm the diagonal of
    ``A_l`` is normalized away and replaced by ``c_l``.
    """
    a = ga.elements[l - 1]
    if not spec.has_bn(l):
        return a
    if isinstance(a, GeneralElement):
        raise GroupMembershipError(f"layer {l}: batch norm requires a monomial element")
    c = ga.scales[l - 1]
    c = np.ones(a.n) if c is None else np.asarray(c, dtype=np.float64)
    return MonomialElement(a.kind, a.perm, c)


def transport(spec: NetworkSpec, ga: GroupAssignment, l: int) -> Element:
    """The map carrying ``h_l(x, W)`` to ``h_l(x, W')``."""
    return phi(output_element(spec, ga, l))


def _elements_equal(a: Element, b: Element) -> bool:
    return type(a) is type(b) and a == b


def _check_assignment(spec: NetworkSpec, ga: GroupAssignment, force: bool):
    if len(ga.elements) != spec.depth - 1 or len(ga.scales) != spec.depth - 1:
        raise DimensionError(f"assignment needs {spec.depth - 1} elements, got {len(ga.elements)}")
    for l in range(1, spec.depth):
        e = ga.elements[l - 1]
        if e.kind != spec.activation(l):
            raise GroupMembershipError(f"layer {l}: element is for {e.kind}, layer uses {spec.activation(l)}")
        if e.n != spec.dims[l]:
            raise DimensionError(f"layer {l}: element has dimension {e.n}, layer width is {spec.dims[l]}")
        c = ga.scales[l - 1]
        if c is not None:
            c = np.asarray(c, dtype=np.float64)
            if not spec.has_bn(l):
                raise ConfigError(f"layer {l}: scale vector given for a layer without batch norm")
            if c.shape != (spec.dims[l],) or np.any(c <= 0):
                raise GroupMembershipError(f"layer {l}: batch-norm scales must be {spec.dims[l]} positive numbers")
            e.kind.check_diag(c)
    if spec.residual and not force:
        ref = output_element(spec, ga, spec.residual[0])
        for r in spec.residual[1:]:
            if not _elements_equal(output_element(spec, ga, r), ref):
                raise GroupMembershipError(
                    f"residual layers {list(spec.residual)} must carry equal group elements "
                    f"(layer {r} differs from layer {spec.residual[0]})")


def act_on_weights(spec: NetworkSpec, w: WeightSet, ga: GroupAssignment, force: bool = False) -> WeightSet:
    """Transformed weights ``W'`` realizing the same function as ``W``.

    ``W'_l = A_l W_l T_{l-1}^{-1}`` and ``b'_l = A_l b_l``, where ``T_l`` is
    the post-activation transport of layer ``l`` (``phi(A_l)`` without batch
    norm). Batch-norm layers get ``gamma, beta`` mapped by ``P diag(c)`` and
    running statistics mapped consistently with ``A_l`` so inference-mode
    outputs are preserved.

    ``force=True`` skips the equal-residual-elements check, which is only
    useful for demonstrating how the symmetry breaks.
    """
    validate_weights(spec, w)
    _check_assignment(spec, ga, force)
    out = []
    prev_inv = None
    for l in range(1, spec.depth + 1):
        layer = w[l]
        W = layer.W if prev_inv is None else layer.W @ prev_inv
        if l == spec.depth:
            out.append(Layer(W, layer.b.copy()))
            break
        a = ga.elements[l - 1]
        am = a.to_matrix()
        W = am @ W
        b = None if layer.b is None else am @ layer.b
        bn = None
        if spec.has_bn(l):
            src = layer.bn
            c = output_element(spec, ga, l).diag
            p, d = a.perm, a.diag
            gamma, beta = np.empty_like(src.gamma), np.empty_like(src.beta)
            mean, var = np.empty_like(src.mean), np.empty_like(src.var)
            gamma[p] = c * np.sign(d) * src.gamma
            beta[p] = c * src.beta
            mean[p] = d * src.mean
            # keeps var + eps scaling with d**2 so the normalization cancels A_l exactly
            var[p] = np.where(d * d == 1.0, src.var, d * d * (src.var + src.eps) - src.eps)
            if np.any(var <= 0):
                raise NumericalError(f"layer {l}: scaled running variance is not positive")
            bn = BatchNorm(gamma, beta, mean, var, src.eps)
        out.append(Layer(W, b, bn))
        prev_inv = invert(transport(spec, ga, l)).to_matrix()
    return WeightSet(out)


# --------------------------------------------------------------------------
# verification


def verify_function_equal(spec: NetworkSpec, w: WeightSet, w2: WeightSet, n_samples: int,
                          rng: np.random.Generator) -> float:
    """Max over standard-normal inputs of ``|f(x, w) - f(x, w2)|_inf``."""
    x = rng.standard_normal((n_samples, spec.dims[0]))
    return float(np.max(np.abs(forward(spec, w, x) - forward(spec, w2, x))))


def verify_hidden_transport(spec: NetworkSpec, w: WeightSet, ga: GroupAssignment, m: int, n_samples: int,
                            rng: np.random.Generator, force: bool = False) -> float:
    """Residual of both truncation identities at layer ``m``.

    Checks ``f_{<=m}(x, W') = T_m f_{<=m}(x, W)`` and
    ``f_{>m}(T_m h, W') = f_{>m}(h, W)``; returns the larger max deviation.
    """
    _check_split(spec, m)
    if spec.in_block(m):
        raise ConfigError(f"layer {m} lies strictly inside a residual block")
    w2 = act_on_weights(spec, w, ga, force=force)
    t = transport(spec, ga, m)
    x = rng.standard_normal((n_samples, spec.dims[0]))
    h = forward_upto(spec, w, x, m)
    th = t.apply(h)
    head = np.max(np.abs(forward_upto(spec, w2, x, m) - th))
    tail = np.max(np.abs(forward_from(spec, w2, th, m) - forward_from(spec, w, h, m)))
    return float(max(head, tail))


@dataclass
class ResidualReport:
    unequal_deviation: float
    equal_deviation: float

    def to_json(self) -> dict:
        return {"unequal_deviation": self.unequal_deviation, "equal_deviation": self.equal_deviation}


def equalize_residual(spec: NetworkSpec, ga: GroupAssignment) -> GroupAssignment:
    """Copy the first residual layer's element onto every residual layer."""
    elements, scales = list(ga.elements), list(ga.scales)
    r0 = spec.residual[0]
    for r in spec.residual[1:]:
        elements[r - 1] = elements[r0 - 1]
        scales[r - 1] = scales[r0 - 1]
    return GroupAssignment(elements, scales)


def residual_failure_demo(spec: NetworkSpec, w: WeightSet, ga_unequal: GroupAssignment, n_samples: int,
                          rng: np.random.Generator) -> ResidualReport:
    """Deviation of ``f`` under an unequal residual assignment and its equalized twin."""
    if not spec.residual:
        raise ConfigError("spec has no residual connections")
    x = rng.standard_normal((n_samples, spec.dims[0]))
    base = forward(spec, w, x)
    bad = forward(spec, act_on_weights(spec, w, ga_unequal, force=True), x)
    good = forward(spec, act_on_weights(spec, w, equalize_residual(spec, ga_unequal)), x)
    return ResidualReport(float(np.max(np.abs(bad - base))), float(np.max(np.abs(good - base))))


def loss_invariance_check(spec: NetworkSpec, w: WeightSet, ga: GroupAssignment, dataset,
                          loss_kind: str = "cross_entropy") -> tuple:
    """``(loss(W), loss(W'))`` on the same data."""
    w2 = act_on_weights(spec, w, ga)
    x, y = dataset.inputs, dataset.labels
    return (losses.loss(forward(spec, w, x), y, loss_kind), losses.loss(forward(spec, w2, x), y, loss_kind))


# --------------------------------------------------------------------------
# persistence


def weights_to_json(spec: NetworkSpec, w: WeightSet) -> dict:
    validate_weights(spec, w)
    layers = []
    for layer in w.layers:
        entry = {"W": layer.W.tolist(), "b": None if layer.b is None else layer.b.tolist(), "bn": None}
        if layer.bn is not None:
            entry["bn"] = {"gamma": layer.bn.gamma.tolist(), "beta": layer.bn.beta.tolist(),
                           "mean": layer.bn.mean.tolist(), "var": layer.bn.var.tolist(), "eps": layer.bn.eps}
        layers.append(entry)
    return {"format_version": FORMAT_VERSION, "spec": spec.to_json(), "layers": layers}


def _array(obj, what, ndim):
    try:
        arr = np.array(obj, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{what}: not a numeric array") from exc
    if arr.ndim != ndim:
        raise FormatError(f"{what}: expected {ndim}-D array, got {arr.ndim}-D")
    return arr


def weights_from_json(obj) -> tuple:
    if not isinstance(obj, dict):
        raise FormatError("weight file must contain a JSON object")
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r}; expected {FORMAT_VERSION}")
    if "spec" not in obj or "layers" not in obj:
        raise FormatError("weight file needs 'spec' and 'layers'")
    spec = NetworkSpec.from_json(obj["spec"])
    layers = []
    for i, entry in enumerate(obj["layers"], start=1):
        try:
            W = _array(entry["W"], f"layer {i} W", 2)
            b = None if entry.get("b") is None else _array(entry["b"], f"layer {i} b", 1)
            bn = None
            if entry.get("bn") is not None:
                e = entry["bn"]
                bn = BatchNorm(*(_array(e[k], f"layer {i} bn {k}", 1) for k in ("gamma", "beta", "mean", "var")),
                               float(e.get("eps", BN_EPS)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"layer {i}: missing or malformed field {exc}") from exc
        layers.append(Layer(W, b, bn))
    w = WeightSet(layers)
    try:
        validate_weights(spec, w)
    except ConfigError as exc:
        raise FormatError(f"shape inconsistency: {exc}") from exc
    return spec, w


def save_weights(path, spec: NetworkSpec, w: WeightSet) -> None:
    Path(path).write_text(json.dumps(weights_to_json(spec, w)))


def load_weights(path) -> tuple:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc.msg} at char {exc.pos})") from exc
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    return weights_from_json(obj)
