"""Representation similarity up to ReLU symmetries.

Features are ``(N, d)`` matrices (rows are examples) or ``(N, C, H, W)``
tensors; for tensors only the channel axis is permuted or scaled, never
spatial positions.

* G_ReLU-Procrustes: normalize columns, then find the best column
  permutation by linear sum assignment.
* orthogonal Procrustes: the same with the nuclear norm in place of the
  assignment.
* G_ReLU-CKA: unbiased HSIC on the coordinatewise max kernel
  ``K_ij = max(x_i * x_j)``.
* linear CKA: unbiased HSIC on the linear kernel.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from . import numerics
from .errors import DimensionError, FormatError, NumericalError

METRICS = ("grelu-procrustes", "orth-procrustes", "grelu-cka", "linear-cka")
ZERO_COLUMN_TOL = 1e-12
FEATURE_MAGIC = b"ITWF1"


def _features(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 4):
        raise DimensionError(f"features must be (N, d) or (N, C, H, W), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("features contain non-finite values")
    return x


def _channel_axes(x):
    # every axis except the channel axis
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _channel_shape(x):
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def column_normalize(x) -> np.ndarray:
    """Scale every column (channel) to unit Euclidean norm.

    Raises:
        NumericalError: naming the first column whose norm is below 1e-12.
    """
    x = _features(x)
    norms = np.sqrt(np.sum(x * x, axis=_channel_axes(x)))
    bad = np.flatnonzero(norms <= ZERO_COLUMN_TOL)
    if bad.size:
        raise NumericalError(f"column {int(bad[0])} has zero norm and cannot be normalized")
    return x / norms.reshape(_channel_shape(x))


def center_columns(x) -> np.ndarray:
    """Subtract the mean over every axis but the channel axis."""
    x = _features(x)
    return x - x.mean(axis=_channel_axes(x), keepdims=True)


def linear_sum_assignment(cost):
    """Permutation maximizing ``sum_i cost[i, perm[i]]``.

    Shortest-augmenting-path Hungarian method in O(d^3), run on ``-cost``.
    Rows are inserted in index order and ties resolve to the lowest column
    index, so a constant cost yields the identity.

    Returns:
        ``(perm, objective)``.
    """
    c = numerics.as_matrix(cost)
    n = c.shape[0]
    if c.shape != (n, n):
        raise DimensionError(f"assignment needs a square cost matrix, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise NumericalError("cost matrix contains non-finite entries")
    a = -c
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)      # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cols = np.flatnonzero(free) + 1
            cur = a[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = int(cols[np.argmin(minv[cols])])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    perm[p[1:] - 1] = np.arange(n)
    return perm, float(np.sum(c[np.arange(n), perm]))


def _gram(x, y) -> np.ndarray:
    return x.T @ y if x.ndim == 2 else channel_gram(x, y)


def _check_pair(x, y):
    x, y = _features(x), _features(y)
    if x.shape != y.shape:
        raise DimensionError(f"feature shapes differ: {x.shape} vs {y.shape}")
    return x, y


def channel_gram(x, y) -> np.ndarray:
    """``G[c, c'] = sum_{n,h,w} x[n,c,h,w] y[n,c',h,w]``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.ndim != 4 or y.ndim != 4 or x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise DimensionError(f"need (N, C, H, W) tensors agreeing in N, H, W; got {x.shape} and {y.shape}")
    return np.einsum("nchw,ndhw->cd", x, y)


def _procrustes_similarity(delta_sq: float, d: int) -> float:
    return 1.0 - math.sqrt(max(delta_sq, 0.0)) / (2.0 * math.sqrt(d))


def g_relu_procrustes(x, y) -> float:
    """``1 - delta / (2 sqrt d)``, ``delta`` the best column-permutation distance.

    No centering is applied.
    """
    x, y = _check_pair(x, y)
    xt, yt = column_normalize(x), column_normalize(y)
    d = x.shape[1]
    perm, _ = linear_sum_assignment(_gram(xt, yt))
    # summing squared differences of matched columns avoids the cancellation in
    # 2d - 2 tr(...), which sqrt would amplify to ~1e-8 for aligned inputs
    delta_sq = float(np.sum((xt - yt[:, perm]) ** 2))
    return _procrustes_similarity(delta_sq, d)


def orthogonal_procrustes(x, y) -> float:
    """Procrustes similarity with the best orthogonal map on channels."""
    x, y = _check_pair(x, y)
    xt, yt = column_normalize(x), column_normalize(y)
    d = x.shape[1]
    return _procrustes_similarity(2.0 * d - 2.0 * numerics.nuclear_norm(_gram(xt, yt)), d)


def max_kernel(x) -> np.ndarray:
    """``K[i, j] = max_c x[i, c] x[j, c]``."""
    x = numerics.as_matrix(x)
    k = np.full((x.shape[0], x.shape[0]), -np.inf)
    for c in range(x.shape[1]):
        col = x[:, c]
        np.maximum(k, np.outer(col, col), out=k)
    return k


def channel_max_kernel(x) -> np.ndarray:
    """``K[m, n] = max_c sum_{h,w} x[m,c,h,w] x[n,c,h,w]`` for a prepared tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"expected an (N, C, H, W) tensor, got shape {x.shape}")
    n = x.shape[0]
    k = np.full((n, n), -np.inf)
    for c in range(x.shape[1]):
        flat = x[:, c].reshape(n, -1)
        np.maximum(k, flat @ flat.T, out=k)
    return k


def hsic1(k, l) -> float:
    """Unbiased HSIC estimator of two N x N kernel matrices (N >= 4)."""
    k, l = numerics.as_matrix(k), numerics.as_matrix(l)
    n = k.shape[0]
    if k.shape != (n, n) or l.shape != (n, n):
        raise DimensionError(f"kernels must be square and equal-sized, got {k.shape} and {l.shape}")
    if n < 4:
        raise DimensionError(f"unbiased HSIC needs at least 4 examples, got {n}")
    kt = k - np.diag(np.diag(k))
    lt = l - np.diag(np.diag(l))
    ones_k, ones_l = kt.sum(axis=0), lt.sum(axis=0)
    term = (np.sum(kt * lt)
            + kt.sum() * lt.sum() / ((n - 1) * (n - 2))
            - 2.0 / (n - 2) * (ones_k @ ones_l))
    return float(term / (n * (n - 3)))


def _cka_from_kernels(k, l) -> float:
    kk, ll = hsic1(k, k), hsic1(l, l)
    if kk <= 0.0 or ll <= 0.0:
        raise NumericalError("degenerate features: self-HSIC is not positive")
    value = hsic1(k, l) / math.sqrt(kk * ll)
    # the unbiased estimate can dip below 0 for unrelated features
    return min(max(value, 0.0), 1.0)


def _prepared_kernel(x) -> np.ndarray:
    xt = column_normalize(center_columns(x))
    return max_kernel(xt) if xt.ndim == 2 else channel_max_kernel(xt)


def g_relu_cka(x, y) -> float:
    """CKA with max kernels on centered, column-normalized features.

    ``x`` and ``y`` only need the same number of examples.
    """
    x, y = _features(x), _features(y)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    return _cka_from_kernels(_prepared_kernel(x), _prepared_kernel(y))


def linear_cka(x, y) -> float:
    """CKA with linear kernels on column-centered features."""
    x, y = _features(x), _features(y)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    xc = center_columns(x).reshape(x.shape[0], -1)
    yc = center_columns(y).reshape(y.shape[0], -1)
    return _cka_from_kernels(xc @ xc.T, yc @ yc.T)


def compute(name: str, x, y) -> float:
    fns = {"grelu-procrustes": g_relu_procrustes, "orth-procrustes": orthogonal_procrustes,
           "grelu-cka": g_relu_cka, "linear-cka": linear_cka}
    if name not in fns:
        raise DimensionError(f"unknown metric {name!r}; expected one of {METRICS}")
    return fns[name](x, y)


# --------------------------------------------------------------------------
# feature files


def write_features(path, data, meta: dict | None = None) -> None:
    """Write an ITWF1 file plus ``<path>.json`` metadata sidecar.

    Layout: magic ``ITWF1``, u32 ndim, u32 dims[ndim], little-endian f64
    payload in C order.
    """
    arr = np.ascontiguousarray(data, dtype="<f8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
    sidecar = {"layer": None, "model_id": None, "seed": None}
    sidecar.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def read_features(path):
    """Return ``(array, metadata)``; metadata is ``{}`` without a sidecar."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    head = len(FEATURE_MAGIC)
    if raw[:head] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not an ITWF1 feature file")
    if len(raw) < head + 4:
        raise FormatError(f"{path}: truncated header")
    (ndim,) = struct.unpack_from("<I", raw, head)
    if not 1 <= ndim <= 8 or len(raw) < head + 4 + 4 * ndim:
        raise FormatError(f"{path}: bad or truncated dimension header")
    dims = struct.unpack_from(f"<{ndim}I", raw, head + 4)
    offset = head + 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) - offset != 8 * count:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, expected {8 * count}")
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
    meta = {}
    side = Path(str(path) + ".json")
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{side}: invalid JSON sidecar") from exc
    return arr, meta
