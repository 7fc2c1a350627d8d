"""Intertwiner groups of coordinatewise activations.

For an activation ``sigma`` applied coordinatewise on R^n, the intertwiner
group collects the invertible ``A`` for which ``sigma(A x) = B sigma(x)`` for
some invertible ``B``; the map ``A -> B`` is ``phi``. For every nonlinear
activation handled here the group consists of monomial matrices ``P D``
(a permutation times a diagonal), which is how :class:`MonomialElement`
stores them. The identity activation has all of GL_n and uses
:class:`GeneralElement` instead.

=============  ======================  ==================
activation     diagonal of ``D``       ``phi(P D)``
=============  ======================  ==================
identity       any nonzero             ``P D``
sigmoid        all ones                ``P``
relu           positive                ``P D``
leaky_relu     positive                ``P D``
rbf            +1 or -1                ``P abs(D)``
polynomial     any nonzero             ``P D**degree``
=============  ======================  ==================
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import numerics
from .errors import ConfigError, DimensionError, GroupMembershipError, NumericalError, SingularMatrixError

KINDS = ("identity", "sigmoid", "relu", "leaky_relu", "rbf", "polynomial")

MAX_POLY_DEGREE = 8
MAX_POLY_INPUT = 1e3
MEMBERSHIP_TOL = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Activation:
    """A coordinatewise nonlinearity.

    ``slope`` is only meaningful for ``leaky_relu`` and ``degree`` only for
    ``polynomial``. Build instances with the classmethods or :meth:`parse`.
    """

    kind: str
    slope: float | None = None
    degree: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown activation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "leaky_relu":
            if self.slope is None or not 0.0 < float(self.slope) < 1.0:
                # slope 1 is the identity, whose group is all of GL_n
                raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {self.slope}")
        elif self.slope is not None:
            raise ConfigError(f"slope only applies to leaky_relu, not {self.kind}")
        if self.kind == "polynomial":
            if self.degree is None or int(self.degree) != self.degree or not 1 <= self.degree <= MAX_POLY_DEGREE:
                raise ConfigError(f"polynomial degree must be an integer in [1, {MAX_POLY_DEGREE}], got {self.degree}")
        elif self.degree is not None:
            raise ConfigError(f"degree only applies to polynomial, not {self.kind}")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def sigmoid(cls):
        return cls("sigmoid")

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def leaky_relu(cls, slope: float = 0.01):
        return cls("leaky_relu", slope=float(slope))

    @classmethod
    def rbf(cls):
        return cls("rbf")

    @classmethod
    def polynomial(cls, degree: int):
        return cls("polynomial", degree=int(degree))

    @classmethod
    def parse(cls, text: str) -> "Activation":
        """Parse ``"relu"``, ``"leaky_relu:0.1"`` or ``"polynomial:3"``."""
        if isinstance(text, Activation):
            return text
        name, _, arg = str(text).strip().partition(":")
        name = name.lower()
        if name == "leaky_relu":
            return cls.leaky_relu(float(arg) if arg else 0.01)
        if name == "polynomial":
            if not arg:
                raise ConfigError("polynomial activation needs a degree, e.g. 'polynomial:2'")
            return cls.polynomial(int(arg))
        if arg:
            raise ConfigError(f"activation {name!r} takes no parameter")
        return cls(name)

    def __str__(self):
        if self.kind == "leaky_relu":
            return f"leaky_relu:{self.slope!r}"
        if self.kind == "polynomial":
            return f"polynomial:{self.degree}"
        return self.kind

    def __call__(self, x):
        """Apply the activation entrywise to an array of any shape."""
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite input to {self} activation")
        k = self.kind
        if k == "identity":
            return x.copy()
        if k == "relu":
            return np.maximum(x, 0.0)
        if k == "leaky_relu":
            return np.where(x >= 0.0, x, self.slope * x)
        if k == "sigmoid":
            # e^x / (1 + e^x), evaluated without overflow on either tail
            ex = np.exp(-np.abs(x))
            return np.where(x >= 0.0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        if k == "rbf":
            return _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        if np.any(np.abs(x) > MAX_POLY_INPUT):
            raise NumericalError(
                f"polynomial activation input exceeds {MAX_POLY_INPUT:g} in magnitude; refusing to overflow"
            )
        return x ** self.degree

    def derivative(self, x):
        """Entrywise derivative. ReLU uses 0 at the kink, LeakyReLU uses 1."""
        x = np.asarray(x, dtype=np.float64)
        k = self.kind
        if k == "identity":
            return np.ones_like(x)
        if k == "relu":
            return (x > 0.0).astype(np.float64)
        if k == "leaky_relu":
            return np.where(x >= 0.0, 1.0, self.slope)
        if k == "sigmoid":
            s = self(x)
            return s * (1.0 - s)
        if k == "rbf":
            return -x * self(x)
        return self.degree * x ** (self.degree - 1)

    def check_diag(self, diag) -> None:
        """Raise :class:`GroupMembershipError` unless ``diag`` fits this kind."""
        d = np.asarray(diag, dtype=np.float64)
        if not np.all(np.isfinite(d)):
            raise GroupMembershipError("diagonal factor has non-finite entries")
        k = self.kind
        if k in ("relu", "leaky_relu"):
            ok = np.all(d > 0.0)
            need = "strictly positive"
        elif k == "rbf":
            ok = np.all(np.abs(np.abs(d) - 1.0) <= MEMBERSHIP_TOL)
            need = "in {+1, -1}"
        elif k == "sigmoid":
            ok = np.all(np.abs(d - 1.0) <= MEMBERSHIP_TOL)
            need = "all equal to 1"
        else:
            ok = np.all(d != 0.0)
            need = "nonzero"
        if not ok:
            raise GroupMembershipError(f"{self} group requires diagonal entries {need}, got {d.tolist()}")


def apply_activation(kind: Activation, x) -> np.ndarray:
    return kind(x)


def sigma_identity_invertible(kind, n: int) -> bool:
    """Whether ``sigma(I_n)`` is invertible.

    ``sigma(I_n) = sigma(0) 11^T + (sigma(1) - sigma(0)) I`` has eigenvalues
    ``sigma(1) - sigma(0)`` and ``sigma(1) + (n-1) sigma(0)``, so it is
    invertible exactly when neither vanishes.
    """
    if n < 1:
        raise ConfigError(f"n must be positive, got {n}")
    s0, s1 = (float(v) for v in np.asarray(kind(np.array([0.0, 1.0]))))
    return s1 != s0 and s1 != -(n - 1) * s0


def phi_general(kind: Activation, a) -> np.ndarray:
    """``sigma(A) sigma(I)^-1`` for any square ``A``."""
    a = numerics.as_matrix(a)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    if not sigma_identity_invertible(kind, n):
        raise SingularMatrixError(f"sigma(I_{n}) is singular for {kind}")
    return numerics.matmul(kind(a), numerics.lu_inverse(kind(np.eye(n))))


@dataclass(frozen=True, eq=False)
class MonomialElement:
    """A group element ``P D`` stored as (permutation, diagonal).

    ``perm[j]`` is the 0-based row holding column ``j``'s nonzero, so the
    dense form has entry ``(perm[j], j) = diag[j]``.
    """

    kind: Activation
    perm: np.ndarray
    diag: np.ndarray = field(repr=False)

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64).copy()
        diag = np.asarray(self.diag, dtype=np.float64).copy()
        n = perm.shape[0]
        if perm.ndim != 1 or diag.shape != (n,):
            raise DimensionError(f"perm and diag must be vectors of equal length, got {perm.shape}, {diag.shape}")
        if n < 1 or not np.array_equal(np.sort(perm), np.arange(n)):
            raise GroupMembershipError(f"perm is not a permutation of 0..{n - 1}: {perm.tolist()}")
        self.kind.check_diag(diag)
        perm.flags.writeable = False
        diag.flags.writeable = False
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "diag", diag)

    @property
    def n(self) -> int:
        return self.perm.shape[0]

    @classmethod
    def identity(cls, kind: Activation, n: int) -> "MonomialElement":
        return cls(kind, np.arange(n), np.ones(n))

    @classmethod
    def from_matrix(cls, kind: Activation, m, tol: float = MEMBERSHIP_TOL) -> "MonomialElement":
        """Structural membership test: one nonzero per row and column."""
        m = numerics.as_matrix(m)
        n = m.shape[0]
        if m.shape != (n, n):
            raise DimensionError(f"expected a square matrix, got {m.shape}")
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        nz = np.abs(m) > tol * scale
        if not (np.all(nz.sum(axis=0) == 1) and np.all(nz.sum(axis=1) == 1)):
            raise GroupMembershipError("matrix is not monomial (needs exactly one nonzero per row and column)")
        perm = np.argmax(nz, axis=0)
        return cls(kind, perm, m[perm, np.arange(n)])

    def to_matrix(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        m[self.perm, np.arange(self.n)] = self.diag
        return m

    def perm_matrix(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        m[self.perm, np.arange(self.n)] = 1.0
        return m

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.n)) and np.all(self.diag == 1.0))

    def apply(self, x):
        """``(P D) x`` along the last axis of ``x`` (rows are samples)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        out[..., self.perm] = x * self.diag
        return out

    def __eq__(self, other):
        if not isinstance(other, MonomialElement):
            return NotImplemented
        return (self.kind == other.kind and np.array_equal(self.perm, other.perm)
                and np.array_equal(self.diag, other.diag))

    __hash__ = None

    def to_json(self) -> dict:
        return {"kind": str(self.kind), "n": self.n,
                "perm": [int(p) + 1 for p in self.perm],
                "diag": [float(d) for d in self.diag]}


@dataclass(frozen=True, eq=False)
class GeneralElement:
    """An element of GL_n, the group of the identity activation."""

    matrix: np.ndarray
    kind: Activation = Activation("identity")

    def __post_init__(self):
        m = numerics.as_matrix(self.matrix).copy()
        if m.shape[0] != m.shape[1]:
            raise DimensionError(f"expected a square matrix, got {m.shape}")
        if self.kind.kind != "identity":
            raise GroupMembershipError(f"general linear elements only belong to the identity activation, not {self.kind}")
        numerics.lu_inverse(m)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def to_matrix(self) -> np.ndarray:
        return self.matrix.copy()

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(self.n)))

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def __eq__(self, other):
        if not isinstance(other, GeneralElement):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)

    __hash__ = None

    def to_json(self) -> dict:
        return {"kind": "identity", "n": self.n, "matrix": self.matrix.tolist()}


Element = Union[MonomialElement, GeneralElement]


def element_from_json(obj: dict) -> Element:
    try:
        kind = Activation.parse(obj["kind"])
        if "matrix" in obj:
            el = GeneralElement(np.array(obj["matrix"], dtype=np.float64), kind)
        else:
            el = MonomialElement(kind, np.asarray(obj["perm"], dtype=np.int64) - 1, np.asarray(obj["diag"], dtype=np.float64))
        if "n" in obj and int(obj["n"]) != el.n:
            raise DimensionError(f"element declares n={obj['n']} but has dimension {el.n}")
        return el
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed group element: {exc}") from exc


def _check_pair(e1: Element, e2: Element):
    if e1.kind != e2.kind:
        raise GroupMembershipError(f"kind mismatch: {e1.kind} vs {e2.kind}")
    if e1.n != e2.n:
        raise DimensionError(f"dimension mismatch: {e1.n} vs {e2.n}")


def compose(e1: Element, e2: Element) -> Element:
    """The product ``e1 e2`` (apply ``e2`` first)."""
    _check_pair(e1, e2)
    if isinstance(e1, MonomialElement) and isinstance(e2, MonomialElement):
        # P1 D1 P2 D2 = (P1 P2)(D1 permuted by P2) D2
        return MonomialElement(e1.kind, e1.perm[e2.perm], e1.diag[e2.perm] * e2.diag)
    return GeneralElement(numerics.matmul(e1.to_matrix(), e2.to_matrix()), e1.kind)


def invert(e: Element) -> Element:
    if isinstance(e, GeneralElement):
        return GeneralElement(numerics.lu_inverse(e.matrix), e.kind)
    inv = np.argsort(e.perm)
    return MonomialElement(e.kind, inv, 1.0 / e.diag[inv])


def to_matrix(e: Element) -> np.ndarray:
    return e.to_matrix()


def phi_closed_form(kind: Activation, e: Element) -> Element:
    """Image of ``e`` under ``phi``, computed factor-wise."""
    if e.kind != kind:
        raise GroupMembershipError(f"element belongs to {e.kind}, not {kind}")
    if isinstance(e, GeneralElement):
        return e
    kind.check_diag(e.diag)
    if kind.kind == "rbf":
        return MonomialElement(kind, e.perm, np.abs(e.diag))
    if kind.kind == "polynomial":
        return MonomialElement(kind, e.perm, e.diag ** kind.degree)
    return e


def phi(e: Element) -> Element:
    return phi_closed_form(e.kind, e)


def random_element(kind: Activation, n: int, rng: np.random.Generator, sigma: float = 0.5) -> Element:
    """Draw a random group element.

    The permutation is uniform. Diagonals follow the activation: normalized
    lognormal (mean exactly 1) for relu and leaky_relu, random signs for rbf,
    signed normalized lognormal for polynomial, ones for sigmoid. For the
    identity activation a well-conditioned dense matrix ``Q diag(s)`` is
    returned as a :class:`GeneralElement`.
    """
    if n < 1:
        raise ConfigError(f"n must be positive, got {n}")
    k = kind.kind
    if k == "identity":
        q = numerics.random_orthogonal(rng, n)
        return GeneralElement(q * numerics.lognormal_fill(rng, n, sigma), kind)
    perm = rng.permutation(n)
    if k in ("relu", "leaky_relu"):
        diag = numerics.lognormal_fill(rng, n, sigma)
    elif k == "rbf":
        diag = rng.choice([-1.0, 1.0], size=n)
    elif k == "polynomial":
        diag = rng.choice([-1.0, 1.0], size=n) * numerics.lognormal_fill(rng, n, sigma)
    else:
        diag = np.ones(n)
    return MonomialElement(kind, perm, diag)


def random_permutation_element(kind: Activation, n: int, rng: np.random.Generator) -> MonomialElement:
    return MonomialElement(kind, rng.permutation(n), np.ones(n))


def verify_intertwining(kind: Activation, e: Element, n_samples: int, rng: np.random.Generator,
                        phi_matrix=None) -> float:
    """Max over Gaussian samples of ``|sigma(A x) - phi(A) sigma(x)|_inf``.

    ``phi_matrix`` overrides the closed-form ``phi(A)``; pass it to probe
    matrices outside the group, where no closed form exists.
    """
    a = e.to_matrix() if not isinstance(e, np.ndarray) else numerics.as_matrix(e)
    n = a.shape[0]
    if phi_matrix is None:
        b = phi_closed_form(kind, e).to_matrix()
    else:
        b = numerics.as_matrix(phi_matrix)
    x = rng.standard_normal((n_samples, n))
    lhs = kind(x @ a.T)
    rhs = kind(x) @ b.T
    return float(np.max(np.abs(lhs - rhs))) if n_samples else 0.0


def _same_ray(u: np.ndarray, w: np.ndarray, tol: float) -> bool:
    # parallel (all 2x2 minors vanish) and pointing the same way
    minors = np.outer(u, w) - np.outer(w, u)
    scale = max(1.0, float(np.max(np.abs(u))) * float(np.max(np.abs(w))))
    return bool(np.max(np.abs(minors)) <= tol * scale and u @ w > 0)


def ray_orbit_cardinality(v, t_values=(0.5, 2.0), tol: float = 1e-12) -> int:
    """Number of distinct rays among ``v`` and ``D(t) v`` for each ``t``.

    ``D(t)`` scales the first nonzero coordinate of ``v`` by ``t``; every
    ``D(t)`` with ``t > 0`` lies in the ReLU group. ``v`` itself (``t = 1``)
    is always counted.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v != 0.0):
        raise ConfigError("v must be nonzero")
    i = int(np.flatnonzero(v)[0])
    rays = [v]
    for t in t_values:
        w = v.copy()
        w[i] *= t
        if not any(_same_ray(r, w, tol) for r in rays):
            rays.append(w)
    return len(rays)
