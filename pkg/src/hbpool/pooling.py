"""Factorized, cross-layer and hierarchical bilinear pooling heads.

Every head computes, per spatial location, interaction vectors
``(A^T x) * (B^T y)`` between projected descriptors, sum-pools them over the
map, optionally applies signed-sqrt + L2 normalization per d-block, and maps
the (concatenated) result to class scores with ``P^T``.

The head functions take an ``ops`` namespace: :mod:`hbpool.tensor` for eager
evaluation or :mod:`hbpool.autodiff` to record a differentiable tape. Both
paths run the same kernels, so they agree bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError

VARIANTS = ("FBP", "CBP", "HBP")
# Pair order of the hierarchical head; indices refer to the three input maps.
HBP_PAIRS = ((0, 1), (0, 2), (1, 2))
# Projection used for each map position.
PROJ_NAMES = ("U", "V", "S")


def n_layers(variant: str) -> int:
    return {"FBP": 1, "CBP": 2, "HBP": 3}[check_variant(variant)]


def n_pairs(variant: str) -> int:
    return 3 if check_variant(variant) == "HBP" else 1


def check_variant(variant: str) -> str:
    v = variant.upper()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return v


@dataclass
class FbpParams:
    """Projections ``U, V`` (``c x d``) and classifier ``P`` (``d x o``)."""

    U: np.ndarray
    V: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        if self.U.ndim != 2 or self.U.shape != self.V.shape:
            raise ShapeError(f"U {self.U.shape} and V {self.V.shape} must be equal c x d matrices")
        if self.P.ndim != 2 or self.P.shape[0] != self.d:
            raise ShapeError(f"P must be d x o with d={self.d}, got {self.P.shape}")

    @property
    def c(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def o(self) -> int:
        return self.P.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V, "P": self.P}


@dataclass
class HbpParams:
    """Per-layer projections ``U, V, S`` shared across pairs and a ``3d x o`` classifier."""

    U: np.ndarray
    V: np.ndarray
    S: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        if self.U.ndim != 2 or not (self.U.shape == self.V.shape == self.S.shape):
            raise ShapeError(
                f"U {self.U.shape}, V {self.V.shape}, S {self.S.shape} must be equal c x d matrices"
            )
        if self.P.ndim != 2 or self.P.shape[0] != 3 * self.d:
            raise ShapeError(f"P must be 3d x o with d={self.d}, got {self.P.shape}")

    @property
    def c(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def o(self) -> int:
        return self.P.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V, "S": self.S, "P": self.P}


def init_head(variant: str, c: int, d: int, o: int, rng: np.random.Generator):
    """Variance-preserving uniform init: ``+-sqrt(6 / (fan_in + fan_out))``."""
    variant = check_variant(variant)
    if min(c, d, o) <= 0:
        raise ValueError(f"dimensions must be positive, got c={c}, d={d}, o={o}")
    lim = np.sqrt(6.0 / (c + d))
    n_proj = 3 if variant == "HBP" else 2
    mats = [rng.uniform(-lim, lim, size=(c, d)) for _ in range(n_proj)]
    rows = n_pairs(variant) * d
    plim = np.sqrt(6.0 / (rows + o))
    P = rng.uniform(-plim, plim, size=(rows, o))
    if variant == "HBP":
        return HbpParams(*mats, P)
    return FbpParams(*mats, P)


def normalize(v: np.ndarray) -> np.ndarray:
    """Signed square root followed by L2 normalization (zero maps to zero)."""
    return T.l2_normalize(T.signed_sqrt(np.asarray(v, dtype=T.DTYPE)))


def interaction(x, y, A, B, ops=T):
    """``(A^T x) * (B^T y)`` for descriptors (or whole maps) ``x`` and ``y``."""
    xs, ys = _shape(x), _shape(y)
    if xs[-1] != _shape(A)[0] or ys[-1] != _shape(B)[0]:
        raise ShapeError(f"interaction: descriptors {xs}, {ys} vs projections {_shape(A)}, {_shape(B)}")
    return ops.hadamard(ops.project(x, A), ops.project(y, B))


def _shape(v) -> tuple[int, ...]:
    return tuple(v.shape)


def pair_layout(variant: str) -> list[tuple[int, int, str, str]]:
    """``(map_i, map_j, proj_i, proj_j)`` for each interaction block of a variant."""
    variant = check_variant(variant)
    if variant == "FBP":
        return [(0, 0, "U", "V")]
    if variant == "CBP":
        return [(0, 1, "U", "V")]
    return [(i, j, PROJ_NAMES[i], PROJ_NAMES[j]) for i, j in HBP_PAIRS]


def pooled_blocks(maps: Sequence, params: Mapping, variant: str, ops=T) -> list:
    """Sum-pooled (un-normalized) interaction vector of every pair."""
    variant = check_variant(variant)
    if len(maps) != n_layers(variant):
        raise ValueError(f"{variant} takes {n_layers(variant)} feature maps, got {len(maps)}")
    first = _shape(maps[0])
    for m in maps[1:]:
        if _shape(m) != first:
            raise ShapeError(f"feature maps must share h, w, c: {first} vs {_shape(m)}")
    if len(first) not in (3, 4):
        raise ShapeError(f"feature maps must be h x w x c (optionally batched), got {first}")
    c = _shape(params["U"])[0]
    if first[-1] != c:
        raise ShapeError(f"feature maps have {first[-1]} channels, projections expect {c}")
    return [
        ops.sum_over_spatial(interaction(maps[i], maps[j], params[a], params[b], ops))
        for i, j, a, b in pair_layout(variant)
    ]


def head_scores(maps: Sequence, params: Mapping, variant: str, normalize: bool = True, ops=T):
    """Class scores of a pooling head for one map (``h x w x c``) or a batch."""
    blocks = pooled_blocks(maps, params, variant, ops)
    d = _shape(params["U"])[1]
    if _shape(params["P"])[0] != len(blocks) * d:
        raise ShapeError(
            f"{variant}: classifier has {_shape(params['P'])[0]} rows, expected {len(blocks) * d}"
        )
    if normalize:
        blocks = [ops.l2_normalize(ops.signed_sqrt(b)) for b in blocks]
    z = blocks[0] if len(blocks) == 1 else ops.concat(blocks)
    return ops.project(z, params["P"])


def fbp_forward(X, params: FbpParams, normalize: bool = True) -> np.ndarray:
    return head_scores([X], params.as_dict(), "FBP", normalize)


def cbp_forward(X, Y, params: FbpParams, normalize: bool = True) -> np.ndarray:
    return head_scores([X, Y], params.as_dict(), "CBP", normalize)


def hbp_forward(X, Y, Z, params: HbpParams, normalize: bool = True) -> np.ndarray:
    return head_scores([X, Y, Z], params.as_dict(), "HBP", normalize)


def full_bilinear_oracle(X, Y, U, V, P) -> np.ndarray:
    """Score a map pair with the materialized bilinear forms ``W_j``.

    ``W_j = sum_k P[k, j] U[:, k] V[:, k]^T`` and ``z_j = sum_loc x^T W_j y``.
    Cost is O(o c^2) per location; meant for small test instances only.
    """
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    U, V, P = (np.asarray(m, dtype=float) for m in (U, V, P))
    if X.ndim != 3 or X.shape != Y.shape:
        raise ShapeError(f"oracle: maps must be equal h x w x c, got {X.shape} and {Y.shape}")
    c = X.shape[2]
    if U.shape != V.shape or U.shape[0] != c or P.shape[0] != U.shape[1]:
        raise ShapeError(f"oracle: U {U.shape}, V {V.shape}, P {P.shape} do not fit c={c}")
    d, o = P.shape
    W = np.zeros((o, c, c))
    for j in range(o):
        for k in range(d):
            W[j] += P[k, j] * np.outer(U[:, k], V[:, k])
    z = np.zeros(o)
    h, w = X.shape[:2]
    for r in range(h):
        for s in range(w):
            x, y = X[r, s], Y[r, s]
            for j in range(o):
                z[j] += x @ W[j] @ y
    return z
