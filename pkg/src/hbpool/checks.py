"""Self-check suites shared by the command line and the test-suite.

* :func:`oracle_suite` -- factorized cross-layer pooling against the
  materialized bilinear forms on random small instances.
* :func:`hbp_block_suite` -- the hierarchical head against the sum of three
  per-pair oracles routed through the classifier's row blocks.
* :func:`gradcheck_suite` -- finite-difference checks of every registered op
  and of a small backbone + hierarchical head composite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import pooling
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .pooling import FbpParams, HbpParams


def max_rel_error(got, ref) -> float:
    got, ref = np.asarray(got), np.asarray(ref)
    denom = np.max(np.abs(ref))
    if denom == 0.0:
        return float(np.max(np.abs(got)))
    return float(np.max(np.abs(got - ref)) / denom)


@dataclass
class SuiteResult:
    errors: list[float] = field(default_factory=list)
    tolerance: float = 1e-9

    @property
    def worst(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def _random_dims(rng):
    c = int(rng.integers(1, 9))
    d = int(rng.integers(1, 17))
    o = int(rng.integers(1, 5))
    hw = int(rng.integers(1, 5))
    return c, d, o, hw


def oracle_suite(n: int = 100, seed: int = 0, fault: float = 0.0, tolerance: float = 1e-9) -> SuiteResult:
    """``cbp_forward`` (no normalization) vs :func:`pooling.full_bilinear_oracle`.

    ``fault`` scales ``U`` by ``1 + fault`` on the factorized side only; a
    nonzero value is a negative control.
    """
    rng = np.random.default_rng([seed, 0x0AC1E])
    result = SuiteResult(tolerance=tolerance)
    for _ in range(n):
        c, d, o, hw = _random_dims(rng)
        X, Y = rng.normal(size=(hw, hw, c)), rng.normal(size=(hw, hw, c))
        U, V, P = rng.normal(size=(c, d)), rng.normal(size=(c, d)), rng.normal(size=(d, o))
        got = pooling.cbp_forward(X, Y, FbpParams(U * (1.0 + fault), V, P), normalize=False)
        result.errors.append(max_rel_error(got, pooling.full_bilinear_oracle(X, Y, U, V, P)))
    return result


def hbp_block_suite(n: int = 50, seed: int = 0, tolerance: float = 1e-9) -> SuiteResult:
    rng = np.random.default_rng([seed, 0xB10C])
    result = SuiteResult(tolerance=tolerance)
    for _ in range(n):
        c, d, o, hw = _random_dims(rng)
        X, Y, Z = (rng.normal(size=(hw, hw, c)) for _ in range(3))
        U, V, S = (rng.normal(size=(c, d)) for _ in range(3))
        P = rng.normal(size=(3 * d, o))
        got = pooling.hbp_forward(X, Y, Z, HbpParams(U, V, S, P), normalize=False)
        ref = (
            pooling.full_bilinear_oracle(X, Y, U, V, P[:d])
            + pooling.full_bilinear_oracle(X, Z, U, S, P[d:2 * d])
            + pooling.full_bilinear_oracle(Y, Z, V, S, P[2 * d:])
        )
        result.errors.append(max_rel_error(got, ref))
    return result


# ---------------------------------------------------------------------------
# gradient checks

Case = Callable[[np.random.Generator], tuple[Callable, dict]]


def _weighted(fn, w):
    # a random readout keeps sum-of-output gradients from being trivially uniform
    return lambda p: ad.hadamard(fn(p), w)


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _case_matmul(rng):
    return (lambda p: ad.matmul(p["a"], p["b"])), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}


def _case_project(rng):
    return (lambda p: ad.project(p["x"], p["a"])), {"x": rng.normal(size=(2, 3, 4)), "a": rng.normal(size=(4, 3))}


def _case_hadamard(rng):
    return (lambda p: ad.hadamard(p["a"], p["b"])), {"a": rng.normal(size=5), "b": rng.normal(size=5)}


def _case_add(rng):
    return (lambda p: ad.hadamard(ad.add(p["a"], p["b"]), p["a"])), {"a": rng.normal(size=4), "b": rng.normal(size=4)}


def _case_sub(rng):
    return (lambda p: ad.hadamard(ad.sub(p["a"], p["b"]), p["b"])), {"a": rng.normal(size=4), "b": rng.normal(size=4)}


def _case_scale(rng):
    return (lambda p: ad.hadamard(ad.scale(p["a"], -1.7), p["a"])), {"a": rng.normal(size=4)}


def _case_relu(rng):
    return (lambda p: ad.hadamard(ad.relu(p["a"]), p["a"])), {"a": rng.normal(size=8)}


def _case_sum_over_spatial(rng):
    return _weighted(lambda p: ad.sum_over_spatial(p["x"]), rng.normal(size=3)), {"x": rng.normal(size=(2, 3, 3))}


def _case_concat(rng):
    fn = _weighted(lambda p: ad.concat([p["a"], p["b"]]), rng.normal(size=5))
    return fn, {"a": rng.normal(size=2), "b": rng.normal(size=3)}


def _case_conv2d(rng):
    return (lambda p: ad.conv2d(p["x"], p["k"], 1, 1)), {"x": rng.normal(size=(5, 5, 2)), "k": rng.normal(size=(3, 3, 2, 3))}


def _case_conv2d_strided(rng):
    return (lambda p: ad.conv2d(p["x"], p["k"], 2, 1)), {"x": rng.normal(size=(5, 5, 2)), "k": rng.normal(size=(3, 3, 2, 2))}


def _case_maxpool2(rng):
    return _weighted(lambda p: ad.maxpool2(p["x"]), rng.normal(size=(2, 2, 2))), {"x": rng.normal(size=(4, 4, 2))}


def _case_signed_sqrt(rng):
    return _weighted(lambda p: ad.signed_sqrt(p["v"]), rng.normal(size=6)), {"v": _away_from_zero(rng, 6)}


def _case_l2_normalize(rng):
    return _weighted(lambda p: ad.l2_normalize(p["v"]), rng.normal(size=(2, 4))), {"v": rng.normal(size=(2, 4))}


def _case_softmax_cross_entropy(rng):
    y = rng.integers(0, 4, size=3)
    return (lambda p: ad.softmax_cross_entropy(p["s"], y)), {"s": rng.normal(size=(3, 4))}


OP_CASES: dict[str, Case] = {
    "matmul": _case_matmul,
    "project": _case_project,
    "hadamard": _case_hadamard,
    "add": _case_add,
    "sub": _case_sub,
    "scale": _case_scale,
    "relu": _case_relu,
    "sum_over_spatial": _case_sum_over_spatial,
    "concat": _case_concat,
    "conv2d": _case_conv2d,
    "conv2d_strided": _case_conv2d_strided,
    "maxpool2": _case_maxpool2,
    "signed_sqrt": _case_signed_sqrt,
    "l2_normalize": _case_l2_normalize,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
}

COMPOSITE_CONFIG = BackboneConfig(input_size=16, stem=((4, True),), tap_channels=4, seed=0)
HEAD_NAMES = ("U", "V", "S", "P")


def composite_case(rng, config: BackboneConfig = COMPOSITE_CONFIG, d: int = 3, o: int = 2, normalize: bool = True):
    """Backbone + hierarchical head on one random image; all weights are leaves."""
    params = dict(init_backbone(config, rng).kernels)
    params.update(pooling.init_head("HBP", config.tap_channels, d, o, rng).as_dict())
    image = rng.uniform(0, 1, size=(config.input_size, config.input_size, 3))

    def fn(p):
        kernels = {k: v for k, v in p.items() if k not in HEAD_NAMES}
        maps = backbone_forward(image, kernels, config, ad)
        return pooling.head_scores(list(maps), p, "HBP", normalize, ad)

    return fn, params


def head_case(rng, c: int = 4, d: int = 3, o: int = 2, hw: int = 2):
    X, Y, Z = (rng.normal(size=(hw, hw, c)) for _ in range(3))
    params = pooling.init_head("HBP", c, d, o, rng).as_dict()
    return (lambda p: pooling.head_scores([X, Y, Z], p, "HBP", True, ad)), params


ALL_CASES: dict[str, Case] = {**OP_CASES, "hbp_head": head_case, "backbone+hbp": composite_case}


@dataclass
class GradcheckOutcome:
    name: str
    seed: int
    report: ad.GradcheckReport


def gradcheck_suite(
    names=None,
    seeds=range(20),
    eps: float = 1e-5,
    tolerance: float = 1e-5,
) -> list[GradcheckOutcome]:
    """Run finite-difference checks for the named cases (default: all) over ``seeds``."""
    names = list(ALL_CASES) if names is None else list(names)
    unknown = [n for n in names if n not in ALL_CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s) {unknown}; known: {sorted(ALL_CASES)}")
    outcomes = []
    for name in names:
        for seed in seeds:
            fn, params = ALL_CASES[name](np.random.default_rng([seed, 0x6C]))
            outcomes.append(GradcheckOutcome(name, seed, ad.gradcheck(fn, params, eps, tolerance)))
    return outcomes
