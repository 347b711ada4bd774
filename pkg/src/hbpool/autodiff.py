"""Tape-based reverse-mode differentiation over the :mod:`hbpool.tensor` kernels.

A :class:`Tape` stores every value produced during a forward pass in a slot and
appends one :class:`TapeNode` per op, so the node list is already in
topological order. :func:`backward` walks it in reverse and accumulates
gradients per slot; parameters shared by several branches (the per-layer
projections of a hierarchical head) therefore sum their contributions without
any special casing.

Ops are looked up by name in a registry. Each entry has an eager kernel (the
same function the eager code path calls, so recorded and eager forwards agree
bit for bit) and a vector-Jacobian product. Ops with kinks also expose a
``pattern`` (ReLU mask, maxpool argmax, sign) used by :func:`gradcheck` to skip
finite-difference probes that cross a non-differentiable boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError


class UnsupportedOpError(LookupError):
    """An op name that is not in the registry was applied to a tape."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during forward or backward."""


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    # backward(ctx, grad_out, inputs, needs) -> one gradient (or None) per input
    backward: Callable[..., tuple]
    pattern: Callable[[Any], np.ndarray] | None = None


REGISTRY: dict[str, OpDef] = {}


def register_op(name: str, forward, backward, pattern=None) -> OpDef:
    op = OpDef(name, forward, backward, pattern)
    REGISTRY[name] = op
    return op


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int, ...]
    ctx: Any
    output: int


class Var:
    """Handle to a value slot on a tape."""

    __slots__ = ("tape", "slot")

    def __init__(self, tape: "Tape", slot: int):
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.slot]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(slot={self.slot}, shape={self.shape})"


@dataclass
class Tape:
    values: list[np.ndarray] = field(default_factory=list)
    nodes: list[TapeNode] = field(default_factory=list)
    requires_grad: list[bool] = field(default_factory=list)
    names: dict[str, int] = field(default_factory=dict)
    output: Var | None = None

    def _new_slot(self, value: np.ndarray, requires_grad: bool) -> Var:
        self.values.append(value)
        self.requires_grad.append(requires_grad)
        return Var(self, len(self.values) - 1)

    def param(self, name: str, value) -> Var:
        """Register a named differentiable leaf."""
        if name in self.names:
            raise ValueError(f"duplicate leaf name {name!r}")
        var = self._new_slot(np.asarray(value, dtype=T.DTYPE), True)
        self.names[name] = var.slot
        return var

    def constant(self, value) -> Var:
        return self._new_slot(np.asarray(value, dtype=T.DTYPE), False)

    def apply(self, name: str, *args, **attrs) -> Var:
        op = REGISTRY.get(name)
        if op is None:
            raise UnsupportedOpError(f"op {name!r} is not registered")
        slots = []
        for a in args:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise ValueError(f"{name}: operand recorded on a different tape")
                slots.append(a.slot)
            else:
                slots.append(self.constant(a).slot)
        out, ctx = op.forward(*(self.values[s] for s in slots), **attrs)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"non-finite output from op {name!r}")
        var = self._new_slot(out, any(self.requires_grad[s] for s in slots))
        self.nodes.append(TapeNode(name, tuple(slots), ctx, var.slot))
        return var

    def patterns(self) -> list[np.ndarray]:
        """Kink signatures of every piecewise op on the tape, in order."""
        found = []
        for node in self.nodes:
            op = REGISTRY[node.op]
            if op.pattern is not None:
                found.append(op.pattern(node.ctx))
        return found


Gradients = dict[str, np.ndarray]


def backward(tape: Tape, seed, output: Var | None = None) -> Gradients:
    """Vector-Jacobian product of ``seed`` against every named leaf.

    The tape is not modified, so repeated calls return identical results.
    """
    output = output if output is not None else tape.output
    if output is None:
        raise ValueError("backward: tape has no recorded output")
    seed = np.asarray(seed, dtype=T.DTYPE)
    if seed.shape != output.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.slot: seed.copy()}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        needs = tuple(tape.requires_grad[s] for s in node.inputs)
        if not any(needs):
            continue
        ins = tuple(tape.values[s] for s in node.inputs)
        contribs = REGISTRY[node.op].backward(node.ctx, g, ins, needs)
        for slot, need, gi in zip(node.inputs, needs, contribs):
            if not need or gi is None:
                continue
            if not np.all(np.isfinite(gi)):
                raise NumericalError(f"non-finite gradient from op {node.op!r}")
            if slot in grads:
                grads[slot] = grads[slot] + gi
            else:
                grads[slot] = gi
    out = {}
    for name, slot in tape.names.items():
        g = grads.get(slot)
        out[name] = g if g is not None else np.zeros_like(tape.values[slot])
    return out


def record(fn: Callable[[dict[str, Var]], Var], params: Mapping[str, np.ndarray]) -> tuple[Var, Tape]:
    """Run ``fn`` on fresh leaves for ``params`` and return its output and tape."""
    tape = Tape()
    leaves = {name: tape.param(name, value) for name, value in params.items()}
    out = fn(leaves)
    if not isinstance(out, Var):
        out = tape.constant(out)
    tape.output = out
    return out, tape


# ---------------------------------------------------------------------------
# registered ops


def _unbatch_sum(g, shape):
    return g if g.shape == shape else g.reshape((-1,) + shape).sum(axis=0)


register_op(
    "matmul",
    lambda a, b: (T.matmul(a, b), None),
    lambda ctx, g, ins, needs: (
        g @ ins[1].T if needs[0] else None,
        ins[0].T @ g if needs[1] else None,
    ),
)

register_op(
    "project",
    lambda x, a: (T.project(x, a), None),
    lambda ctx, g, ins, needs: (
        T.project(g, ins[1].T) if needs[0] else None,
        ins[0].reshape(-1, ins[1].shape[0]).T @ g.reshape(-1, ins[1].shape[1]) if needs[1] else None,
    ),
)

register_op(
    "hadamard",
    lambda a, b: (T.hadamard(a, b), None),
    lambda ctx, g, ins, needs: (
        g * ins[1] if needs[0] else None,
        g * ins[0] if needs[1] else None,
    ),
)

register_op(
    "add",
    lambda a, b: (T.add(a, b), None),
    lambda ctx, g, ins, needs: (g, g),
)

register_op(
    "sub",
    lambda a, b: (T.sub(a, b), None),
    lambda ctx, g, ins, needs: (g, -g),
)

register_op(
    "scale",
    lambda a, alpha: (T.scale(a, alpha), float(alpha)),
    lambda ctx, g, ins, needs: (g * ctx,),
)

register_op(
    "relu",
    lambda x: (T.relu(x), x > 0.0),
    lambda mask, g, ins, needs: (g * mask,),
    pattern=lambda mask: mask,
)


def _sum_spatial_backward(ctx, g, ins, needs):
    shape = ins[0].shape
    return (np.broadcast_to(g[..., None, None, :], shape).copy(),)


register_op("sum_over_spatial", lambda x: (T.sum_over_spatial(x), None), _sum_spatial_backward)


def _concat_forward(*parts):
    return T.concat(list(parts)), [p.shape[-1] for p in parts]


def _concat_backward(widths, g, ins, needs):
    cuts = np.cumsum(widths)[:-1]
    return tuple(np.split(g, cuts, axis=-1))


register_op("concat", _concat_forward, _concat_backward)


def _conv_forward(x, k, stride=1, pad=0):
    single = x.ndim == 3
    xb = x[None] if single else x
    # patches are kept for the kernel gradient
    out, cols = T.conv2d_with_patches(x, k, stride, pad)
    return out, (xb.shape, single, stride, pad, cols)


def _conv_backward(ctx, g, ins, needs):
    in_shape, single, stride, pad, cols = ctx
    k = ins[1]
    kh, kw, cin, cout = k.shape
    gb = g[None] if single else g
    gx = gk = None
    if needs[1]:
        gk = (cols.reshape(-1, kh * kw * cin).T @ gb.reshape(-1, cout)).reshape(k.shape)
    if needs[0]:
        gcols = gb @ k.reshape(kh * kw * cin, cout).T
        gx = T.col2im(gcols, in_shape, kh, kw, stride, pad)
        if single:
            gx = gx[0]
    return gx, gk


register_op("conv2d", _conv_forward, _conv_backward)


def _maxpool_forward(x):
    out, idx = T.maxpool2(x, return_argmax=True)
    return out, idx


def _maxpool_pattern(idx):
    return idx


register_op(
    "maxpool2",
    _maxpool_forward,
    lambda idx, g, ins, needs: (T.maxpool2_backward(g, idx),),
    pattern=_maxpool_pattern,
)


def _ssqrt_backward(ctx, g, ins, needs):
    a = np.abs(ins[0])
    d = np.where(a > 0.0, 0.5 / np.sqrt(np.where(a > 0.0, a, 1.0)), 0.0)
    return (g * d,)


register_op(
    "signed_sqrt",
    lambda v: (T.signed_sqrt(v), np.sign(v)),
    _ssqrt_backward,
    pattern=lambda sign: sign,
)


def _l2_forward(v):
    out = T.l2_normalize(v)
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    return out, (out, norm)


def _l2_backward(ctx, g, ins, needs):
    u, norm = ctx
    safe = np.where(norm > 0.0, norm, 1.0)
    gv = (g - u * (u * g).sum(axis=-1, keepdims=True)) / safe
    return (np.where(norm > 0.0, gv, 0.0),)


register_op("l2_normalize", _l2_forward, _l2_backward)


def softmax_xent_kernel(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy of ``n x o`` scores and its probabilities."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    n = scores.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    return loss, np.exp(logp)


def _xent_forward(scores, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: scores {scores.shape} vs labels {labels.shape}")
    loss, prob = softmax_xent_kernel(scores, labels)
    return np.asarray(loss), (prob, labels)


def _xent_backward(ctx, g, ins, needs):
    prob, labels = ctx
    n = prob.shape[0]
    d = prob.copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (g / n),)


register_op("softmax_cross_entropy", _xent_forward, _xent_backward)


# ---------------------------------------------------------------------------
# functional front end (mirrors the eager names in hbpool.tensor)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise ValueError("at least one operand must be a recorded Var")


def matmul(a, b):
    return _tape_of(a, b).apply("matmul", a, b)


def project(x, a):
    return _tape_of(x, a).apply("project", x, a)


def hadamard(a, b):
    return _tape_of(a, b).apply("hadamard", a, b)


def add(a, b):
    return _tape_of(a, b).apply("add", a, b)


def sub(a, b):
    return _tape_of(a, b).apply("sub", a, b)


def scale(a, alpha):
    return a.tape.apply("scale", a, alpha=alpha)


def relu(x):
    return x.tape.apply("relu", x)


def sum_over_spatial(x):
    return x.tape.apply("sum_over_spatial", x)


def concat(parts):
    return _tape_of(*parts).apply("concat", *parts)


def conv2d(x, kernels, stride=1, pad=0):
    return _tape_of(x, kernels).apply("conv2d", x, kernels, stride=stride, pad=pad)


def maxpool2(x):
    return x.tape.apply("maxpool2", x)


def signed_sqrt(v):
    return v.tape.apply("signed_sqrt", v)


def l2_normalize(v):
    return v.tape.apply("l2_normalize", v)


def softmax_cross_entropy(scores, labels):
    return scores.tape.apply("softmax_cross_entropy", scores, labels=labels)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    skipped: dict[str, int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    def worst(self) -> tuple[str, float]:
        if not self.max_rel_error:
            return "", 0.0
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def _patterns_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(
    fn: Callable[[dict[str, Var]], Var],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tolerance: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``sum(fn(params))`` to central differences.

    Per coordinate the error is ``|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)``.
    Coordinates whose +/-eps probe changes any kink pattern (ReLU mask, maxpool
    argmax, sign under a signed square root) are skipped. ``max_coords`` limits
    the probes per parameter to a random subset.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: np.array(v, dtype=T.DTYPE) for k, v in params.items()}
    out, tape = record(fn, params)
    for v in tape.values:
        if not np.all(np.isfinite(v)):
            raise NumericalError("non-finite value on the recorded tape")
    grads = backward(tape, np.ones_like(out.value))
    base = tape.patterns()

    def probe(name, flat_index, delta):
        trial = dict(params)
        arr = params[name].copy()
        arr.reshape(-1)[flat_index] += delta
        trial[name] = arr
        o, t = record(fn, trial)
        return float(o.value.sum()), t.patterns()

    errors, checked, skipped = {}, {}, {}
    rng = rng or np.random.default_rng(0)
    for name, value in params.items():
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = np.sort(rng.choice(value.size, size=max_coords, replace=False))
        worst, n_ok, n_skip = 0.0, 0, 0
        g_flat = grads[name].reshape(-1)
        for i in coords:
            fp, pp = probe(name, i, eps)
            fm, pm = probe(name, i, -eps)
            if not (_patterns_equal(pp, base) and _patterns_equal(pm, base)):
                n_skip += 1
                continue
            fd = (fp - fm) / (2.0 * eps)
            ad = g_flat[i]
            worst = max(worst, abs(ad - fd) / (abs(ad) + abs(fd) + 1e-12))
            n_ok += 1
        errors[name], checked[name], skipped[name] = worst, n_ok, n_skip
    return GradcheckReport(errors, checked, skipped, tolerance)
