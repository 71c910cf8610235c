"""Minimal float64 tensor library with a reverse-mode tape, AdamW, and masked BCE.

Tensors wrap contiguous numpy arrays. Gradient recording happens on an
explicitly scoped :class:`Tape`; outside a tape every op is a plain numpy
computation, which is how inference runs. All math is float64 so that
finite-difference checks stay tight.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from scipy.special import erf

log = logging.getLogger(__name__)

DTYPE = np.float64

# Clamp for log/sigmoid/BCE inputs; prevents infinities without visible bias.
CLAMP_EPS = 1e-12

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.ascontiguousarray(np.asarray(values, dtype=DTYPE))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.item())

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"<Tensor{tag} shape={self.shape} requires_grad={self.requires_grad}>"

    # Operator sugar; the module-level functions are the real surface.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Records ops in execution order; the reverse of that order is the
    backward schedule. One tape per training step, single-threaded."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self.entries)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Mark `out` differentiable and push a backward rule if a tape is live."""
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.entries.append(_Entry(out, inputs, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate chain-rule gradients for every requires_grad tensor reachable
    from `loss`, then clear the tape.

    Gradients add into any existing ``.grad`` (parameter reuse is additive);
    call ``AdamW.zero_grad`` between steps.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not any(e.out is loss for e in tape.entries):
        raise ValueError("loss tensor was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.out), None)
        if g is None:
            continue
        for inp, gin in zip(entry.inputs, entry.backward(g)):
            if gin is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gin if key in grads else gin
    # Whatever was never popped belongs to leaves; attach it.
    leaves: dict[int, Tensor] = {}
    for entry in tape.entries:
        for inp in entry.inputs:
            leaves.setdefault(id(inp), inp)
    for key, g in grads.items():
        t = leaves.get(key)
        if t is not None and t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
    tape.entries.clear()


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` over axes that were broadcast so it matches `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports stacked (batched) operands via numpy matmul
    broadcasting; gradients reduce back over broadcast axes."""
    a, b = as_tensor(a), as_tensor(b)
    ka = a.values.shape[-1]
    kb = b.values.shape[-2] if b.values.ndim > 1 else b.values.shape[0]
    if ka != kb:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(g @ np.swapaxes(b.values, -1, -2), a.shape)
        if b.requires_grad:
            gb = _reduce_to(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values + b.values)

    def bwd(g):
        return (
            _reduce_to(g, a.shape) if a.requires_grad else None,
            _reduce_to(g, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values - b.values)

    def bwd(g):
        return (
            _reduce_to(g, a.shape) if a.requires_grad else None,
            _reduce_to(-g, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values * b.values)

    def bwd(g):
        return (
            _reduce_to(g * b.values, a.shape) if a.requires_grad else None,
            _reduce_to(g * a.values, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.values, 0.0))

    def bwd(g):
        return (g * (x.values > 0.0),)

    return _record(out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    e = erf(x.values * _INV_SQRT2)
    out = Tensor(0.5 * x.values * (1.0 + e))

    def bwd(g):
        pdf = np.exp(-0.5 * x.values * x.values) * _INV_SQRT_2PI
        return (g * (0.5 * (1.0 + e) + x.values * pdf),)

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable sigmoid, clamped into (CLAMP_EPS, 1 - CLAMP_EPS)."""
    x = as_tensor(x)
    v = x.values
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    s = np.clip(s, CLAMP_EPS, 1.0 - CLAMP_EPS)
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(out, (x,), bwd)


_log_clamp_warned = False


def log(x: Tensor) -> Tensor:
    """Natural log; non-positive inputs are clamped at CLAMP_EPS (warns once)."""
    global _log_clamp_warned
    x = as_tensor(x)
    v = x.values
    if np.any(v < CLAMP_EPS) and not _log_clamp_warned:
        log_ = logging.getLogger(__name__)
        log_.warning("log() input clamped at %g; further clamps are silent", CLAMP_EPS)
        _log_clamp_warned = True
    clamped = np.maximum(v, CLAMP_EPS)
    out = Tensor(np.log(clamped))

    def bwd(g):
        return (g * np.where(v >= CLAMP_EPS, 1.0 / clamped, 0.0),)

    return _record(out, (x,), bwd)


def sin(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.sin(x.values))

    def bwd(g):
        return (g * np.cos(x.values),)

    return _record(out, (x,), bwd)


def cos(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.cos(x.values))

    def bwd(g):
        return (g * -np.sin(x.values),)

    return _record(out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis; each row sums to 1."""
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), bwd)


_ELEMENTWISE = {}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by op-kind name; the named functions are equivalent."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


_ELEMENTWISE.update(
    {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid, "log": log, "softmax-rows": softmax_rows}
)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Call only during training; inference skips it."""
    if rate <= 0.0:
        return x
    x = as_tensor(x)
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.values * keep * scale)

    def bwd(g):
        return (g * keep * scale,)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = Tensor(xhat * gain.values + bias.values)

    def bwd(g):
        n = x.shape[-1]
        gx = gg = gb = None
        gxhat = g * gain.values
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = _reduce_to(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _reduce_to(g, bias.shape)
        return gx, gg, gb

    return _record(out, (x, gain, bias), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    out = Tensor(x.values.reshape(shape))

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.values, axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.values.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.values[idx])

    def bwd(g):
        full = np.zeros_like(x.values)
        full[idx] = g
        return (full,)

    return _record(out, (x,), bwd)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup `table[index]`; backward scatter-adds into the table."""
    table = as_tensor(table)
    index = np.asarray(index)
    out = Tensor(table.values[index])

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, index, g)
        return (gt,)

    return _record(out, (table,), bwd)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bwd)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bwd)


def bce_masked(pred: Tensor, target, loss_mask) -> Tensor:
    """Masked binary cross-entropy: sum over masked entries, mean over rows.

    `pred` is (B, C) in (0, 1); entries where `loss_mask` is false contribute
    nothing and receive exactly zero gradient. A row with an all-false mask
    contributes zero loss.
    """
    pred = as_tensor(pred)
    y = np.asarray(target, dtype=DTYPE)
    mask = np.asarray(loss_mask, dtype=bool)
    if pred.shape != y.shape or pred.shape != mask.shape:
        raise ValueError(f"bce_masked shape mismatch: pred {pred.shape}, target {y.shape}, mask {mask.shape}")
    p = np.clip(pred.values, CLAMP_EPS, 1.0 - CLAMP_EPS)
    rows = pred.shape[0] if pred.values.ndim > 1 else 1
    term = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    total = np.where(mask, term, 0.0).sum() / rows
    out = Tensor(total)

    def bwd(g):
        inside = (pred.values > CLAMP_EPS) & (pred.values < 1.0 - CLAMP_EPS)
        gp = np.where(mask & inside, (p - y) / (p * (1.0 - p)), 0.0) * (g / rows)
        return (gp,)

    return _record(out, (pred,), bwd)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with bias correction and decoupled multiplicative weight decay.

    Moment accumulators start at zero and match parameter shapes; the step
    counter is per-parameter and strictly increasing.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {
            name: {"m": np.zeros_like(p.values), "v": np.zeros_like(p.values), "t": 0}
            for name, p in self.params.items()
        }

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise ValueError(f"NaN gradient for parameter '{name}'; aborting step")
            st = self.state[name]
            st["t"] += 1
            t = st["t"]
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1**t)
            v_hat = st["v"] / (1.0 - self.beta2**t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            p.values = p.values - self.lr * update - self.lr * self.weight_decay * p.values

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
