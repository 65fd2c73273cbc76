"""A deliberately small reverse-mode autodiff engine on float64 numpy arrays.

Only the primitives the encoder/predictor need are provided. Recording is
define-by-run: ops executed inside an active :class:`Tape` context are
appended to it, and :func:`backward` replays the tape in reverse order.
Ops executed with no active tape (or under :func:`no_grad`) are detached.

    with Tape() as tape:
        y = linear(x, W, b)
        loss = mean(sq_norm(y))
    backward(loss, tape)
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateVectorError, DimensionError, TrainingDivergenceError

EPS_NORM = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array node. ``requires_grad`` marks membership in the graph."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Param(Tensor):
    """Trainable leaf with a stable identifier and a zero-initialized gradient."""

    __slots__ = ("id",)

    def __init__(self, pid: str, data, requires_grad: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=requires_grad)
        self.id = pid
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param({self.id!r}, shape={self.shape})"


@dataclass
class _Op:
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives. Use as a context manager."""

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.ops)


class no_grad:
    """Context in which no op is recorded (outputs are detached)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.ops.append(_Op(name, out, inputs, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(param) into every Param reachable through ``tape``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.ops:
        raise ContractError("backward called with an empty tape")
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops):
        g = op.out.grad
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if isinstance(t, Param):
                t.grad += gi
            elif t.grad is None:
                t.grad = gi
            else:
                t.grad = t.grad + gi
    # intermediates are single-use; keep only parameter gradients
    for op in tape.ops:
        op.out.grad = None
        for t in op.inputs:
            if not isinstance(t, Param):
                t.grad = None


# ----------------------------------------------------------------------------
# primitives


def linear(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., Din] @ W[Din, Dout] + b[Dout]``."""
    x = _as_tensor(x)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: cannot multiply x{x.shape} by W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match W{W.shape}")
    din, dout = W.shape
    x2 = x.data.reshape(-1, din)
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*x.shape[:-1], dout)

    def bw(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return _emit("linear", out, inputs, bw)


def causal_dilated_conv1d(x, kernel: Tensor, dilation: int, bias: Tensor | None = None) -> Tensor:
    """Causal dilated convolution over the time axis of ``x[B, L, C]``.

    ``kernel[j]`` (shape ``[C, C']``) weights ``x[:, t - j*dilation]``; the
    input is left-padded with zeros so the output keeps length ``L``.
    """
    x = _as_tensor(x)
    if kernel.data.ndim != 3:
        raise DimensionError(f"conv1d: kernel must be [k, C, C'], got {kernel.shape}")
    k, cin, cout = kernel.shape
    if k < 1 or dilation < 1:
        raise ConfigError(f"conv1d: need kernel size >= 1 and dilation >= 1, got k={k}, dilation={dilation}")
    if x.data.ndim != 3 or x.shape[2] != cin:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernel {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv1d: bias {bias.shape} does not match kernel {kernel.shape}")
    B, L, _ = x.shape
    pad = (k - 1) * dilation
    if pad:
        xp = np.zeros((B, L + pad, cin))
        xp[:, pad:] = x.data
    else:
        xp = x.data
    offsets = [pad - j * dilation for j in range(k)]
    cols = np.concatenate([xp[:, o:o + L] for o in offsets], axis=-1).reshape(B * L, k * cin)
    wmat = kernel.data.reshape(k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, L, cout)

    def bw(g):
        g2 = g.reshape(B * L, cout)
        gk = (cols.T @ g2).reshape(k, cin, cout) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, L, k * cin)
            gxp = np.zeros((B, L + pad, cin))
            for j, o in enumerate(offsets):
                gxp[:, o:o + L] += gcols[..., j * cin:(j + 1) * cin]
            gx = gxp[:, pad:]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv1d", out, inputs, bw)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd  # float ** is ~50x slower than multiplying
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _emit("gelu", out, (x,), bw)


activation = gelu


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def mask_time(x, keep: np.ndarray) -> Tensor:
    """Multiply ``x[B, L, C]`` by a constant ``keep[B, L]`` (0 zeroes a timestamp)."""
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape != x.shape[:-1]:
        raise DimensionError(f"mask_time: mask {keep.shape} does not match {x.shape}")
    k3 = keep[..., None]
    return _emit("mask_time", x.data * k3, (x,), lambda g: (g * k3,))


def l2_normalize(v) -> Tensor:
    """Scale each vector along the last axis to unit l2 norm."""
    v = _as_tensor(v)
    n = np.sqrt(np.sum(v.data * v.data, axis=-1, keepdims=True))
    if np.any(n <= EPS_NORM):
        raise DegenerateVectorError(
            f"l2_normalize: {int(np.sum(n <= EPS_NORM))} vector(s) with norm <= {EPS_NORM:g} "
            "(representation may have collapsed)"
        )
    u = v.data / n

    def bw(g):
        return ((g - u * np.sum(g * u, axis=-1, keepdims=True)) / n,)

    return _emit("l2_normalize", u, (v,), bw)


def sq_norm(x) -> Tensor:
    """Squared l2 norm along the last axis."""
    x = _as_tensor(x)
    xd = x.data
    return _emit("sq_norm", np.sum(xd * xd, axis=-1), (x,), lambda g: (2.0 * xd * g[..., None],))


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
        return _emit("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))
    axis = axis % x.data.ndim
    n = x.shape[axis]

    def bw(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _emit("mean_axis", x.data.mean(axis=axis), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def slice_time(x, start: int, stop: int) -> Tensor:
    """``x[:, start:stop]`` on a ``[B, L, ...]`` tensor."""
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_time: [{start}, {stop}) outside length {x.shape[1]}")

    def bw(g):
        gx = np.zeros(x.shape)
        gx[:, start:stop] = g
        return (gx,)

    return _emit("slice_time", x.data[:, start:stop], (x,), bw)


# ----------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction. Zeroes gradients after every step."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        ids = [p.id for p in params]
        if len(set(ids)) != len(ids):
            raise ContractError("Adam: parameter ids must be unique")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {p.id: np.zeros_like(p.data) for p in self.params}
        self.v = {p.id: np.zeros_like(p.data) for p in self.params}
        self.step_count = 0

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDivergenceError(f"non-finite gradient in parameter {p.id!r}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p in self.params:
            g = p.grad
            m = self.m[p.id] = b1 * self.m[p.id] + (1.0 - b1) * g
            v = self.v[p.id] = b2 * self.v[p.id] + (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def adam_step(params: Sequence[Param], state: Adam) -> Adam:
    """Functional spelling of ``state.step()`` for callers holding an explicit state."""
    if [p.id for p in params] != [p.id for p in state.params]:
        raise ContractError("adam_step: parameter list does not match optimizer state")
    state.step()
    return state
