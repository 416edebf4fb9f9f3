"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation whose inputs include a tracked
tensor. Tensors created outside a tape (or produced only from untracked
inputs) are detached: operations on them compute values but record nothing
and they never receive gradients.

    tape = Tape()
    x = tape.watch(np.ones(3))
    loss = l2_norm_sq(x)
    backward(tape, loss)
    x.grad  # -> array([2., 2., 2.])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from gradforge import kernels

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""

    def __init__(self, op: str, expected, got):
        self.op = op
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: expected {expected}, got {got}")


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "grad", "node_id", "tape", "name")

    def __init__(self, data, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: int
    backward: Optional[Callable]  # grad_out -> tuple of input grads (None to skip)


class Tape:
    """Append-only record of operations; supports a single backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.tensors: list[Tensor] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def watch(self, value, name: Optional[str] = None) -> Tensor:
        """Create a tracked leaf tensor over ``value`` (no copy is made)."""
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data, name=name)
        self._register(t, "leaf", (), None)
        return t

    def _register(self, t: Tensor, op, inputs, backward_fn):
        if self.consumed:
            raise TapeError("tape already consumed by backward; record a new forward pass")
        t.tape = self
        t.node_id = len(self.tensors)
        self.tensors.append(t)
        self.nodes.append(Node(op, inputs, t.node_id, backward_fn))


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out``; record on the tape shared by the tracked inputs, if any."""
    result = Tensor(out)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError(f"{op}: inputs belong to different tapes")
            tape = t.tape
    if tape is not None:
        ids = tuple(t.node_id if t.tape is not None else None for t in inputs)
        tape._register(result, op, ids, backward_fn)
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor recorded on ``tape``.

    Gradients flowing into a tensor from several consumers are summed in
    reverse recording order, which makes the result deterministic.
    """
    if loss.tape is not tape:
        raise TapeError("loss was not produced on this tape")
    if loss.size != 1:
        raise ShapeError("backward", "scalar loss", loss.shape)
    if tape.consumed:
        raise TapeError("backward already run on this tape")
    tape.consumed = True

    grads: list = [None] * len(tape.tensors)
    grads[loss.node_id] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads[node.output]
        if g is None or node.backward is None:
            continue
        in_grads = node.backward(g)
        for nid, gi in zip(node.inputs, in_grads):
            if nid is None or gi is None:
                continue
            if grads[nid] is None:
                grads[nid] = gi
            else:
                grads[nid] = grads[nid] + gi
    for t, g in zip(tape.tensors, grads):
        t.grad = np.zeros_like(t.data) if g is None else g.reshape(t.data.shape)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a: Tensor, b: Tensor):
    if a.shape == b.shape or b.size == 1 or a.size == 1:
        return
    raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # maximum keeps NaN visible so divergence is not masked
    return _record("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _record("mean", (x,), np.array(x.data.mean()),
                   lambda g: (np.full(shape, float(g) / n),))


def l2_norm_sq(x: Tensor, batch_mean: bool = False) -> Tensor:
    """Sum of squares; divided by the leading dimension if ``batch_mean``."""
    d = x.data
    denom = d.shape[0] if (batch_mean and d.ndim > 0) else 1
    val = np.array(np.sum(d * d) / denom)
    return _record("l2_norm_sq", (x,), val, lambda g: (g * (2.0 / denom) * d,))


# ------------------------------------------------------------------ conv net


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """NHWC convolution with zero same-padding; ``w`` is [k, k, Cin, Cout]."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d", "x of rank 4 [N,H,W,C]", x.shape)
    if w.data.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] not in (1, 3):
        raise ShapeError("conv2d", "w of shape [k,k,Cin,Cout] with k in {1,3}", w.shape)
    if stride not in (1, 2):
        raise ShapeError("conv2d", "stride in {1,2}", stride)
    n, h, wd, cin = x.shape
    k, _, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError("conv2d", f"w input channels == {cin}", wcin)
    if b.shape != (cout,):
        raise ShapeError("conv2d", f"bias of shape ({cout},)", b.shape)

    ho, pad_h = kernels.same_padding(h, k, stride)
    wo, pad_w = kernels.same_padding(wd, k, stride)
    cols = kernels.im2col(x.data, k, stride, pad_h, pad_w, ho, wo)
    cols2 = cols.reshape(n * ho * wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = (cols2 @ wmat + b.data).reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if x.tracked:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, cin)
            gx = kernels.col2im(gcols, h, wd, stride, pad_h, pad_w)
        if w.tracked:
            gw = (cols2.T @ g2).reshape(w.shape)
        if b.tracked:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _record("conv2d", (x, w, b), out, back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", "rank 4 [N,H,W,C]", x.shape)
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))
    return _record("global_avg_pool", (x,), out,
                   lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c)).copy(),))


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError("softmax", "[N,K] with K >= 2", logits.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax", (logits,), p, back)


def _check_labels(op, probs: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if probs.data.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(op, f"probs [N,K] and labels [N]", (probs.shape, labels.shape))
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"{op}: labels must lie in [0, {k})")
    return labels.astype(np.int64)


def pick(probs: Tensor, labels) -> Tensor:
    """Per-row probability of the labelled class, shape [N]."""
    labels = _check_labels("pick", probs, labels)
    rows = np.arange(labels.size)
    shape = probs.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, labels] = g
        return (out,)

    return _record("pick", (probs,), probs.data[rows, labels], back)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Batch mean of -log p[label], with p floored at 1e-12."""
    labels = _check_labels("cross_entropy", probs, labels)
    n = labels.size
    rows = np.arange(n)
    p = probs.data[rows, labels]
    floored = np.maximum(p, PROB_FLOOR)
    val = np.array(-np.log(floored).sum() / n)
    shape = probs.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, labels] = np.where(p > PROB_FLOOR, -float(g) / (n * floored), 0.0)
        return (out,)

    return _record("cross_entropy", (probs,), val, back)


# ------------------------------------------------------------------ checking


def check_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                   indices: Optional[Sequence[int]] = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|analytic - fd| / max(1, |fd|)``. ``indices`` restricts the
    comparison to selected flat coordinates.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(base)
    loss = f(xt)
    backward(tape, loss)
    analytic = xt.grad.reshape(-1)

    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xp[i] += h
        fp = f(Tensor(xp.reshape(base.shape))).item()
        xm = flat.copy()
        xm[i] -= h
        fm = f(Tensor(xm.reshape(base.shape))).item()
        fd = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst
