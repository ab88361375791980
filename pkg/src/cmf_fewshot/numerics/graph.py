"""Tape-based reverse-mode differentiation over a closed set of array ops.

A :class:`Graph` records every op call as a node, in execution order, so the
node list is already a topological order. Values are plain numpy arrays
(row-major, NCHW for images). Ops run eagerly when called; the recorded tape
can be replayed on new inputs with :meth:`Graph.forward`.

Only the ops registered in :data:`OPS` exist. There is no general
broadcasting: every op checks its operand shapes and raises
:class:`ShapeError` naming the node that failed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


class GraphError(Exception):
    """Base class for errors raised while building or running a graph."""


class ShapeError(GraphError):
    """Operand shapes do not match what the op expects."""


class NonFiniteError(GraphError):
    """A checked graph produced NaN or Inf."""


class NotScalarError(GraphError):
    """``backward`` was asked to differentiate a non-scalar node."""


@dataclass(eq=False)
class Node:
    index: int
    op: str
    inputs: Tuple["Node", ...]
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None
    trainable: bool = False
    requires_grad: bool = False
    ctx: Any = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index} {self.op}{label} shape={self.shape}>"


# ---------------------------------------------------------------------------
# op kernels: forward(values, attrs) -> (out, ctx)
#             backward(grad, values, out, ctx, attrs, needs) -> tuple of grads
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _conv2d_fwd(vals, attrs):
    x, w = vals[0], vals[1]
    stride, pad = attrs["stride"], attrs["pad"]
    k = w.shape[2]
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(w.shape[0], -1).T
    if len(vals) == 3:
        out += vals[2]
    out = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv2d_bwd(g, vals, out, cols, attrs, needs):
    x, w = vals[0], vals[1]
    stride, pad = attrs["stride"], attrs["pad"]
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
    grads: List[Optional[np.ndarray]] = [None] * len(vals)
    if needs[0]:
        dcols = (g2 @ w.reshape(co, -1)).reshape(n, ho, wo, c, k, k)
        dx = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        grads[0] = dx[:, :, pad : pad + h, pad : pad + wd] if pad else dx
    if needs[1]:
        grads[1] = (g2.T @ cols).reshape(w.shape)
    if len(vals) == 3 and needs[2]:
        grads[2] = g2.sum(axis=0)
    return tuple(grads)


def _linear_fwd(vals, attrs):
    out = vals[0] @ vals[1].T
    if len(vals) == 3:
        out = out + vals[2]
    return out, None


def _linear_bwd(g, vals, out, ctx, attrs, needs):
    x, w = vals[0], vals[1]
    grads = [
        g @ w if needs[0] else None,
        g.T @ x if needs[1] else None,
    ]
    if len(vals) == 3:
        grads.append(g.sum(axis=0) if needs[2] else None)
    return tuple(grads)


def _matmul_fwd(vals, attrs):
    return vals[0] @ vals[1], None


def _matmul_bwd(g, vals, out, ctx, attrs, needs):
    a, b = vals
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _relu_fwd(vals, attrs):
    return np.maximum(vals[0], 0), None


def _relu_bwd(g, vals, out, ctx, attrs, needs):
    return (g * (vals[0] > 0),)


def _sigmoid_fwd(vals, attrs):
    x = vals[0]
    return 0.5 * (np.tanh(0.5 * x) + 1), None


def _sigmoid_bwd(g, vals, y, ctx, attrs, needs):
    return (g * y * (1 - y),)


def _pool_views(x: np.ndarray, k: int):
    """Strided views, one per window offset in row-major (dy, dx) order."""
    h, w = x.shape[2] // k * k, x.shape[3] // k * k
    return [x[:, :, dy:h:k, dx:w:k] for dy in range(k) for dx in range(k)]


def _maxpool_fwd(vals, attrs):
    views = _pool_views(vals[0], attrs["k"])
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    return out, None


def _maxpool_bwd(g, vals, out, ctx, attrs, needs):
    # the first offset holding the max receives the gradient (argmax tie rule)
    x = vals[0]
    k = attrs["k"]
    dx = np.zeros(x.shape, dtype=g.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    h, w = x.shape[2] // k * k, x.shape[3] // k * k
    for dy in range(k):
        for dxo in range(k):
            hit = (x[:, :, dy:h:k, dxo:w:k] == out) & ~taken
            dx[:, :, dy:h:k, dxo:w:k] = np.where(hit, g, 0)
            taken |= hit
    return (dx,)


def _gmp_fwd(vals, attrs):
    x = vals[0]
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def _gmp_bwd(g, vals, out, arg, attrs, needs):
    x = vals[0]
    flat = np.zeros((x.shape[0], x.shape[1], x.shape[2] * x.shape[3]), dtype=g.dtype)
    np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
    return (flat.reshape(x.shape),)


def _mean_set_fwd(vals, attrs):
    # float64 accumulation keeps float32 set means order-independent
    x = vals[0]
    return x.mean(axis=0, dtype=np.float64).astype(x.dtype), None


def _mean_set_bwd(g, vals, out, ctx, attrs, needs):
    x = vals[0]
    return (np.broadcast_to(g / x.shape[0], x.shape).astype(g.dtype, copy=True),)


def _chan_view(s: np.ndarray, ndim: int) -> np.ndarray:
    return s.reshape((1, -1) + (1,) * (ndim - 2))


def _sum_but_channel(g: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def _chan_scale_fwd(vals, attrs):
    x, s = vals
    return x * _chan_view(s, x.ndim), None


def _chan_scale_bwd(g, vals, out, ctx, attrs, needs):
    x, s = vals
    return (
        g * _chan_view(s, x.ndim) if needs[0] else None,
        _sum_but_channel(g * x) if needs[1] else None,
    )


def _chan_shift_fwd(vals, attrs):
    x, b = vals
    return x + _chan_view(b, x.ndim), None


def _chan_shift_bwd(g, vals, out, ctx, attrs, needs):
    return (g if needs[0] else None, _sum_but_channel(g) if needs[1] else None)


def _add_fwd(vals, attrs):
    return vals[0] + vals[1], None


def _add_bwd(g, vals, out, ctx, attrs, needs):
    return (g if needs[0] else None, g if needs[1] else None)


def _add_const_fwd(vals, attrs):
    return vals[0] + vals[0].dtype.type(attrs["c"]), None


def _add_const_bwd(g, vals, out, ctx, attrs, needs):
    return (g,)


def _mul_const_fwd(vals, attrs):
    return vals[0] * vals[0].dtype.type(attrs["c"]), None


def _mul_const_bwd(g, vals, out, ctx, attrs, needs):
    return (g * g.dtype.type(attrs["c"]),)


def _reshape_fwd(vals, attrs):
    return vals[0].reshape(attrs["shape"]), None


def _reshape_bwd(g, vals, out, ctx, attrs, needs):
    return (g.reshape(vals[0].shape),)


def _sum_fwd(vals, attrs):
    return np.asarray(vals[0].sum(), dtype=vals[0].dtype), None


def _sum_bwd(g, vals, out, ctx, attrs, needs):
    return (np.full(vals[0].shape, g, dtype=g.dtype),)


def _l2n_fwd(vals, attrs):
    x = vals[0]
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + x.dtype.type(attrs["eps"]))
    return x / norm, norm


def _l2n_bwd(g, vals, y, norm, attrs, needs):
    return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)


def _xent_fwd(vals, attrs):
    logits = vals[0]
    labels = attrs["labels"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(len(labels)), labels].mean()
    return np.asarray(loss, dtype=logits.dtype), logp


def _xent_bwd(g, vals, out, logp, attrs, needs):
    labels = attrs["labels"]
    p = np.exp(logp)
    p[np.arange(len(labels)), labels] -= 1
    return (p * (g / len(labels)),)


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable


OPS: Dict[str, OpDef] = {
    "conv2d": OpDef(_conv2d_fwd, _conv2d_bwd),
    "linear": OpDef(_linear_fwd, _linear_bwd),
    "matmul": OpDef(_matmul_fwd, _matmul_bwd),
    "relu": OpDef(_relu_fwd, _relu_bwd),
    "sigmoid": OpDef(_sigmoid_fwd, _sigmoid_bwd),
    "max_pool2d": OpDef(_maxpool_fwd, _maxpool_bwd),
    "global_max_pool": OpDef(_gmp_fwd, _gmp_bwd),
    "mean_set": OpDef(_mean_set_fwd, _mean_set_bwd),
    "channel_scale": OpDef(_chan_scale_fwd, _chan_scale_bwd),
    "channel_shift": OpDef(_chan_shift_fwd, _chan_shift_bwd),
    "add": OpDef(_add_fwd, _add_bwd),
    "add_const": OpDef(_add_const_fwd, _add_const_bwd),
    "mul_const": OpDef(_mul_const_fwd, _mul_const_bwd),
    "reshape": OpDef(_reshape_fwd, _reshape_bwd),
    "sum": OpDef(_sum_fwd, _sum_bwd),
    "l2_normalize": OpDef(_l2n_fwd, _l2n_bwd),
    "softmax_cross_entropy": OpDef(_xent_fwd, _xent_bwd),
}


# ---------------------------------------------------------------------------
# shape rules, checked before an op runs
# ---------------------------------------------------------------------------


def _check_shapes(op: str, shapes: Sequence[Tuple[int, ...]], attrs: Mapping[str, Any]) -> None:
    def fail(msg: str) -> None:
        raise ShapeError(msg)

    if op == "conv2d":
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4:
            fail(f"conv2d expects 4-d input and kernel, got {x} and {w}")
        if x[1] != w[1]:
            fail(f"conv2d input has {x[1]} channels but kernel expects {w[1]}")
        if w[2] != w[3]:
            fail(f"conv2d kernel must be square, got {w[2]}x{w[3]}")
        if attrs["stride"] < 1 or attrs["pad"] < 0:
            fail("conv2d stride must be >= 1 and padding >= 0")
        if x[2] + 2 * attrs["pad"] < w[2] or x[3] + 2 * attrs["pad"] < w[3]:
            fail(f"conv2d kernel {w[2]}x{w[3]} larger than padded input {x[2:]}")
        if len(shapes) == 3 and shapes[2] != (w[0],):
            fail(f"conv2d bias shape {shapes[2]} != ({w[0]},)")
    elif op == "linear":
        x, w = shapes[0], shapes[1]
        if len(x) != 2 or len(w) != 2 or x[1] != w[1]:
            fail(f"linear expects [N, D] @ [O, D]^T, got {x} and {w}")
        if len(shapes) == 3 and shapes[2] != (w[0],):
            fail(f"linear bias shape {shapes[2]} != ({w[0]},)")
    elif op == "matmul":
        a, b = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            fail(f"matmul shapes {a} and {b} are not aligned")
    elif op == "max_pool2d":
        x, k = shapes[0], attrs["k"]
        if len(x) != 4 or x[2] % k or x[3] % k:
            fail(f"max_pool2d needs 4-d input with spatial dims divisible by {k}, got {x}")
    elif op == "global_max_pool":
        if len(shapes[0]) != 4:
            fail(f"global_max_pool expects 4-d input, got {shapes[0]}")
    elif op == "mean_set":
        if len(shapes[0]) < 1 or shapes[0][0] == 0:
            fail("mean over an empty set axis")
    elif op in ("channel_scale", "channel_shift"):
        x, s = shapes
        if len(x) < 2 or s != (x[1],):
            fail(f"{op} vector {s} does not match channel count of {x}")
    elif op == "add":
        if shapes[0] != shapes[1]:
            fail(f"add operands differ in shape: {shapes[0]} vs {shapes[1]}")
    elif op == "reshape":
        if int(np.prod(shapes[0])) != int(np.prod(attrs["shape"])):
            fail(f"cannot reshape {shapes[0]} to {attrs['shape']}")
    elif op == "l2_normalize":
        if len(shapes[0]) != 2:
            fail(f"l2_normalize expects [N, D], got {shapes[0]}")
    elif op == "softmax_cross_entropy":
        x = shapes[0]
        labels = attrs["labels"]
        if len(x) != 2 or len(labels) != x[0]:
            fail(f"softmax_cross_entropy: logits {x} vs {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= x[1]):
            fail("softmax_cross_entropy: label out of range")


class Graph:
    """Records op calls as nodes and differentiates scalar outputs.

    Args:
        dtype: ``"float32"`` (training) or ``"float64"`` (gradient checks).
        checked: raise :class:`NonFiniteError` as soon as any op output
            contains NaN or Inf.
        keep_ctx: keep per-node backward context (im2col buffers, argmax
            indices). Turn off for forward-only evaluation to save memory.
    """

    def __init__(self, dtype: str = "float32", checked: bool = False, keep_ctx: bool = True):
        if dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
        self.dtype = np.dtype(DTYPES[dtype])
        self.checked = checked
        self.keep_ctx = keep_ctx
        self.nodes: List[Node] = []
        self.inputs: Dict[str, Node] = {}
        self.params: Dict[str, Node] = {}

    # leaves ---------------------------------------------------------------

    def _leaf(self, op: str, value, name: Optional[str], trainable: bool) -> Node:
        arr = np.array(value, dtype=self.dtype, copy=True)
        arr.setflags(write=False)
        node = Node(len(self.nodes), op, (), arr, name=name, trainable=trainable, requires_grad=trainable)
        self.nodes.append(node)
        return node

    def input(self, name: str, value) -> Node:
        """Constant leaf; replaceable on :meth:`forward`."""
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        node = self._leaf("input", value, name, False)
        self.inputs[name] = node
        return node

    def const(self, value) -> Node:
        return self._leaf("const", value, None, False)

    def param(self, name: str, value) -> Node:
        """Trainable leaf; receives a gradient from :meth:`backward`."""
        if name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        node = self._leaf("param", value, name, True)
        self.params[name] = node
        return node

    # op application -------------------------------------------------------

    def _apply(self, op: str, inputs: Sequence[Node], name: Optional[str] = None, **attrs) -> Node:
        index = len(self.nodes)
        try:
            _check_shapes(op, [n.shape for n in inputs], attrs)
        except ShapeError as exc:
            label = f" {name!r}" if name else ""
            raise ShapeError(f"node #{index} ({op}{label}): {exc}") from None
        out, ctx = OPS[op].forward([n.value for n in inputs], attrs)
        out = np.asarray(out, dtype=self.dtype)
        if self.checked:
            self._check_finite(op, index, name, out)
        out.setflags(write=False)
        node = Node(
            index,
            op,
            tuple(inputs),
            out,
            attrs=attrs,
            name=name,
            requires_grad=any(n.requires_grad for n in inputs),
            ctx=ctx if self.keep_ctx else None,
        )
        self.nodes.append(node)
        return node

    @staticmethod
    def _check_finite(op: str, index: int, name: Optional[str], out: np.ndarray) -> None:
        bad = ~np.isfinite(out)
        if bad.any():
            where = tuple(int(i) for i in np.argwhere(bad)[0])
            label = f" {name!r}" if name else ""
            raise NonFiniteError(f"node #{index} ({op}{label}) produced {out[where]} at index {where}")

    def conv2d(self, x: Node, w: Node, b: Optional[Node] = None, stride: int = 1, pad: int = 0, name=None) -> Node:
        ins = [x, w] if b is None else [x, w, b]
        return self._apply("conv2d", ins, name, stride=int(stride), pad=int(pad))

    def linear(self, x: Node, w: Node, b: Optional[Node] = None, name=None) -> Node:
        """``x @ w.T + b`` for ``x`` [N, D] and ``w`` [O, D]."""
        ins = [x, w] if b is None else [x, w, b]
        return self._apply("linear", ins, name)

    def matmul(self, a: Node, b: Node, name=None) -> Node:
        return self._apply("matmul", [a, b], name)

    def relu(self, x: Node, name=None) -> Node:
        return self._apply("relu", [x], name)

    def sigmoid(self, x: Node, name=None) -> Node:
        return self._apply("sigmoid", [x], name)

    def max_pool2d(self, x: Node, k: int = 2, name=None) -> Node:
        return self._apply("max_pool2d", [x], name, k=int(k))

    def global_max_pool(self, x: Node, name=None) -> Node:
        return self._apply("global_max_pool", [x], name)

    def mean_set(self, x: Node, name=None) -> Node:
        """Mean over the leading (set) axis."""
        return self._apply("mean_set", [x], name)

    def channel_scale(self, x: Node, s: Node, name=None) -> Node:
        return self._apply("channel_scale", [x, s], name)

    def channel_shift(self, x: Node, b: Node, name=None) -> Node:
        return self._apply("channel_shift", [x, b], name)

    def add(self, a: Node, b: Node, name=None) -> Node:
        return self._apply("add", [a, b], name)

    def add_const(self, x: Node, c: float, name=None) -> Node:
        return self._apply("add_const", [x], name, c=float(c))

    def mul_const(self, x: Node, c: float, name=None) -> Node:
        return self._apply("mul_const", [x], name, c=float(c))

    def reshape(self, x: Node, shape: Sequence[int], name=None) -> Node:
        return self._apply("reshape", [x], name, shape=tuple(int(s) for s in shape))

    def sum(self, x: Node, name=None) -> Node:
        return self._apply("sum", [x], name)

    def l2_normalize(self, x: Node, eps: float = 1e-12, name=None) -> Node:
        return self._apply("l2_normalize", [x], name, eps=float(eps))

    def softmax_cross_entropy(self, logits: Node, labels, name=None) -> Node:
        """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
        labels = np.asarray(labels, dtype=np.int64)
        return self._apply("softmax_cross_entropy", [logits], name, labels=labels)

    # execution ------------------------------------------------------------

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every trainable leaf.

        Parameters the loss does not depend on get an all-zero gradient.
        """
        if loss.value.size != 1:
            raise NotScalarError(f"backward needs a scalar loss, got shape {loss.shape} at {loss!r}")
        if not self.keep_ctx:
            raise GraphError("graph was built with keep_ctx=False and cannot be differentiated")
        grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.inputs:
                if node.trainable and g is not None:
                    grads[node.index] = g
                continue
            needs = [n.requires_grad for n in node.inputs]
            if not any(needs):
                continue
            in_grads = OPS[node.op].backward(g, [n.value for n in node.inputs], node.value, node.ctx, node.attrs, needs)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.index in grads:
                    grads[inp.index] = grads[inp.index] + ig
                else:
                    grads[inp.index] = ig
        out = {}
        for name, node in self.params.items():
            g = grads.get(node.index)
            out[name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=self.dtype)
        return out

    def forward(self, inputs: Mapping[str, Any], outputs: Optional[Sequence[Node]] = None) -> Dict[str, np.ndarray]:
        """Replay the recorded tape with new input (and parameter) values.

        ``inputs`` may name any input or parameter leaf; leaves not named keep
        their recorded value. Returns the values of every named non-leaf node
        (or of ``outputs`` when given, keyed by name or ``#index``).
        """
        leaves = {**self.params, **self.inputs}
        unknown = set(inputs) - set(leaves)
        if unknown:
            raise GraphError(f"unknown graph inputs: {sorted(unknown)}")
        values: Dict[int, np.ndarray] = {}
        for node in self.nodes:
            if not node.inputs and node.op in ("input", "param", "const"):
                if node.name in inputs and node.op != "const":
                    v = np.asarray(inputs[node.name], dtype=self.dtype)
                    if v.shape != node.shape:
                        raise ShapeError(f"node #{node.index} ({node.op} {node.name!r}): expected {node.shape}, got {v.shape}")
                    values[node.index] = v
                else:
                    values[node.index] = node.value
                continue
            try:
                _check_shapes(node.op, [values[n.index].shape for n in node.inputs], node.attrs)
            except ShapeError as exc:
                raise ShapeError(f"node #{node.index} ({node.op}): {exc}") from None
            out, _ = OPS[node.op].forward([values[n.index] for n in node.inputs], node.attrs)
            out = np.asarray(out, dtype=self.dtype)
            if self.checked:
                self._check_finite(node.op, node.index, node.name, out)
            values[node.index] = out
        wanted = outputs if outputs is not None else [n for n in self.nodes if n.name and n.inputs]
        return {(n.name or f"#{n.index}"): values[n.index] for n in wanted}


def forward(graph: Graph, inputs: Mapping[str, Any], outputs: Optional[Sequence[Node]] = None) -> Dict[str, np.ndarray]:
    return graph.forward(inputs, outputs)


def backward(graph: Graph, loss: Node) -> Dict[str, np.ndarray]:
    return graph.backward(loss)
