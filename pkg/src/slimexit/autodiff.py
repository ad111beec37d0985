"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every operation evaluates eagerly at construction time and records enough
context to run an exact backward pass.  The op vocabulary is deliberately
small: just what a post-layer-norm transformer encoder with linear exit
heads needs, plus a backward-only gradient rescaling op used to average
gradients over downstream exit losses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_ids = itertools.count()

LAYER_NORM_EPS = 1e-12
MASK_FILL = -1e9


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A node's forward value contains NaN or Inf."""


@dataclass
class OpRule:
    forward: Callable
    backward: Callable


#: kind -> OpRule, filled in at import time below.
PRIMITIVES: dict[str, OpRule] = {}


def _register(kind):
    def deco(cls):
        PRIMITIVES[kind] = OpRule(cls.forward, cls.backward)
        return cls

    return deco


class Tensor:
    """A node in the computation graph.

    Leaves hold parameters or data; interior nodes record the primitive op
    that produced them, their parent nodes, and any cached context the
    backward rule needs.  `grad` stays None until `backward` reaches the
    node, and accumulates across repeated backward calls until `zero_grad`.
    """

    __slots__ = ("value", "grad", "kind", "parents", "attrs", "ctx",
                 "requires_grad", "id", "name")

    def __init__(self, value, requires_grad=True, *, kind="leaf", parents=(),
                 attrs=None, ctx=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.kind = kind
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-accumulate gradients of this scalar into every leaf.

        Visits each reachable node exactly once in reverse topological
        order.  Leaf gradients accumulate across calls until `zero_grad`;
        interior-node gradients are cleared on entry, so several losses
        hanging off one shared graph can be backwarded independently.
        """
        if self.value.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.value.shape}")
        order = _toposort(self)
        for node in order:
            if node.kind != "leaf":
                node.grad = None
        self._accumulate(np.asarray(1.0))
        for node in reversed(order):
            if node.kind == "leaf" or node.grad is None:
                continue
            rule = PRIMITIVES[node.kind]
            grads = rule.backward(node.ctx, node.grad,
                                  *[p.value for p in node.parents],
                                  **node.attrs)
            for parent, g in zip(node.parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)

    def __repr__(self):
        return f"Tensor(id={self.id}, kind={self.kind}, shape={self.shape})"

    # Operator sugar used throughout model building and tests.
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; graphs for deep models overflow the recursion limit.
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def _sum_to_shape(g, shape):
    """Undo numpy broadcasting: reduce `g` back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(kind, parents, out, ctx=None, attrs=None):
    req = any(p.requires_grad for p in parents)
    return Tensor(out, requires_grad=req, kind=kind, parents=parents,
                  ctx=ctx, attrs=attrs)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


# ---------------------------------------------------------------------------
# primitive op rules
# ---------------------------------------------------------------------------

@_register("matmul")
class _MatMul:
    @staticmethod
    def forward(ctx, a, b):
        return a @ b

    @staticmethod
    def backward(ctx, g, a, b):
        ga = _sum_to_shape(g @ np.swapaxes(b, -1, -2), a.shape)
        gb = _sum_to_shape(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


@_register("add")
class _Add:
    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, g, a, b):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)


@_register("scale")
class _Scale:
    @staticmethod
    def forward(ctx, a, factor):
        return factor * a

    @staticmethod
    def backward(ctx, g, a, factor):
        return (factor * g,)


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(ctx, a, axes):
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g, a, axes):
        return (np.transpose(g, np.argsort(axes)),)


@_register("row-softmax")
class _RowSoftmax:
    @staticmethod
    def forward(ctx, a):
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, g, a):
        y = ctx["y"]
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@_register("layer-norm")
class _LayerNorm:
    # Normalizes the last axis with biased variance and eps=1e-12.
    @staticmethod
    def forward(ctx, x, gain, bias):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
        xhat = xc * inv
        ctx["xhat"], ctx["inv"] = xhat, inv
        return gain * xhat + bias

    @staticmethod
    def backward(ctx, g, x, gain, bias):
        xhat, inv = ctx["xhat"], ctx["inv"]
        ggain = _sum_to_shape(g * xhat, gain.shape)
        gbias = _sum_to_shape(g, bias.shape)
        dxhat = g * gain
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggain, gbias


_GELU_C = np.sqrt(2.0 / np.pi)


@_register("gelu")
class _Gelu:
    # tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
    @staticmethod
    def forward(ctx, x):
        u = _GELU_C * (x + 0.044715 * x ** 3)
        t = np.tanh(u)
        ctx["t"] = t
        return 0.5 * x * (1.0 + t)

    @staticmethod
    def backward(ctx, g, x):
        t = ctx["t"]
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


@_register("relu")
class _Relu:
    @staticmethod
    def forward(ctx, x):
        return np.maximum(x, 0.0)

    @staticmethod
    def backward(ctx, g, x):
        return (g * (x > 0.0),)


@_register("embedding-lookup")
class _EmbeddingLookup:
    @staticmethod
    def forward(ctx, table, ids):
        return table[ids]

    @staticmethod
    def backward(ctx, g, table, ids):
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g)
        return (gt,)


@_register("gather-first-token")
class _GatherFirstToken:
    # (batch, seq, H) -> (batch, H), reading sequence position 0.
    @staticmethod
    def forward(ctx, x):
        return x[:, 0]

    @staticmethod
    def backward(ctx, g, x):
        gx = np.zeros_like(x)
        gx[:, 0] = g
        return (gx,)


@_register("soft-cross-entropy")
class _SoftCrossEntropy:
    # mean over rows of -sum(target_probs * log_softmax(logits))
    @staticmethod
    def forward(ctx, probs, logits):
        z = logits - logits.max(axis=-1, keepdims=True)
        logq = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        ctx["logq"] = logq
        rows = probs.shape[0]
        ctx["rows"] = rows
        return np.asarray(-(probs * logq).sum() / rows)

    @staticmethod
    def backward(ctx, g, probs, logits):
        logq, rows = ctx["logq"], ctx["rows"]
        q = np.exp(logq)
        scale_g = g / rows
        gp = -logq * scale_g
        gl = (q * probs.sum(axis=-1, keepdims=True) - probs) * scale_g
        return gp, gl


@_register("mean-squared-error")
class _MeanSquaredError:
    @staticmethod
    def forward(ctx, a, b):
        d = a - b
        ctx["d"] = d
        return np.asarray((d * d).mean())

    @staticmethod
    def backward(ctx, g, a, b):
        gd = (2.0 / ctx["d"].size) * ctx["d"] * g
        return gd, -gd


@_register("sum")
class _Sum:
    @staticmethod
    def forward(ctx, a):
        return np.asarray(a.sum())

    @staticmethod
    def backward(ctx, g, a):
        return (np.full_like(a, g),)


@_register("concat-rows")
class _ConcatRows:
    @staticmethod
    def forward(ctx, *parts):
        ctx["sizes"] = [p.shape[0] for p in parts]
        return np.concatenate(parts, axis=0)

    @staticmethod
    def backward(ctx, g, *parts):
        out, at = [], 0
        for size in ctx["sizes"]:
            out.append(g[at:at + size])
            at += size
        return tuple(out)


@_register("mask-columns")
class _MaskColumns:
    # Masked entries are forced to MASK_FILL so a following row-softmax
    # assigns them vanishing weight; their gradient is exactly zero.
    @staticmethod
    def forward(ctx, x, keep):
        return np.where(keep, x, MASK_FILL)

    @staticmethod
    def backward(ctx, g, x, keep):
        return (_sum_to_shape(g * keep, x.shape),)


@_register("grad-scale")
class _GradScale:
    # Identity on forward; multiplies the incoming adjoint on backward.
    # Lets one backward pass realize per-depth averaging of exit losses.
    @staticmethod
    def forward(ctx, x, factor):
        return x

    @staticmethod
    def backward(ctx, g, x, factor):
        return (factor * g,)


# ---------------------------------------------------------------------------
# graph construction helpers
# ---------------------------------------------------------------------------

def _check(cond, kind, *shapes):
    if not cond:
        raise ShapeError(f"{kind}: incompatible shapes {list(shapes)}")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.value.ndim >= 2 and b.value.ndim >= 2, "matmul", a.shape, b.shape)
    _check(a.shape[-1] == b.shape[-2], "matmul", a.shape, b.shape)
    return _node("matmul", (a, b), PRIMITIVES["matmul"].forward(None, a.value, b.value))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: incompatible shapes [{a.shape}, {b.shape}]") from None
    return _node("add", (a, b), out)


def scale(a, factor):
    a = _as_tensor(a)
    return _node("scale", (a,), factor * a.value, attrs={"factor": float(factor)})


def transpose(a, axes):
    a = _as_tensor(a)
    _check(len(axes) == a.value.ndim, "transpose", a.shape)
    axes = tuple(axes)
    return _node("transpose", (a,), np.transpose(a.value, axes), attrs={"axes": axes})


def row_softmax(a):
    a = _as_tensor(a)
    _check(a.value.ndim >= 1, "row-softmax", a.shape)
    ctx = {}
    return _node("row-softmax", (a,), PRIMITIVES["row-softmax"].forward(ctx, a.value), ctx=ctx)


def layer_norm(x, gain, bias):
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    _check(gain.shape == (x.shape[-1],) and bias.shape == (x.shape[-1],),
           "layer-norm", x.shape, gain.shape, bias.shape)
    ctx = {}
    out = PRIMITIVES["layer-norm"].forward(ctx, x.value, gain.value, bias.value)
    return _node("layer-norm", (x, gain, bias), out, ctx=ctx)


def gelu(x):
    x = _as_tensor(x)
    ctx = {}
    return _node("gelu", (x,), PRIMITIVES["gelu"].forward(ctx, x.value), ctx=ctx)


def relu(x):
    x = _as_tensor(x)
    return _node("relu", (x,), np.maximum(x.value, 0.0))


def embedding_lookup(table, ids):
    table = _as_tensor(table)
    ids = np.asarray(ids)
    _check(table.value.ndim == 2, "embedding-lookup", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding-lookup: id out of range for table {table.shape}")
    return _node("embedding-lookup", (table,), table.value[ids], attrs={"ids": ids})


def gather_first_token(x):
    x = _as_tensor(x)
    _check(x.value.ndim >= 2, "gather-first-token", x.shape)
    return _node("gather-first-token", (x,), x.value[:, 0])


def soft_cross_entropy(target_probs, logits):
    target_probs, logits = _as_tensor(target_probs), _as_tensor(logits)
    _check(target_probs.shape == logits.shape and logits.value.ndim == 2,
           "soft-cross-entropy", target_probs.shape, logits.shape)
    ctx = {}
    out = PRIMITIVES["soft-cross-entropy"].forward(ctx, target_probs.value, logits.value)
    return _node("soft-cross-entropy", (target_probs, logits), out, ctx=ctx)


def mean_squared_error(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.shape == b.shape, "mean-squared-error", a.shape, b.shape)
    ctx = {}
    out = PRIMITIVES["mean-squared-error"].forward(ctx, a.value, b.value)
    return _node("mean-squared-error", (a, b), out, ctx=ctx)


def reduce_sum(a):
    a = _as_tensor(a)
    return _node("sum", (a,), np.asarray(a.value.sum()))


def concat_rows(parts):
    parts = [_as_tensor(p) for p in parts]
    _check(len(parts) >= 1, "concat-rows")
    _check(len({p.shape[1:] for p in parts}) == 1, "concat-rows",
           *[p.shape for p in parts])
    ctx = {}
    out = PRIMITIVES["concat-rows"].forward(ctx, *[p.value for p in parts])
    return _node("concat-rows", tuple(parts), out, ctx=ctx)


def mask_columns(x, keep):
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    try:
        out = np.where(keep, x.value, MASK_FILL)
    except ValueError:
        raise ShapeError(f"mask-columns: mask {keep.shape} does not broadcast "
                         f"over {x.shape}") from None
    _check(out.shape == x.value.shape, "mask-columns", x.shape, keep.shape)
    return _node("mask-columns", (x,), out, attrs={"keep": keep})


def grad_scale(x, factor):
    x = _as_tensor(x)
    return _node("grad-scale", (x,), x.value, attrs={"factor": float(factor)})


def zero_all_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def check_finite(root: Tensor):
    """Raise NonFiniteError naming the first node with a NaN/Inf value."""
    for node in _toposort_all(root):
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteError(
                f"non-finite value at node id={node.id} kind={node.kind}")


def _toposort_all(root):
    order, seen, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(node.parents)
    return order


def grad_check(builder, point, step=1e-6):
    """Compare analytic and central-difference gradients.

    `builder` maps a dict of leaf Tensors (keyed like `point`) to a scalar
    Tensor.  Returns the max over leaves and coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = {k: Tensor(v) for k, v in point.items()}
    loss = builder(leaves)
    check_finite(loss)
    loss.backward()
    worst = 0.0
    for key, leaf in leaves.items():
        base = np.array(point[key], dtype=np.float64)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            for sign, store in ((+1, "hi"), (-1, "lo")):
                perturbed = dict(point)
                bumped = base.copy()
                bumped[idx] += sign * step
                perturbed[key] = bumped
                val = builder({k: Tensor(v) for k, v in perturbed.items()}).value
                if store == "hi":
                    hi = float(val)
                else:
                    lo = float(val)
            numeric = (hi - lo) / (2 * step)
            err = abs(float(analytic[idx]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def dump_graph(root: Tensor) -> str:
    """One line per node: id, kind, shape and parent ids, leaves first."""
    lines = []
    for node in reversed(_toposort_all(root)):
        parents = ",".join(str(p.id) for p in node.parents) or "-"
        name = f" name={node.name}" if node.name else ""
        lines.append(f"node {node.id} kind={node.kind} shape={node.shape} "
                     f"parents={parents}{name}")
    return "\n".join(lines) + "\n"
