"""Reverse-mode automatic differentiation for the layer primitives.

The network forward pass is written once against an executor object. Two
executors exist:

* `GradTape` wraps every intermediate in a `Node`, records a backward
  closure, and can replay the chain in reverse to produce parameter
  gradients. One tape per forward pass; tapes are not reusable.
* `RawExec` runs the identical code path on bare numpy arrays for
  inference, guaranteeing that training and evaluation share forward
  semantics.

Gradients flow only where needed: a node requires grad iff any ancestor
does, and backward closures skip input-image gradients when nothing asks
for them.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractError


class Node:
    """A recorded value plus the recipe for its parents' gradients."""

    __slots__ = ("value", "requires_grad", "grad", "parents", "backward_fn")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn


def _value(x):
    return x.value if isinstance(x, Node) else x


class RawExec:
    """Executor that evaluates on plain arrays; no gradients, no recording."""

    def param(self, name, array):
        return array

    def input(self, array):
        return ops.validate_feature_map(array)

    def conv(self, x, w, b, spec):
        return ops.conv2d(x, w, b, spec)

    def dwsep(self, x, wd, wp, bd, bp):
        return ops.depthwise_separable_conv2d(x, wd, wp, bd, bp)

    def relu(self, x):
        return ops.relu(x)

    def add(self, a, b):
        if a.shape != b.shape:
            raise ContractError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return a + b

    def concat(self, parts):
        return np.concatenate(parts, axis=2)

    def maxpool(self, x):
        return ops.max_pool2d(x)

    def gap(self, x):
        return ops.global_avg_pool(x)


class GradTape:
    """Records one forward pass and computes gradients on demand.

    Parameters are registered through `param`; their gradients come back
    from `backward` keyed by the registered name.
    """

    def __init__(self):
        self._nodes = []
        self._params = {}

    # -- leaves ---------------------------------------------------------

    def param(self, name, array):
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        node = Node(np.asarray(array), requires_grad=True)
        self._params[name] = node
        self._nodes.append(node)
        return node

    def input(self, array):
        node = Node(ops.validate_feature_map(array), requires_grad=False)
        self._nodes.append(node)
        return node

    # -- recording helper ------------------------------------------------

    def _record(self, value, parents, backward_fn):
        req = any(p.requires_grad for p in parents)
        node = Node(value, requires_grad=req, parents=parents,
                    backward_fn=backward_fn if req else None)
        self._nodes.append(node)
        return node

    # -- operations -------------------------------------------------------

    def conv(self, x, w, b, spec):
        y = ops.conv2d(x.value, w.value, None if b is None else b.value, spec)
        parents = (x, w) if b is None else (x, w, b)

        def backward(dy):
            dx, dw, db = ops._conv_backward(
                x.value, w.value, spec, dy, need_dx=x.requires_grad)
            return (dx, dw) if b is None else (dx, dw, db)

        return self._record(y, parents, backward)

    def dwsep(self, x, wd, wp, bd, bp):
        h = ops._depthwise_forward(
            x.value, wd.value, None if bd is None else bd.value)
        y = ops._pointwise_forward(
            h, wp.value, None if bp is None else bp.value)
        parents = tuple(p for p in (x, wd, wp, bd, bp) if p is not None)

        def backward(dy):
            dh, dwp, dbp = ops._pointwise_backward(h, wp.value, dy)
            dx, dwd, dbd = ops._depthwise_backward(
                x.value, wd.value, dh, need_dx=x.requires_grad)
            grads = {id(x): dx, id(wd): dwd, id(wp): dwp}
            if bd is not None:
                grads[id(bd)] = dbd
            if bp is not None:
                grads[id(bp)] = dbp
            return tuple(grads[id(p)] for p in parents)

        return self._record(y, parents, backward)

    def relu(self, x):
        y = ops.relu(x.value)
        mask = y > 0

        def backward(dy):
            return (dy * mask,)

        return self._record(y, (x,), backward)

    def add(self, a, b):
        if a.value.shape != b.value.shape:
            raise ContractError(
                f"add shape mismatch: {a.value.shape} vs {b.value.shape}")

        def backward(dy):
            return (dy, dy)

        return self._record(a.value + b.value, (a, b), backward)

    def concat(self, parts):
        widths = [p.value.shape[2] for p in parts]
        y = np.concatenate([p.value for p in parts], axis=2)
        edges = np.cumsum([0] + widths)

        def backward(dy):
            return tuple(
                np.ascontiguousarray(dy[:, :, lo:hi])
                for lo, hi in zip(edges[:-1], edges[1:]))

        return self._record(y, tuple(parts), backward)

    def maxpool(self, x):
        ops.validate_feature_map(x.value)
        y, arg = ops._maxpool_forward(x.value)
        shape = x.value.shape

        def backward(dy):
            return (ops._maxpool_backward(shape, arg, dy),)

        return self._record(y, (x,), backward)

    def gap(self, x):
        m, n, _ = x.value.shape
        y = x.value.mean(axis=(0, 1))

        def backward(dy):
            return (np.broadcast_to(dy / (m * n), x.value.shape),)

        return self._record(y, (x,), backward)

    def softmax_cross_entropy(self, scores, true_index):
        """Fused -log softmax(scores)[true_index]; gradient is p - onehot."""
        s = np.asarray(scores.value, dtype=np.float64)
        if not 0 <= true_index < s.size:
            raise ContractError(
                f"class index {true_index} out of range for {s.size} scores")
        shifted = s - s.max()
        log_z = np.log(np.exp(shifted).sum())
        loss = log_z - shifted[true_index]
        p = np.exp(shifted - log_z)

        def backward(dy):
            g = p.copy()
            g[true_index] -= 1.0
            return (g * dy,)

        return self._record(np.float64(loss), (scores,), backward)

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss):
        """Accumulate d(loss)/d(param) for every registered parameter.

        Returns a dict name -> gradient array (zeros for parameters the
        loss does not depend on).
        """
        if not isinstance(loss, Node):
            raise ContractError("backward expects a Node recorded on this tape")
        if np.ndim(loss.value) != 0:
            raise ContractError("backward expects a scalar loss node")
        loss.grad = np.ones_like(loss.value, dtype=np.float64)
        for node in reversed(self._nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if isinstance(g, np.ndarray) else g
                else:
                    parent.grad = parent.grad + g
            node.grad = None  # free as we go
        out = {}
        for name, p in self._params.items():
            out[name] = (np.zeros_like(p.value) if p.grad is None else
                         np.asarray(p.grad))
        return out


def grad_check(loss_and_grads, params, eps=1e-5):
    """Compare analytic gradients against central finite differences.

    `loss_and_grads(params)` must return `(loss, grads)` where `grads` maps
    parameter names to arrays shaped like `params[name]`. Every element of
    every block is perturbed by ±eps. Returns a dict of per-block maxima of

        |analytic - numeric| / max(1e-8, |analytic| + |numeric|)

    All arithmetic is double precision.
    """
    work = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    _, analytic = loss_and_grads(work)
    report = {}
    for name, block in work.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != block.shape:
            raise ContractError(
                f"gradient block {name!r} has shape {a.shape}, expected {block.shape}")
        worst = 0.0
        flat = block.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            lo_hi = loss_and_grads(work)[0]
            flat[i] = keep - eps
            lo_lo = loss_and_grads(work)[0]
            flat[i] = keep
            numeric = (lo_hi - lo_lo) / (2.0 * eps)
            ana = a.reshape(-1)[i]
            rel = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            if rel > worst:
                worst = rel
        report[name] = worst
    return report
