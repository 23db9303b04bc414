"""Reverse-mode automatic differentiation over an explicitly recorded tape.

The primitive set covers exactly what the tiny vision transformer needs:
dense 2-d matrix ops plus patch extraction on rank-3 images.  Values are
stored as float32; reductions (matmul inner products, means, variances,
softmax normalizers) accumulate in float64 before rounding back, which keeps
finite-difference gradient checks tight at h=1e-3.

Tapes are single-use, single-thread objects.  Recorded arrays are treated as
immutable; callers must not mutate them afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LAYER_NORM_EPS = 1e-6
_GELU_C = 0.044715
_GELU_K = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """A primitive was applied to tensors with incompatible dims."""


class ContractError(ValueError):
    """An operation precondition was violated (e.g. non-scalar loss node)."""


@dataclass
class Node:
    op: str                  # "leaf" or a primitive name
    inputs: tuple[int, ...]
    value: np.ndarray        # float32
    attrs: dict
    ctx: tuple               # saved activations for the backward pass
    requires: bool           # gradient must flow into or through this node


class Tape:
    """Ordered record of primitive applications, rooted at one input tensor.

    Node ids are indices into ``nodes`` and are topologically ordered by
    construction.  ``root`` designates the input-image leaf that
    :func:`backward_to_input` differentiates with respect to.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.root: int | None = None

    def leaf(self, value: np.ndarray, *, watch: bool = False) -> int:
        arr = np.asarray(value, dtype=np.float32)
        self.nodes.append(Node("leaf", (), arr, {}, (), watch))
        return len(self.nodes) - 1

    def input_leaf(self, value: np.ndarray) -> int:
        """Record the designated input tensor (watched, set as root)."""
        nid = self.leaf(value, watch=True)
        self.root = nid
        return nid

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def apply(self, op: str, *inputs: int, **attrs) -> int:
        """Run one primitive forward and record it.

        ``op`` is one of matmul, add, scale, layer_norm, softmax, gelu,
        patchify, mean_pool, concat, slice.  Returns the new node id.
        """
        try:
            fwd, _ = _PRIMITIVES[op]
        except KeyError:
            raise ContractError(f"unknown primitive {op!r}") from None
        arrays = [self.nodes[i].value for i in inputs]
        out, ctx = fwd(attrs, arrays)
        requires = any(self.nodes[i].requires for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), out, attrs, ctx, requires))
        return len(self.nodes) - 1

    def backward(self, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Propagate seed gradients to every watched leaf they reach.

        Returns float64 gradients keyed by leaf node id.  Gradient flow is
        pruned at nodes whose subgraph contains no watched leaf.
        """
        grads: dict[int, np.ndarray] = {}
        for nid, seed in seeds.items():
            g = np.asarray(seed, dtype=np.float64)
            if g.shape != self.nodes[nid].value.shape:
                raise ShapeError(
                    f"backward: seed shape {g.shape} does not match node shape "
                    f"{self.nodes[nid].value.shape}"
                )
            grads[nid] = grads[nid] + g if nid in grads else g.copy()
        leaf_grads: dict[int, np.ndarray] = {}
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                leaf_grads[nid] = g
                continue
            need = [self.nodes[i].requires for i in node.inputs]
            if not any(need):
                continue
            _, vjp = _PRIMITIVES[node.op]
            arrays = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, vjp(node.attrs, node.ctx, g, arrays, need)):
                if gi is None:
                    continue
                grads[i] = grads[i] + gi if i in grads else gi
        return leaf_grads


def backward_to_input(tape: Tape, loss_node: int) -> np.ndarray:
    """Gradient of a scalar loss node with respect to the tape's root input."""
    value = tape.value(loss_node)
    if value.size != 1:
        raise ContractError(f"backward_to_input: loss node has shape {value.shape}, expected scalar")
    if tape.root is None:
        raise ContractError("backward_to_input: tape has no designated input node")
    grads = tape.backward({loss_node: np.ones_like(value, dtype=np.float64)})
    g = grads.get(tape.root)
    if g is None:
        g = np.zeros_like(tape.value(tape.root), dtype=np.float64)
    return g.astype(np.float32)


def finite_diff_gradient(evaluate, x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, accumulated in float64.

    Independent of the tape machinery; used as the oracle for backward passes.
    Non-finite evaluations propagate into the corresponding entries.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_gradient: h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float32)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] = np.float32(xp[i] + h)
        xm[i] = np.float32(xm[i] - h)
        denom = float(xp[i]) - float(xm[i])
        fp = float(evaluate(xp.reshape(x.shape)))
        fm = float(evaluate(xm.reshape(x.shape)))
        flat[i] = (fp - fm) / denom
    return grad


# ---------------------------------------------------------------------------
# primitive forward / vjp pairs
#
# forward: (attrs, arrays) -> (float32 output, ctx)
# vjp:     (attrs, ctx, float64 upstream grad, arrays, need) -> per-input grads
# ---------------------------------------------------------------------------


def _fwd_matmul(attrs, arrays):
    a, b = arrays
    tb = bool(attrs.get("transpose_b", False))
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    inner = b.shape[1] if tb else b.shape[0]
    if a.shape[1] != inner:
        raise ShapeError(
            f"matmul: inner dims differ, {a.shape} @ {b.shape}"
            + (" with transpose_b" if tb else "")
        )
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    out = a64 @ (b64.T if tb else b64)
    return out.astype(np.float32), (a64, b64)


def _vjp_matmul(attrs, ctx, g, arrays, need):
    a64, b64 = ctx
    tb = bool(attrs.get("transpose_b", False))
    ga = gb = None
    if need[0]:
        ga = g @ b64 if tb else g @ b64.T
    if need[1]:
        gb = g.T @ a64 if tb else a64.T @ g
    return ga, gb


def _is_bias(a, b):
    return a.ndim == 2 and (
        (b.ndim == 1 and b.shape[0] == a.shape[1])
        or (b.ndim == 2 and b.shape == (1, a.shape[1]))
    )


def _fwd_add(attrs, arrays):
    a, b = arrays
    if a.shape != b.shape and not _is_bias(a, b):
        raise ShapeError(f"add: incompatible dims {a.shape} and {b.shape}")
    return a + b, ()


def _vjp_add(attrs, ctx, g, arrays, need):
    a, b = arrays
    ga = g if need[0] else None
    gb = None
    if need[1]:
        gb = g.sum(axis=0).reshape(b.shape) if b.shape != a.shape else g
    return ga, gb


def _fwd_scale(attrs, arrays):
    (a,) = arrays
    return a * np.float32(attrs["factor"]), ()


def _vjp_scale(attrs, ctx, g, arrays, need):
    return (g * float(attrs["factor"]) if need[0] else None,)


def _fwd_layer_norm(attrs, arrays):
    x, gain, bias = arrays
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: expected x (m,n) with gain/bias (n,), got "
            f"{x.shape}, {gain.shape}, {bias.shape}"
        )
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = x64.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x64 - mu) * inv
    g64 = gain.astype(np.float64)
    out = (xhat * g64 + bias.astype(np.float64)).astype(np.float32)
    return out, (xhat, inv, g64)


def _vjp_layer_norm(attrs, ctx, g, arrays, need):
    xhat, inv, g64 = ctx
    gx = ggain = gbias = None
    if need[0]:
        dxhat = g * g64
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
    if need[1]:
        ggain = (g * xhat).sum(axis=0)
    if need[2]:
        gbias = g.sum(axis=0)
    return gx, ggain, gbias


def _fwd_softmax(attrs, arrays):
    (x,) = arrays
    if x.ndim != 2:
        raise ShapeError(f"softmax: expected 2-d input, got {x.shape}")
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)
    return s.astype(np.float32), (s,)


def _vjp_softmax(attrs, ctx, g, arrays, need):
    (s,) = ctx
    if not need[0]:
        return (None,)
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


def _fwd_gelu(attrs, arrays):
    (x,) = arrays
    x64 = x.astype(np.float64)
    th = np.tanh(_GELU_K * (x64 + _GELU_C * x64**3))
    return (0.5 * x64 * (1.0 + th)).astype(np.float32), (x64, th)


def _vjp_gelu(attrs, ctx, g, arrays, need):
    if not need[0]:
        return (None,)
    x64, th = ctx
    du = _GELU_K * (1.0 + 3.0 * _GELU_C * x64**2)
    return (g * (0.5 * (1.0 + th) + 0.5 * x64 * (1.0 - th**2) * du),)


def _fwd_patchify(attrs, arrays):
    (x,) = arrays
    ps = int(attrs["patch_size"])
    if x.ndim != 3:
        raise ShapeError(f"patchify: expected rank-3 image, got {x.shape}")
    h, w, c = x.shape
    if h % ps or w % ps:
        raise ShapeError(f"patchify: image {x.shape} not divisible by patch size {ps}")
    gh, gw = h // ps, w // ps
    out = x.reshape(gh, ps, gw, ps, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, ps * ps * c)
    return np.ascontiguousarray(out), (x.shape,)


def _vjp_patchify(attrs, ctx, g, arrays, need):
    if not need[0]:
        return (None,)
    ps = int(attrs["patch_size"])
    (h, w, c) = ctx[0]
    gh, gw = h // ps, w // ps
    gx = g.reshape(gh, gw, ps, ps, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
    return (np.ascontiguousarray(gx),)


def _fwd_mean_pool(attrs, arrays):
    (x,) = arrays
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"mean_pool: expected non-empty 2-d input, got {x.shape}")
    out = x.astype(np.float64).mean(axis=0, keepdims=True)
    return out.astype(np.float32), (x.shape[0],)


def _vjp_mean_pool(attrs, ctx, g, arrays, need):
    if not need[0]:
        return (None,)
    m = ctx[0]
    return (np.broadcast_to(g / m, (m, g.shape[1])).copy(),)


def _fwd_concat(attrs, arrays):
    axis = int(attrs.get("axis", 0))
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    off = 1 - axis
    if any(a.ndim != 2 for a in arrays) or len({a.shape[off] for a in arrays}) != 1:
        raise ShapeError(f"concat: incompatible dims {[a.shape for a in arrays]} on axis {axis}")
    return np.concatenate(arrays, axis=axis), (tuple(a.shape[axis] for a in arrays),)


def _vjp_concat(attrs, ctx, g, arrays, need):
    axis = int(attrs.get("axis", 0))
    (sizes,) = ctx
    out = []
    start = 0
    for size, needed in zip(sizes, need):
        sl = (slice(start, start + size),) if axis == 0 else (slice(None), slice(start, start + size))
        out.append(g[sl] if needed else None)
        start += size
    return tuple(out)


def _fwd_slice(attrs, arrays):
    (x,) = arrays
    if x.ndim != 2:
        raise ShapeError(f"slice: expected 2-d input, got {x.shape}")
    r0, r1 = attrs.get("rows") or (0, x.shape[0])
    c0, c1 = attrs.get("cols") or (0, x.shape[1])
    if not (0 <= r0 < r1 <= x.shape[0] and 0 <= c0 < c1 <= x.shape[1]):
        raise ShapeError(f"slice: bounds rows=({r0},{r1}) cols=({c0},{c1}) invalid for {x.shape}")
    return x[r0:r1, c0:c1].copy(), (x.shape, r0, r1, c0, c1)


def _vjp_slice(attrs, ctx, g, arrays, need):
    if not need[0]:
        return (None,)
    shape, r0, r1, c0, c1 = ctx
    gx = np.zeros(shape, dtype=np.float64)
    gx[r0:r1, c0:c1] = g
    return (gx,)


_PRIMITIVES = {
    "matmul": (_fwd_matmul, _vjp_matmul),
    "add": (_fwd_add, _vjp_add),
    "scale": (_fwd_scale, _vjp_scale),
    "layer_norm": (_fwd_layer_norm, _vjp_layer_norm),
    "softmax": (_fwd_softmax, _vjp_softmax),
    "gelu": (_fwd_gelu, _vjp_gelu),
    "patchify": (_fwd_patchify, _vjp_patchify),
    "mean_pool": (_fwd_mean_pool, _vjp_mean_pool),
    "concat": (_fwd_concat, _vjp_concat),
    "slice": (_fwd_slice, _vjp_slice),
}

PRIMITIVE_OPS = tuple(_PRIMITIVES)
