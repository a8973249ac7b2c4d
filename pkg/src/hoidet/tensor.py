"""Dense float64 tensors (rank 0-3) with a reverse-mode gradient tape.

Every operation is a pure numpy kernel registered in ``OPS`` together with
its vector-Jacobian product. When an input is attached to a ``GradientTape``
the call is recorded; otherwise it just computes, which is the fast path
used at inference time. The op set is deliberately small and explicit: no
general broadcasting, only the documented shape combinations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, EvaluationError, ShapeError

_BCE_EPS = 1e-7
_LN_EPS = 1e-5


class Tensor:
    """Immutable float64 array value, optionally attached to a tape.

    ``shape`` is the usual numpy shape (rank 0 scalars are allowed as loss
    values); ``flat_data`` exposes the row-major storage.
    """

    __slots__ = ("array", "tape", "requires_grad")

    def __init__(self, array, tape: "GradientTape | None" = None,
                 requires_grad: bool = False):
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray
        # would promote them to rank 1)
        arr = np.asarray(array, dtype=np.float64, order="C")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max 3)")
        arr.flags.writeable = False
        self.array = arr
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.array.shape

    @property
    def ndim(self):
        return self.array.ndim

    @property
    def flat_data(self):
        return self.array.reshape(-1)

    def item(self) -> float:
        return float(self.array)

    def __repr__(self):
        return f"Tensor(shape={self.array.shape}, tape={self.tape is not None})"


def const(array) -> Tensor:
    """Wrap an array as an untracked constant."""
    return Tensor(array)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    kwargs: dict
    cache: tuple


class GradientTape:
    """Wengert list of executed ops supporting reverse-mode VJPs and replay."""

    def __init__(self):
        self._records: list[_Record] = []
        self._leaves: list[Tensor] = []

    def leaf(self, array) -> Tensor:
        t = Tensor(array, tape=self, requires_grad=True)
        self._leaves.append(t)
        return t

    @property
    def leaves(self):
        return list(self._leaves)

    def __len__(self):
        return len(self._records)

    def gradients(self, loss: Tensor) -> dict:
        """Adjoints of ``loss`` w.r.t. every leaf, keyed by leaf Tensor.

        Visits each recorded operation exactly once, in reverse order.
        """
        if loss.tape is not self:
            raise ValueError("loss was not computed on this tape")
        if loss.array.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.array.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for rec in reversed(self._records):
            g = adj.pop(id(rec.out), None)
            if g is None:
                continue
            input_grads = OPS[rec.op].backward(g, rec)
            for t, ig in zip(rec.inputs, input_grads):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adj:
                    adj[key] = adj[key] + ig
                else:
                    adj[key] = ig
        return {t: adj.get(id(t), np.zeros(t.shape)) for t in self._leaves}

    def replay_outputs(self) -> list:
        """Re-execute every recorded forward kernel on its stored inputs."""
        outs = []
        for rec in self._records:
            arrays = [t.array for t in rec.inputs]
            val, _ = OPS[rec.op].forward(*arrays, **rec.kwargs)
            outs.append(val)
        return outs

    def recorded_outputs(self) -> list:
        return [rec.out.array for rec in self._records]


@dataclass
class _Op:
    forward: Callable
    backward: Callable


OPS: dict[str, _Op] = {}


def _register(name):
    def deco(pair):
        fwd, bwd = pair()
        OPS[name] = _Op(fwd, bwd)
        return pair
    return deco


def _apply(name: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    tapes = {t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ValueError("inputs belong to different tapes")
    tape = tapes.pop() if tapes else None
    arrays = [t.array for t in inputs]
    out_arr, cache = OPS[name].forward(*arrays, **kwargs)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_arr, tape=tape, requires_grad=requires)
    if tape is not None and requires:
        tape._records.append(_Record(name, out, tuple(inputs), kwargs, cache))
    return out


# ---------------------------------------------------------------------------
# kernels


@_register("matmul")
def _op_matmul():
    def fwd(a, b):
        if a.ndim == 2 and b.ndim == 2:
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
        elif a.ndim == 3 and b.ndim == 2:
            if a.shape[2] != b.shape[0]:
                raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
        elif a.ndim == 3 and b.ndim == 3:
            if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
                raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
        else:
            raise ShapeError(f"matmul ranks not supported: {a.shape} @ {b.shape}")
        return a @ b, ()

    def bwd(g, rec):
        a, b = (t.array for t in rec.inputs)
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 3 and b.ndim == 2:
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[2]).T @ g.reshape(-1, g.shape[2])
            return ga, gb
        return g @ b.swapaxes(1, 2), a.swapaxes(1, 2) @ g

    return fwd, bwd


@_register("add")
def _op_add():
    def fwd(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add mismatch: {a.shape} vs {b.shape}")
        return a + b, ()

    def bwd(g, rec):
        return g, g

    return fwd, bwd


@_register("add_row")
def _op_add_row():
    # x[..., d] + v[d], the explicit bias form
    def fwd(x, v):
        if v.ndim != 1 or x.shape[-1] != v.shape[0]:
            raise ShapeError(f"add_row mismatch: {x.shape} + {v.shape}")
        return x + v, ()

    def bwd(g, rec):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return fwd, bwd


@_register("add_mat")
def _op_add_mat():
    # x[B, T, d] + m[T, d], per-slot offsets shared across the batch
    def fwd(x, m):
        if x.ndim != 3 or m.ndim != 2 or x.shape[1:] != m.shape:
            raise ShapeError(f"add_mat mismatch: {x.shape} + {m.shape}")
        return x + m, ()

    def bwd(g, rec):
        return g, g.sum(axis=0)

    return fwd, bwd


@_register("add_const")
def _op_add_const():
    def fwd(x, c=0.0):
        return x + c, ()

    def bwd(g, rec):
        return (g,)

    return fwd, bwd


@_register("scale")
def _op_scale():
    def fwd(x, c=1.0):
        return x * c, ()

    def bwd(g, rec):
        return (g * rec.kwargs["c"],)

    return fwd, bwd


@_register("mul")
def _op_mul():
    def fwd(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul mismatch: {a.shape} vs {b.shape}")
        return a * b, ()

    def bwd(g, rec):
        a, b = (t.array for t in rec.inputs)
        return g * b, g * a

    return fwd, bwd


@_register("relu")
def _op_relu():
    def fwd(x):
        return np.maximum(x, 0.0), ()

    def bwd(g, rec):
        return (g * (rec.inputs[0].array > 0.0),)

    return fwd, bwd


@_register("sigmoid")
def _op_sigmoid():
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, (out,)

    def bwd(g, rec):
        s = rec.cache[0]
        return (g * s * (1.0 - s),)

    return fwd, bwd


@_register("softmax")
def _op_softmax():
    # stabilized softmax along the trailing axis
    def fwd(x):
        m = x.max(axis=-1, keepdims=True)
        e = np.subtract(x, m)
        np.exp(e, out=e)
        s = e.sum(axis=-1, keepdims=True)
        np.divide(e, s, out=e)
        return e, ()

    def bwd(g, rec):
        s = rec.out.array
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return fwd, bwd


@_register("layer_norm")
def _op_layer_norm():
    # trailing-axis normalization with learnable gain/bias
    def fwd(x, gain, bias):
        if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
            raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} "
                             f"do not match input {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        y = np.subtract(x, mu)
        var = np.einsum("...i,...i->...", y, y)[..., None] / x.shape[-1]
        inv = 1.0 / np.sqrt(var + _LN_EPS)
        np.multiply(y, inv, out=y)
        out = y * gain
        out += bias
        return out, (y, inv)

    def bwd(g, rec):
        y, inv = rec.cache
        gain = rec.inputs[1].array
        gy = g * gain
        n = y.shape[-1]
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - y * (gy * y).mean(axis=-1, keepdims=True))
        lead = (-1, n)
        ggain = (g * y).reshape(lead).sum(axis=0)
        gbias = g.reshape(lead).sum(axis=0)
        return gx, ggain, gbias

    return fwd, bwd


@_register("split_heads")
def _op_split_heads():
    # (B, T, H*hd) -> (B*H, T, hd); rank 2 input folds to (H, T, hd)
    def fwd(x, heads=1):
        if x.shape[-1] % heads:
            raise ShapeError(f"width {x.shape[-1]} not divisible by "
                             f"{heads} heads")
        hd = x.shape[-1] // heads
        if x.ndim == 2:
            t = x.shape[0]
            return np.ascontiguousarray(
                x.reshape(t, heads, hd).transpose(1, 0, 2)), ()
        b, t = x.shape[0], x.shape[1]
        return np.ascontiguousarray(
            x.reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
            .reshape(b * heads, t, hd)), ()

    def bwd(g, rec):
        heads = rec.kwargs["heads"]
        shape = rec.inputs[0].shape
        hd = shape[-1] // heads
        if len(shape) == 2:
            return (np.ascontiguousarray(
                g.transpose(1, 0, 2)).reshape(shape),)
        b, t = shape[0], shape[1]
        return (np.ascontiguousarray(
            g.reshape(b, heads, t, hd).transpose(0, 2, 1, 3)).reshape(shape),)

    return fwd, bwd


@_register("merge_heads")
def _op_merge_heads():
    # (B*H, T, hd) -> (B, T, H*hd); batch=1 collapses to rank 2
    def fwd(x, heads=1, squeeze=False):
        bh, t, hd = x.shape
        if bh % heads:
            raise ShapeError(f"leading dim {bh} not divisible by {heads}")
        b = bh // heads
        out = np.ascontiguousarray(
            x.reshape(b, heads, t, hd).transpose(0, 2, 1, 3)
            .reshape(b, t, heads * hd))
        return (out[0] if squeeze else out), ()

    def bwd(g, rec):
        heads = rec.kwargs["heads"]
        bh, t, hd = rec.inputs[0].shape
        b = bh // heads
        g3 = g.reshape(b, t, heads * hd)
        return (np.ascontiguousarray(
            g3.reshape(b, t, heads, hd).transpose(0, 2, 1, 3))
            .reshape(bh, t, hd),)

    return fwd, bwd


@_register("transpose_last2")
def _op_transpose_last2():
    def fwd(x):
        if x.ndim == 2:
            return x.T.copy(), ()
        if x.ndim == 3:
            return x.swapaxes(1, 2).copy(), ()
        raise ShapeError(f"transpose_last2 needs rank 2 or 3, got {x.shape}")

    def bwd(g, rec):
        return (g.T.copy() if g.ndim == 2 else g.swapaxes(1, 2).copy(),)

    return fwd, bwd


@_register("reshape")
def _op_reshape():
    def fwd(x, shape=()):
        return x.reshape(shape).copy(), ()

    def bwd(g, rec):
        return (g.reshape(rec.inputs[0].shape),)

    return fwd, bwd


@_register("concat")
def _op_concat():
    def fwd(*xs, axis=-1):
        return np.concatenate(xs, axis=axis), ()

    def bwd(g, rec):
        axis = rec.kwargs.get("axis", -1)
        sizes = [t.array.shape[axis] for t in rec.inputs]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return fwd, bwd


@_register("take_rows")
def _op_take_rows():
    # gather along axis 0; idx is a constant integer array
    def fwd(x, idx=()):
        return x[np.asarray(idx, dtype=np.intp)], ()

    def bwd(g, rec):
        x = rec.inputs[0].array
        idx = np.asarray(rec.kwargs["idx"], dtype=np.intp)
        buf = np.zeros(x.shape)
        np.add.at(buf, idx, g)
        return (buf,)

    return fwd, bwd


@_register("index0")
def _op_index0():
    # select one slice along the leading axis: rank 3 -> rank 2
    def fwd(x, i=0):
        return x[i].copy(), ()

    def bwd(g, rec):
        buf = np.zeros(rec.inputs[0].shape)
        buf[rec.kwargs["i"]] = g
        return (buf,)

    return fwd, bwd


@_register("col")
def _op_col():
    def fwd(x, j=0):
        if x.ndim != 2:
            raise ShapeError(f"col needs rank 2, got {x.shape}")
        return x[:, j].copy(), ()

    def bwd(g, rec):
        buf = np.zeros(rec.inputs[0].shape)
        buf[:, rec.kwargs["j"]] = g
        return (buf,)

    return fwd, bwd


@_register("vsum")
def _op_vsum():
    def fwd(x):
        return np.asarray(x.sum()), ()

    def bwd(g, rec):
        return (np.full(rec.inputs[0].shape, float(g)),)

    return fwd, bwd


@_register("cosine_matrix")
def _op_cosine_matrix():
    # pairwise cosine similarity between row sets: (m,d) x (n,d) -> (m,n)
    def fwd(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ShapeError(f"cosine_matrix mismatch: {a.shape} vs {b.shape}")
        an = np.sqrt((a * a).sum(axis=1))
        bn = np.sqrt((b * b).sum(axis=1))
        for name, norms in (("left", an), ("right", bn)):
            bad = np.where(norms == 0.0)[0]
            if bad.size:
                raise DegenerateInputError(
                    f"zero-norm row {int(bad[0])} in {name} input of cosine_matrix")
        ah = a / an[:, None]
        bh = b / bn[:, None]
        return ah @ bh.T, (ah, bh, an, bn)

    def bwd(g, rec):
        ah, bh, an, bn = rec.cache
        c = rec.out.array
        ga = (g @ bh - (g * c).sum(axis=1, keepdims=True) * ah) / an[:, None]
        gb = (g.T @ ah - (g * c).sum(axis=0)[:, None] * bh) / bn[:, None]
        return ga, gb

    return fwd, bwd


@_register("ce_rows")
def _op_ce_rows():
    # per-row cross-entropy of softmax(logits) against integer targets
    def fwd(x, targets=()):
        t = np.asarray(targets, dtype=np.intp)
        m = x.max(axis=-1, keepdims=True)
        z = x - m
        lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
        return lse - x[np.arange(x.shape[0]), t], ()

    def bwd(g, rec):
        x = rec.inputs[0].array
        t = np.asarray(rec.kwargs["targets"], dtype=np.intp)
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        s = e / e.sum(axis=-1, keepdims=True)
        s[np.arange(x.shape[0]), t] -= 1.0
        return (s * g[:, None],)

    return fwd, bwd


@_register("bce_with_logits")
def _op_bce():
    # mean binary cross-entropy with probabilities clamped away from {0,1}
    def fwd(x, targets=()):
        t = np.asarray(targets, dtype=np.float64)
        if t.shape != x.shape:
            raise ShapeError(f"bce targets {t.shape} do not match logits {x.shape}")
        s = OPS["sigmoid"].forward(x)[0]
        p = np.clip(s, _BCE_EPS, 1.0 - _BCE_EPS)
        loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
        return np.asarray(loss.mean()), (s, p)

    def bwd(g, rec):
        s, p = rec.cache
        t = np.asarray(rec.kwargs["targets"], dtype=np.float64)
        gate = (s > _BCE_EPS) & (s < 1.0 - _BCE_EPS)
        dp = (-t / p + (1.0 - t) / (1.0 - p)) * gate
        return (float(g) * dp * s * (1.0 - s) / s.size,)

    return fwd, bwd


@_register("l1_to_const")
def _op_l1():
    def fwd(x, target=()):
        t = np.asarray(target, dtype=np.float64)
        if t.shape != x.shape:
            raise ShapeError(f"l1 target {t.shape} does not match {x.shape}")
        return np.asarray(np.abs(x - t).sum()), ()

    def bwd(g, rec):
        t = np.asarray(rec.kwargs["target"], dtype=np.float64)
        return (float(g) * np.sign(rec.inputs[0].array - t),)

    return fwd, bwd


# ---------------------------------------------------------------------------
# public op wrappers


def matmul(a, b) -> Tensor:
    """Matrix product; supports (m,k)@(k,n), (B,m,k)@(k,n) and batched 3x3."""
    return _apply("matmul", (_coerce(a), _coerce(b)))


def add(a, b) -> Tensor:
    return _apply("add", (_coerce(a), _coerce(b)))


def add_row(x, v) -> Tensor:
    return _apply("add_row", (_coerce(x), _coerce(v)))


def add_mat(x, m) -> Tensor:
    return _apply("add_mat", (_coerce(x), _coerce(m)))


def add_const(x, c: float) -> Tensor:
    return _apply("add_const", (_coerce(x),), c=float(c))


def scale(x, c: float) -> Tensor:
    return _apply("scale", (_coerce(x),), c=float(c))


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    return _apply("mul", (_coerce(a), _coerce(b)))


def relu(x) -> Tensor:
    return _apply("relu", (_coerce(x),))


def sigmoid(x) -> Tensor:
    return _apply("sigmoid", (_coerce(x),))


def softmax(x) -> Tensor:
    """Stable softmax along the trailing axis; rows sum to one."""
    return _apply("softmax", (_coerce(x),))


def layer_norm(x, gain, bias) -> Tensor:
    return _apply("layer_norm", (_coerce(x), _coerce(gain), _coerce(bias)))


def split_heads(x, heads: int) -> Tensor:
    """Fold attention heads into the leading batch axis."""
    return _apply("split_heads", (_coerce(x),), heads=int(heads))


def merge_heads(x, heads: int, squeeze: bool = False) -> Tensor:
    """Inverse of :func:`split_heads`; ``squeeze`` drops a unit batch dim."""
    return _apply("merge_heads", (_coerce(x),), heads=int(heads),
                  squeeze=bool(squeeze))


def transpose_last2(x) -> Tensor:
    return _apply("transpose_last2", (_coerce(x),))


def reshape(x, shape) -> Tensor:
    return _apply("reshape", (_coerce(x),), shape=tuple(shape))


def concat(xs, axis: int = -1) -> Tensor:
    return _apply("concat", tuple(_coerce(x) for x in xs), axis=axis)


def take_rows(x, idx) -> Tensor:
    return _apply("take_rows", (_coerce(x),), idx=tuple(int(i) for i in idx))


def index0(x, i: int) -> Tensor:
    return _apply("index0", (_coerce(x),), i=int(i))


def col(x, j: int) -> Tensor:
    return _apply("col", (_coerce(x),), j=int(j))


def vsum(x) -> Tensor:
    return _apply("vsum", (_coerce(x),))


def cosine_matrix(a, b) -> Tensor:
    """All-pairs cosine similarity between the rows of two matrices."""
    return _apply("cosine_matrix", (_coerce(a), _coerce(b)))


def cosine_similarity(u, v) -> Tensor:
    """Cosine similarity of two vectors; raises on zero-norm input."""
    u, v = _coerce(u), _coerce(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, "
                         f"got {u.shape} and {v.shape}")
    m = cosine_matrix(reshape(u, (1, u.shape[0])), reshape(v, (1, v.shape[0])))
    return reshape(m, ())


def ce_rows(logits, targets) -> Tensor:
    """Per-row softmax cross-entropy against integer class targets."""
    return _apply("ce_rows", (_coerce(logits),),
                  targets=tuple(int(t) for t in targets))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean clamped binary cross-entropy over every entry."""
    t = np.asarray(targets, dtype=np.float64)
    return _apply("bce_with_logits", (_coerce(logits),), targets=t)


def l1_to_const(x, target) -> Tensor:
    """Sum of absolute deviations from a constant target array."""
    t = np.asarray(target, dtype=np.float64)
    return _apply("l1_to_const", (_coerce(x),), target=t)


# ---------------------------------------------------------------------------
# verification


def gradient_check(f, theta, eps: float = 1e-5) -> float:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps a Tensor to a scalar Tensor. Returns the maximum over
    coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    tape = GradientTape()
    leaf = tape.leaf(theta)
    out = f(leaf)
    if not np.isfinite(out.array):
        raise EvaluationError("loss is non-finite at the evaluation point")
    analytic = tape.gradients(out)[leaf].reshape(-1)

    flat = theta.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        for sgn, store in ((1.0, "hi"), (-1.0, "lo")):
            pert = flat.copy()
            pert[i] += sgn * eps
            val = f(const(pert.reshape(theta.shape))).array
            if not np.isfinite(val):
                raise EvaluationError(f"loss is non-finite at coordinate {i} "
                                      f"perturbed by {sgn * eps:+g}")
            if store == "hi":
                hi = float(val)
            else:
                lo = float(val)
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
