"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records primitive operations as they execute; ``Tape.backward``
replays the record in reverse and accumulates vector-Jacobian products.
Only what the contrastive objective needs is implemented: elementwise
arithmetic with leading-axis broadcasting, exp/log/square/relu, 2-D
matmul and transpose, axis reductions (sum/mean/logsumexp/softmax), row
gather, concatenation, batch normalisation, diagonal extraction and a
straight-through estimator.

Every function in this module is polymorphic: given plain ndarrays it
returns an ndarray (no recording), given at least one ValueNode it
returns a ValueNode and registers the gradient rule.  That lets model
code be written once and reused for both training and plain evaluation.

Design notes:
- float64 everywhere; determinism and testability beat speed here.
- relu'(0) is defined as 0.
- Non-leaf node data must never be mutated.  Leaf data is mutated only
  by ``adam_step`` between tape builds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested primitive."""


class DomainError(ValueError):
    """Operand outside a primitive's numeric domain (log/div)."""


# ---------------------------------------------------------------------------
# Nodes and tape
# ---------------------------------------------------------------------------


class ValueNode:
    """A dense float64 array tracked for reverse-mode differentiation."""

    __slots__ = ("data", "tape", "uid", "requires_grad")

    # Make numpy defer binary ops to our reflected operators.
    __array_ufunc__ = None

    def __init__(self, data, tape=None, requires_grad=False, _uid=None):
        self.data = np.asarray(data, dtype=np.float64)
        if requires_grad and tape is None:
            raise ValueError("a node with requires_grad=True must live on a tape")
        self.tape = tape
        self.requires_grad = bool(requires_grad)
        self.uid = _uid

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"ValueNode(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic operators ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class GradientMap:
    """Gradients keyed by node; populated by one backward pass."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, node: ValueNode) -> np.ndarray:
        if node.uid is None or node.uid not in self._grads:
            raise KeyError(f"no gradient recorded for {node!r}")
        return self._grads[node.uid]

    def __contains__(self, node: ValueNode) -> bool:
        return node.uid is not None and node.uid in self._grads

    def get(self, node: ValueNode, default=None):
        return self._grads.get(node.uid, default) if node.uid is not None else default


class Tape:
    """Ordered record of primitive applications, inputs before outputs."""

    def __init__(self):
        self._records = []  # (out_uid, ((in_uid, in_shape, vjp), ...))
        self._next_uid = 0
        self.gradients: dict = {}

    def leaf(self, data, requires_grad: bool = True) -> ValueNode:
        """Wrap an array as a tracked leaf.  The buffer is shared, not copied."""
        arr = np.asarray(data, dtype=np.float64)
        return ValueNode(arr, tape=self, requires_grad=requires_grad, _uid=self._fresh())

    def _fresh(self) -> int:
        uid = self._next_uid
        self._next_uid += 1
        return uid

    def _record(self, out: ValueNode, entries) -> None:
        self._records.append((out.uid, tuple(entries)))

    def backward(self, loss: ValueNode) -> GradientMap:
        """Accumulate d(loss)/d(node) for every requires_grad node feeding loss.

        Repeated calls on the same tape recompute from scratch; gradients
        never accumulate across calls.
        """
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        grads: dict = {loss.uid: np.ones(())}
        for out_uid, entries in reversed(self._records):
            g_out = grads.get(out_uid)
            if g_out is None:
                continue
            for in_uid, in_shape, vjp in entries:
                contrib = vjp(g_out)
                if contrib.shape != in_shape:
                    raise ShapeError(
                        f"gradient shape {contrib.shape} does not match value shape {in_shape}"
                    )
                acc = grads.get(in_uid)
                # Stored gradients are never mutated in place, so aliasing a
                # vjp result (e.g. an identity pass-through) is safe.
                grads[in_uid] = contrib if acc is None else acc + contrib
        self.gradients = grads
        return GradientMap(grads)


# ---------------------------------------------------------------------------
# Dispatch helpers
# ---------------------------------------------------------------------------


def _is_node(x) -> bool:
    return isinstance(x, ValueNode)


def _value(x) -> np.ndarray:
    return x.data if _is_node(x) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if _is_node(x) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _make_out(data, inputs, entries):
    """Create the output node and record vjps for grad-requiring inputs.

    ``entries`` pairs each input with its vjp; non-node or non-grad inputs
    are dropped from the record.
    """
    req = any(_is_node(x) and x.requires_grad for x in inputs)
    if not req:
        return ValueNode(data)
    tape = _tape_of(*inputs)
    out = ValueNode(data, tape=tape, requires_grad=True, _uid=tape._fresh())
    kept = [
        (x.uid, x.data.shape, vjp)
        for x, vjp in entries
        if _is_node(x) and x.requires_grad
    ]
    tape._record(out, kept)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    av, bv = _value(a), _value(b)
    _check_broadcast(av, bv, "add")
    out = av + bv
    if not (_is_node(a) or _is_node(b)):
        return out
    return _make_out(
        out,
        (a, b),
        [
            (a, lambda g, s=av.shape: _unbroadcast(g, s)),
            (b, lambda g, s=bv.shape: _unbroadcast(g, s)),
        ],
    )


def sub(a, b):
    av, bv = _value(a), _value(b)
    _check_broadcast(av, bv, "sub")
    out = av - bv
    if not (_is_node(a) or _is_node(b)):
        return out
    return _make_out(
        out,
        (a, b),
        [
            (a, lambda g, s=av.shape: _unbroadcast(g, s)),
            (b, lambda g, s=bv.shape: _unbroadcast(-g, s)),
        ],
    )


def mul(a, b):
    av, bv = _value(a), _value(b)
    _check_broadcast(av, bv, "mul")
    out = av * bv
    if not (_is_node(a) or _is_node(b)):
        return out
    return _make_out(
        out,
        (a, b),
        [
            (a, lambda g, o=bv, s=av.shape: _unbroadcast(g * o, s)),
            (b, lambda g, o=av, s=bv.shape: _unbroadcast(g * o, s)),
        ],
    )


def div(a, b):
    av, bv = _value(a), _value(b)
    _check_broadcast(av, bv, "div")
    if np.any(bv == 0.0):
        raise DomainError("div: denominator contains zero")
    out = av / bv
    if not (_is_node(a) or _is_node(b)):
        return out
    return _make_out(
        out,
        (a, b),
        [
            (a, lambda g, o=bv, s=av.shape: _unbroadcast(g / o, s)),
            (b, lambda g, n=av, o=bv, s=bv.shape: _unbroadcast(-g * n / (o * o), s)),
        ],
    )


def neg(a):
    av = _value(a)
    if not _is_node(a):
        return -av
    return _make_out(-av, (a,), [(a, lambda g: -g)])


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def exp(a):
    out = np.exp(_value(a))
    if not _is_node(a):
        return out
    return _make_out(out, (a,), [(a, lambda g, o=out: g * o)])


def log(a):
    av = _value(a)
    if np.any(av <= 0.0):
        raise DomainError("log: operand contains non-positive entries")
    out = np.log(av)
    if not _is_node(a):
        return out
    return _make_out(out, (a,), [(a, lambda g, v=av: g / v)])


def square(a):
    av = _value(a)
    out = av * av
    if not _is_node(a):
        return out
    return _make_out(out, (a,), [(a, lambda g, v=av: 2.0 * g * v)])


def relu(a):
    av = _value(a)
    out = np.maximum(av, 0.0)
    if not _is_node(a):
        return out
    # Subgradient at 0 is taken as 0.
    return _make_out(out, (a,), [(a, lambda g, m=(av > 0.0): g * m)])


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} are not (n,k)x(k,m)")
    out = av @ bv
    if not (_is_node(a) or _is_node(b)):
        return out
    return _make_out(
        out,
        (a, b),
        [
            (a, lambda g, o=bv: g @ o.T),
            (b, lambda g, o=av: o.T @ g),
        ],
    )


def transpose(a):
    av = _value(a)
    if av.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D array, got shape {av.shape}")
    out = av.T.copy()
    if not _is_node(a):
        return out
    return _make_out(out, (a,), [(a, lambda g: g.T.copy())])


def diag_part(a):
    av = _value(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeError(f"diag_part: expected a square matrix, got shape {av.shape}")
    out = np.diagonal(av).copy()

    def vjp(g, n=av.shape[0]):
        full = np.zeros((n, n))
        np.fill_diagonal(full, g)
        return full

    if not _is_node(a):
        return out
    return _make_out(out, (a,), [(a, vjp)])


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim) -> int:
    if not isinstance(axis, (int, np.integer)):
        raise ShapeError(f"axis must be an integer, got {axis!r}")
    ax = int(axis)
    if ax < 0:
        ax += ndim
    if not 0 <= ax < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return ax


def reduce_sum(a, axis=None):
    av = _value(a)
    if axis is None:
        out = av.sum()
        if not _is_node(a):
            return out
        return _make_out(out, (a,), [(a, lambda g, s=av.shape: np.broadcast_to(g, s).copy())])
    ax = _norm_axis(axis, av.ndim)
    out = av.sum(axis=ax)
    if not _is_node(a):
        return out
    return _make_out(
        out,
        (a,),
        [(a, lambda g, s=av.shape, x=ax: np.broadcast_to(np.expand_dims(g, x), s).copy())],
    )


def reduce_mean(a, axis=None):
    av = _value(a)
    n = av.size if axis is None else av.shape[_norm_axis(axis, av.ndim)]
    out = reduce_sum(a, axis)
    return div(out, float(n)) if _is_node(out) else out / float(n)


def logsumexp(a, axis):
    """Overflow-safe log-sum-exp over one axis."""
    av = _value(a)
    ax = _norm_axis(axis, av.ndim)
    m = np.max(av, axis=ax, keepdims=True)
    shifted = np.exp(av - m)
    total = shifted.sum(axis=ax, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=ax)
    if not _is_node(a):
        return out
    soft = shifted / total

    def vjp(g, s=soft, x=ax):
        return np.expand_dims(g, x) * s

    return _make_out(out, (a,), [(a, vjp)])


def softmax(a, axis):
    av = _value(a)
    ax = _norm_axis(axis, av.ndim)
    m = np.max(av, axis=ax, keepdims=True)
    e = np.exp(av - m)
    out = e / e.sum(axis=ax, keepdims=True)
    if not _is_node(a):
        return out

    def vjp(g, s=out, x=ax):
        inner = (g * s).sum(axis=x, keepdims=True)
        return s * (g - inner)

    return _make_out(out, (a,), [(a, vjp)])


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def gather_rows(a, indices):
    idx = np.asarray(indices, dtype=np.int64)
    av = _value(a)
    if av.ndim < 1:
        raise ShapeError("gather_rows: operand must have at least one axis")
    if idx.ndim != 1 or np.any(idx < 0) or np.any(idx >= av.shape[0]):
        raise ShapeError(f"gather_rows: bad index array for leading dim {av.shape[0]}")
    out = av[idx].copy()
    if not _is_node(a):
        return out

    def vjp(g, i=idx, s=av.shape):
        full = np.zeros(s)
        np.add.at(full, i, g)
        return full

    return _make_out(out, (a,), [(a, vjp)])


def concat(parts, axis=0):
    vals = [_value(p) for p in parts]
    if not vals:
        raise ShapeError("concat: empty input list")
    ax = _norm_axis(axis, vals[0].ndim)
    out = np.concatenate(vals, axis=ax)
    if not any(_is_node(p) for p in parts):
        return out
    entries = []
    offset = 0
    for p, v in zip(parts, vals):
        lo, hi = offset, offset + v.shape[ax]
        offset = hi

        def vjp(g, a=ax, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[a] = slice(lo, hi)
            return g[tuple(sl)].copy()

        entries.append((p, vjp))
    return _make_out(out, tuple(parts), entries)


def batch_norm(x, gamma, beta, running_mean, running_var, *, training,
               momentum: float = 0.1, eps: float = 1e-5):
    """Normalise over the batch (leading) axis.

    Training mode standardises with batch statistics (biased variance) and
    folds them into the running buffers in place; inference mode reads the
    running buffers and is deterministic.  Gradients flow to x, gamma and
    beta; running buffers are treated as constants.
    """
    xv = _value(x)
    gv, bv = _value(gamma), _value(beta)
    if xv.ndim != 2 or gv.shape != (xv.shape[1],) or bv.shape != (xv.shape[1],):
        raise ShapeError(
            f"batch_norm: x {xv.shape} with gamma {gv.shape} beta {bv.shape} mismatched"
        )
    n = xv.shape[0]
    if training:
        mean = xv.mean(axis=0)
        centred = xv - mean
        var = np.einsum("ij,ij->j", centred, centred) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centred
        xhat *= inv_std
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (xv - running_mean) * inv_std
    out = xhat * gv
    out += bv
    if not (_is_node(x) or _is_node(gamma) or _is_node(beta)):
        return out

    # the three vjps share their reductions over the incoming gradient
    cache: list = []

    def _sums(g):
        if not cache or cache[0] is not g:
            cache[:] = [g, g.sum(axis=0), np.einsum("ij,ij->j", g, xhat)]
        return cache[1], cache[2]

    def vjp_x(g, xh=xhat, istd=inv_std, gam=gv, train=training):
        if not train:
            return g * (gam * istd)
        g_sum, xh_dot = _sums(g)
        res = xh * (-xh_dot / n)
        res += g
        res -= g_sum / n
        res *= gam * istd
        return res

    def vjp_gamma(g):
        return _sums(g)[1]

    def vjp_beta(g):
        return _sums(g)[0]

    return _make_out(
        out,
        (x, gamma, beta),
        [(x, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta)],
    )


def straight_through(soft, hard_value):
    """Forward the hard value, but pass gradients through to ``soft``."""
    hv = np.asarray(hard_value, dtype=np.float64)
    sv = _value(soft)
    if hv.shape != sv.shape:
        raise ShapeError(f"straight_through: shapes {hv.shape} and {sv.shape} differ")
    if not _is_node(soft):
        return hv.copy()
    return _make_out(hv.copy(), (soft,), [(soft, lambda g: g)])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adaptive-moment state for an ordered parameter list.

    The effective learning rate decays geometrically: update number t
    (1-based) uses lr * decay^floor((t-1) / decay_every).
    """

    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.96
    decay_every: int = 1000

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, decay: float = 0.96,
                   decay_every: int = 1000) -> "AdamState":
        shapes = [np.zeros(_value(p).shape) for p in params]
        return cls(
            m=[s.copy() for s in shapes],
            v=[s.copy() for s in shapes],
            lr=lr,
            decay=decay,
            decay_every=decay_every,
        )

    @property
    def effective_lr(self) -> float:
        return self.lr * self.decay ** (self.step // self.decay_every)


def adam_step(params, grads: GradientMap, state: AdamState):
    """One bias-corrected Adam update, applied to leaf data in place.

    The caller maximises by negating its loss; this routine always steps
    against the supplied gradients.
    """
    if len(params) != len(state.m):
        raise ValueError(f"state tracks {len(state.m)} params, got {len(params)}")
    lr_t = state.effective_lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        if p not in grads:
            raise ValueError(f"missing gradient for parameter {i} (shape {p.shape})")
        g = grads[p]
        m, v = state.m[i], state.v[i]
        if g.shape != m.shape:
            raise ShapeError(f"gradient shape {g.shape} != moment shape {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p.data -= (lr_t / bc1) * m / denom
    return params, state
