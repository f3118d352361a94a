"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs include a tracked
tensor. Tensors created without a tape are constants; operations on constants
only are evaluated eagerly and never recorded. Ops work on a trailing feature
axis and allow leading batch axes, so a whole batch of samples flows through
one recorded graph.

    tape = Tape()
    W = tape.leaf(np.ones((2, 3)))
    y = linear(Tensor(x), W, None)
    grads = backward(tape, sum_all(y))
    grads[W.node]
"""

import numpy as np

from . import kernels
from .errors import DimensionError, InvalidArgumentError


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None   # make ndarray <op> Tensor defer to Tensor's reflected op

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self):
        return self.node is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Append-only record of operations.

    ``nodes[k]`` is ``(parent_ids, vjp, shape)``; parents always have smaller
    ids than the node itself, so a reversed sweep is a topological order.
    ``grads`` is filled by :func:`backward`.
    """

    def __init__(self):
        self.nodes = []
        self.grads = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        """Register ``value`` as a differentiable input and return its tensor."""
        t = Tensor(value)
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(((), None, t.data.shape))
        return t

    def grad(self, tensor):
        return self.grads[tensor.node]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs):
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise InvalidArgumentError("tensors from different tapes cannot be combined")
            tape = t.tape
    return tape


def _record(out, inputs, vjp):
    """Wrap ``out`` and, if any input is tracked, record ``vjp`` on its tape.

    ``vjp(g)`` returns one gradient (or None) per input.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node for t in inputs)
    t = Tensor(out)
    t.tape = tape
    t.node = len(tape.nodes)
    tape.nodes.append((parents, vjp, t.data.shape))
    return t


class _SliceGrad:
    """Gradient that is nonzero only on ``key``; accumulated in place."""
    __slots__ = ("key", "value")

    def __init__(self, key, value):
        self.key = key
        self.value = value


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# Kink recorder: when active, non-smooth ops append the sign pattern of their
# inputs so the finite-difference checker can detect kink crossings.
_kinks = None


def _note_kink(x):
    if _kinks is not None:
        _kinks.append(np.sign(x))


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def _sigmoid(x):
    return kernels.get_backend("python")._sigmoid(x)


def activation(kind, x):
    """Elementwise ``tanh``, ``sigmoid`` or ``relu``."""
    x = as_tensor(x)
    if kind == "tanh":
        y = np.tanh(x.data)
        return _record(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        return _record(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "relu":
        _note_kink(x.data)
        mask = x.data > 0
        return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))
    raise InvalidArgumentError(f"unknown activation {kind!r}")


def tanh(x):
    return activation("tanh", x)


def sigmoid(x):
    return activation("sigmoid", x)


def relu(x):
    return activation("relu", x)


def absolute(x):
    x = as_tensor(x)
    _note_kink(x.data)
    s = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * s,))


# ------------------------------------------------------------------- linear

def linear(x, W, b=None):
    """``x @ W.T + b`` over the last axis of ``x``.

    ``x`` has shape (..., n), ``W`` (m, n), ``b`` (m,) or None.
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not conform to weight {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is None:
        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            gW = g2.T @ xd.reshape(-1, xd.shape[-1]) if W.tracked else None
            return (g @ Wd if x.tracked else None, gW)
        return _record(out, (x, W), vjp)

    b = as_tensor(b)
    if b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not conform to weight {W.shape}")
    out = out + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ xd.reshape(-1, xd.shape[-1]) if W.tracked else None
        return (g @ Wd if x.tracked else None, gW, g2.sum(axis=0))
    return _record(out, (x, W, b), vjp)


def additive_scores(q, k, v, chunk=8):
    """``tanh(q_i + k_j) . v`` for every query/key pair.

    ``q`` is (B, Tq, A); ``k`` is (B, Tk, A), shared by all queries, or
    (B, Tq, Tk, A). Returns (B, Tq, Tk). Works in batch chunks so each
    (Tq, Tk, A) intermediate is produced and consumed while in cache.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 3 or kd.ndim not in (3, 4) or vd.shape != (qd.shape[-1],) \
            or kd.shape[0] != qd.shape[0] or kd.shape[-1] != qd.shape[-1] \
            or (kd.ndim == 4 and kd.shape[1] != qd.shape[1]):
        raise DimensionError(f"additive_scores: shapes {q.shape}, {k.shape}, {v.shape}")
    shared = kd.ndim == 3
    B, Tq = qd.shape[:2]
    Tk = kd.shape[-2]

    def hidden(s):
        kk = kd[s, None] if shared else kd[s]
        e = qd[s, :, None, :] + kk
        return np.tanh(e, out=e)

    out = np.empty((B, Tq, Tk))
    saved = []
    for lo in range(0, B, chunk):
        s = slice(lo, lo + chunk)
        e = hidden(s)
        out[s] = e @ vd
        saved.append(e)

    def vjp(g):
        gq = np.empty_like(qd)
        gk = np.empty_like(kd)
        gv = np.zeros_like(vd)
        for n, lo in enumerate(range(0, B, chunk)):
            s = slice(lo, lo + chunk)
            gs = g[s][..., None]
            gv += np.tensordot(gs[..., 0], saved[n], axes=3)
            e = np.multiply(saved[n], saved[n])
            np.subtract(1.0, e, out=e)
            e *= vd
            e *= gs
            gq[s] = e.sum(axis=2)
            gk[s] = e.sum(axis=1) if shared else e
        return gq, gk, gv
    return _record(out, (q, k, v), vjp)


def matmul(a, b):
    """Plain 2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b),
                   lambda g: (g @ bd.T if a.tracked else None, ad.T @ g if b.tracked else None))


def _swap(x):
    return np.swapaxes(x, -1, -2)


def bmm(a, b):
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ _swap(bd), ad.shape) if a.tracked else None
        gb = _unbroadcast(_swap(ad) @ g, bd.shape) if b.tracked else None
        return ga, gb
    return _record(ad @ bd, (a, b), vjp)


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def einsum(subscripts, a, b):
    """Two-operand einsum; every input index must appear in the output or
    the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bd) if a.tracked else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, ad) if b.tracked else None
        return ga, gb
    return _record(np.einsum(subscripts, ad, bd), (a, b), vjp)


# --------------------------------------------------------------- reductions

def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.data.shape[axis] < 1:
        raise InvalidArgumentError("softmax needs at least one element")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _record(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(shape, float(g) / n),))


def l1_loss(pred, target):
    """Mean absolute error; the subgradient at zero difference is 0."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    if pred.data.size == 0:
        return Tensor(0.0)
    d = pred.data - target.data
    _note_kink(d)
    s = np.sign(d) / d.size

    def vjp(g):
        gs = float(g) * s
        return gs, -gs
    return _record(np.asarray(np.abs(d).mean()), (pred, target), vjp)


# ------------------------------------------------------------------- shaping

def concat(parts, axis=-1):
    """Concatenate along ``axis``; zero-length parts contribute nothing."""
    if not parts:
        raise InvalidArgumentError("concat of an empty list")
    parts = [as_tensor(p) for p in parts]
    datas = [p.data for p in parts]
    if axis == -1 or axis == datas[0].ndim - 1:
        lead = datas[0].shape[:-1]
        for d in datas:
            if d.shape[:-1] != lead:
                raise DimensionError(f"concat: leading shapes {[p.shape for p in parts]} differ")
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _record(np.concatenate(datas, axis=axis), tuple(parts), vjp)


def stack(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise InvalidArgumentError("stack of an empty list")

    def vjp(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(parts)))
    return _record(np.stack([p.data for p in parts], axis=axis), tuple(parts), vjp)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _record(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def getitem(x, key):
    x = as_tensor(x)
    old = x.shape

    basic = all(isinstance(k, (slice, int, type(Ellipsis)))
                for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        if basic:
            return (_SliceGrad(key, g),)
        out = np.zeros(old)
        np.add.at(out, key, g)
        return (out,)
    return _record(x.data[key], (x,), vjp)


def take(x, indices, axis=0):
    """Gather along ``axis`` with an integer index array (embedding lookup,
    window extraction). Repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    old = x.shape
    ax = axis % x.data.ndim

    # rows of a 2-D index without repeats can be scattered with plain +=
    rowwise = indices.ndim == 2 and all(len(np.unique(r)) == r.size for r in indices)

    def vjp(g):
        out = np.zeros(old)
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        om = np.moveaxis(out, ax, 0)
        if rowwise:
            for r in range(indices.shape[0]):
                om[indices[r]] += gm[r]
        else:
            np.add.at(om, indices, gm)
        return (out,)
    return _record(np.take(x.data, indices, axis=ax), (x,), vjp)


# --------------------------------------------------------------------- fused

def lstm_pointwise(z, c_prev):
    """Fused LSTM gate math; returns ``(h, c)``.

    ``z`` is (B, 4H) pre-activations ``[i | f | g | o]``. Runs on the active
    kernel backend. Both outputs are recorded as slices of one node so
    gradients from ``h`` and ``c`` meet in a single backward kernel call.
    """
    z, c_prev = as_tensor(z), as_tensor(c_prev)
    B, H = c_prev.shape
    if z.shape != (B, 4 * H):
        raise DimensionError(f"lstm_pointwise: pre-activations {z.shape} vs state {c_prev.shape}")
    zd = np.ascontiguousarray(z.data)
    cp = np.ascontiguousarray(c_prev.data)
    h, c, gates, tanh_c = kernels.lstm_pointwise_forward(zd, cp)

    def vjp(g):
        g = np.ascontiguousarray(g)
        dz, dcp = kernels.lstm_pointwise_backward(
            np.ascontiguousarray(g[:, :H]), np.ascontiguousarray(g[:, H:]), gates, cp, tanh_c)
        return dz, dcp
    hc = _record(np.concatenate([h, c], axis=1), (z, c_prev), vjp)
    return hc[:, :H], hc[:, H:]


# ------------------------------------------------------------------ backward

def backward(tape, root):
    """Reverse sweep from scalar ``root``; returns the per-node gradient list.

    Gradients are reset on every call, so repeated calls are idempotent.
    Untracked nodes (constants) are skipped. Entries for nodes that do not
    influence ``root`` are left as None.
    """
    if root.tape is not tape or root.node is None:
        raise InvalidArgumentError("root is not recorded on this tape")
    if root.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = tape.nodes
    grads = [None] * len(nodes)
    # buffers this sweep allocated itself may be updated in place; others
    # can alias arrays handed out by a vjp
    owned = bytearray(len(nodes))
    grads[root.node] = np.ones(root.shape)
    for k in range(root.node, -1, -1):
        g = grads[k]
        if g is None:
            continue
        parents, vjp, _ = nodes[k]
        if vjp is None:
            continue
        for p, gp in zip(parents, vjp(g)):
            if p is None or gp is None:
                continue
            cur = grads[p]
            if isinstance(gp, _SliceGrad):
                if cur is None:
                    cur = np.zeros(nodes[p][2])
                elif not owned[p]:
                    cur = cur.copy()
                cur[gp.key] += gp.value
                grads[p] = cur
                owned[p] = 1
            elif cur is None:
                grads[p] = gp
            elif owned[p]:
                cur += gp
                grads[p] = cur   # 0-d sums are numpy scalars, not updated in place
            else:
                grads[p] = cur + gp
                owned[p] = 1
    for k, (_, _, shape) in enumerate(tape.nodes):
        if grads[k] is not None and grads[k].shape != shape:
            grads[k] = np.reshape(grads[k], shape)
    tape.grads = grads
    return grads


def roundoff_floor(fx, h, rtol):
    """Smallest gradient magnitude a central difference can resolve to ``rtol``.

    The difference quotient carries roundoff of about ``c * eps * |f| / h``,
    where ``c`` (about 10) absorbs the error of summing many terms into ``f``;
    entries below that divided by ``rtol`` are compared absolutely instead.
    """
    return 10 * np.finfo(np.float64).eps * max(abs(float(fx)), 1.0) / (h * rtol)


def finite_diff_check(f, x, h=1e-6, return_skipped=False, floor=1e-8):
    """Worst relative error between tape and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. Coordinates whose perturbation
    moves any relu/abs/l1 input across zero are skipped. The relative error
    uses ``max(|analytic|, |numeric|, floor)`` as denominator; ``floor`` should
    sit above the difference quotient's roundoff, about ``eps * |f| / h``.
    """
    if h <= 0:
        raise InvalidArgumentError("step h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x0.copy())
    out = f(xt)
    # an output that never touched x has a zero gradient
    analytic = backward(tape, out)[xt.node] if out.tape is tape and out.node is not None \
        else None
    if analytic is None:
        analytic = np.zeros_like(x0)

    def probe(v):
        global _kinks
        _kinks = []
        try:
            val = float(np.asarray(f(Tensor(v)).data).reshape(()))
            return val, _kinks
        finally:
            _kinks = None

    worst, skipped = 0.0, 0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp, kp = probe(xp.reshape(x0.shape))
        fm, km = probe(xm.reshape(x0.shape))
        if any(not np.array_equal(a, b) for a, b in zip(kp, km)):
            skipped += 1
            continue
        num = (fp - fm) / (2 * h)
        ana = analytic.reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return (worst, skipped) if return_skipped else worst
