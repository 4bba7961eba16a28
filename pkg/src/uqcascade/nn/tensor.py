"""float32 tensors with tape-based reverse-mode differentiation.

Every operation returns a new ``Tensor`` wired to its inputs. ``backward()``
walks the resulting DAG in reverse topological order and accumulates
gradients into the leaves that asked for them. Values are float32 end to
end; reductions accumulate in float64 before storing float32 results.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "GraphError",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "sum_",
    "mean",
    "gather_rows",
    "scatter_rows",
    "take_rows",
    "expand_batch",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "linear",
    "multi_head_self_attention",
    "cross_entropy",
    "mse_masked",
    "assert_finite",
]


class GraphError(RuntimeError):
    """Structural problem in the computation graph (cycle, non-scalar loss)."""


_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction (forward-only paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """One node in the computation graph.

    Leaf tensors hold inputs or trainable values; interior nodes remember
    their parents and a closure that routes the output gradient back.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_precise")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._precise = None  # float64 value of a terminal reduction, if any

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self._precise is not None:
            return self._precise
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = "param" if isinstance(self, Parameter) else "tensor"
        return f"<{tag} shape={self.data.shape}>"

    # Operator sugar for the common arithmetic; everything else is functional.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable leaf; gradient has the same shape as the value."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"<param {self.name} shape={self.data.shape}>"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.data.shape, dtype=np.float32)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(np.float32, copy=False)


def backward(loss: Tensor):
    """Populate gradients of every parameter reachable from a scalar loss."""
    if loss.data.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    done: set[int] = set()
    open_path: set[int] = set()

    def visit(node: Tensor):
        nid = id(node)
        if nid in done:
            return
        if nid in open_path:
            raise GraphError("cycle detected in computation graph")
        open_path.add(nid)
        for parent in node._parents:
            if parent.requires_grad:
                visit(parent)
        open_path.discard(nid)
        done.add(nid)
        topo.append(node)

    visit(loss)
    loss.grad = np.ones(loss.data.shape, dtype=np.float32)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def assert_finite(t: Tensor, what: str = "tensor"):
    if not np.isfinite(t.data).all():
        raise ValueError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), back)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = a.data * np.float32(s)

    def back(g):
        _accumulate(a, g * np.float32(s))

    return _make(out, (a,), back)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise GraphError("matmul expects operands with ndim >= 2")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), back)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def back(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out, (x,), back)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def back(g):
        _accumulate(x, g.transpose(inv))

    return _make(out, (x,), back)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _make(out, tuple(tensors), back)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    acc = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def back(g):
        _accumulate(x, _spread_reduced(g, x.data.shape, axis, keepdims))

    out = _make(acc.astype(np.float32), (x,), back)
    if axis is None:
        out._precise = float(acc)
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    acc = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def back(g):
        _accumulate(x, _spread_reduced(g, x.data.shape, axis, keepdims) / np.float32(count))

    out = _make(acc.astype(np.float32), (x,), back)
    if axis is None:
        out._precise = float(acc)
    return out


def _spread_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape(()), shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def gather_rows(x, idx) -> Tensor:
    """Pick rows along axis 1: out[b, k] = x[b, idx[b, k]]."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.data.shape[0])[:, None]
    out = x.data[rows, idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        _accumulate(x, gx)

    return _make(out, (x,), back)


def scatter_rows(base, idx, src) -> Tensor:
    """Overwrite rows along axis 1: out = base; out[b, idx[b, k]] = src[b, k].

    Indices must be unique per batch row; overwritten base rows receive no
    gradient.
    """
    base, src = _as_tensor(base), _as_tensor(src)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(base.data.shape[0])[:, None]
    out = base.data.copy()
    out[rows, idx] = src.data

    def back(g):
        gb = g.copy()
        gb[rows, idx] = 0.0
        _accumulate(base, gb)
        _accumulate(src, g[rows, idx])

    return _make(out, (base, src), back)


def take_rows(table, ids) -> Tensor:
    """Embedding-style lookup: out[i] = table[ids[i]]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _make(out, (table,), back)


def expand_batch(x, n: int) -> Tensor:
    """Repeat a (P, E) tensor into (n, P, E); gradient sums over the batch."""
    x = _as_tensor(x)
    out = np.broadcast_to(x.data, (n,) + x.data.shape)

    def back(g):
        _accumulate(x, g.sum(axis=0))

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# Neural-net operations
# ---------------------------------------------------------------------------


def softmax(logits) -> Tensor:
    """Probability simplex over the last axis, max-subtracted for stability."""
    logits = _as_tensor(logits)
    x = logits.data
    if not np.isfinite(x).all():
        raise ValueError("softmax: non-finite logits")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(np.float32)

    def back(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(logits, s * (g - dot))

    return _make(s, (logits,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xf = x.data.astype(np.float64)
    mu = xf.mean(axis=-1, keepdims=True)
    var = xf.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xf - mu) * inv).astype(np.float32)
    inv32 = inv.astype(np.float32)
    out = gamma.data * xhat + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv32 * (gg - m1 - xhat * m2))

    return _make(out, (x, gamma, beta), back)


_GELU_C = np.float32(0.7978845608028654)  # sqrt(2/pi)
_GELU_A = np.float32(0.044715)


def gelu(x) -> Tensor:
    """GELU activation, tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    u = _GELU_C * (v + _GELU_A * v * v * v)
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
        _accumulate(x, g * dv.astype(np.float32))

    return _make(out, (x,), back)


def dropout(x, rate: float, mode: str, rng) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    scales survivors by 1/(1-rate); eval mode is the identity."""
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    keep = (rng.uniform(size=x.data.shape) >= rate).astype(np.float32)
    factor = keep / np.float32(1.0 - rate)
    out = x.data * factor

    def back(g):
        _accumulate(x, g * factor)

    return _make(out, (x,), back)


def linear(x, w, b) -> Tensor:
    """Affine map x @ w + b."""
    return add(matmul(x, w), b)


def multi_head_self_attention(x, heads: int, wq, bq, wk, bk, wv, bv, wo, bo) -> Tensor:
    """Standard scaled dot-product self-attention over (B, S, E) input."""
    x = _as_tensor(x)
    b_sz, s_len, e_dim = x.data.shape
    if e_dim % heads != 0:
        raise ValueError(f"embed dim {e_dim} not divisible by {heads} heads")
    hd = e_dim // heads

    def split(t):
        t = reshape(t, (b_sz, s_len, heads, hd))
        return transpose(t, (0, 2, 1, 3))

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = softmax(scores)
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    ctx = reshape(ctx, (b_sz, s_len, e_dim))
    return linear(ctx, wo, bo)


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under given
    probabilities (rows of a softmax output)."""
    probs = _as_tensor(probs)
    p = probs.data
    single = p.ndim == 1
    if single:
        p2 = p[None, :]
        labels = np.asarray([labels], dtype=np.intp)
    else:
        p2 = p
        labels = np.asarray(labels, dtype=np.intp)
    n = p2.shape[0]
    rows = np.arange(n)
    picked = p2[rows, labels].astype(np.float64)
    acc = -np.log(picked).mean()

    def back(g):
        gp = np.zeros_like(p2)
        gp[rows, labels] = (-1.0 / (n * picked)).astype(np.float32) * g
        _accumulate(probs, gp.reshape(p.shape))

    out = _make(np.float32(acc), (probs,), back)
    out._precise = float(acc)
    return out


def mse_masked(pred, target, mask) -> Tensor:
    """Masked reconstruction error: mean over masked rows of the squared
    L2 norm of the row difference. Unmasked rows contribute exactly zero."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    mask = np.asarray(mask, dtype=bool)
    if pred.data.shape != target.data.shape:
        raise GraphError("mse_masked: pred/target shape mismatch")
    if mask.ndim != 1 or mask.shape[0] != pred.data.shape[0]:
        raise GraphError("mse_masked: mask must be one flag per row")
    m = int(mask.sum())
    if m == 0:
        raise ValueError("mse_masked: empty mask")
    diff = pred.data[mask] - target.data[mask]
    acc = (diff.astype(np.float64) ** 2).sum() / m

    def back(g):
        gd = (2.0 / m) * diff * g
        gp = np.zeros_like(pred.data)
        gp[mask] = gd
        _accumulate(pred, gp)
        _accumulate(target, -gp)

    out = _make(np.float32(acc), (pred, target), back)
    out._precise = float(acc)
    return out
