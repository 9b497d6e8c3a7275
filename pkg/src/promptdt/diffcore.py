"""Dense ndarray ops with reverse-mode differentiation.

Small tape-based engine, just big enough to train the causal transformer
in :mod:`promptdt.dtmodel` on a single CPU. Values are plain numpy arrays
wrapped in :class:`Tensor`; float32 is the working precision, float64 is
used by gradient-check tests. There is deliberately no broadcasting: every
op states its exact shape rule in its docstring and anything else raises
:class:`~promptdt.errors.ShapeError`.

Ops record themselves on the innermost active :class:`CompGraph` (entered
as a context manager). With no active graph they are pure numpy, which is
the inference fast path.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf verification after every forward op (slow, test-only)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """A dense real array plus autodiff metadata.

    `data` is an owned numpy array (float32 or float64). Tensors are treated
    as immutable values by every op; only the optimizer mutates `.data` in
    place, and only for parameter leaves between graph lifetimes.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def param(data, name: str | None = None, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=True, name=name)


def zeros(shape, dtype=np.float32, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones(shape, dtype=np.float32, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)


def normal(shape, std: float, rng: np.random.Generator, dtype=np.float32, name=None) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True, name=name)


_ACTIVE: list["CompGraph"] = []


class CompGraph:
    """Tape of recorded ops, topologically ordered by construction.

    The backward pass walks the tape once in reverse, accumulating adjoints
    keyed by tensor identity. A graph is single-threaded; concurrent
    recording from multiple threads is not supported.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable]] = []

    def __enter__(self) -> "CompGraph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def _record(self, out: Tensor, backward_fn: Callable) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar `loss` w.r.t. parameter leaves.

        Returns a dict keyed by Tensor. When `params` is given, every listed
        parameter appears in the result, with zeros if the loss does not
        depend on it; otherwise the dict covers each requires_grad leaf the
        reverse sweep reached.
        """
        if loss.data.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        leaf_grads: dict[Tensor, np.ndarray] = {}

        def accumulate(t: Tensor, g: np.ndarray) -> None:
            key = id(t)
            if key in adjoints:
                adjoints[key] = adjoints[key] + g
            else:
                adjoints[key] = g
            if t.requires_grad:
                leaf_grads[t] = adjoints[key]

        for out, backward_fn in reversed(self._nodes):
            adj = adjoints.get(id(out))
            if adj is None:
                continue
            for inp, g in backward_fn(adj):
                accumulate(inp, g)

        if params is not None:
            result = {}
            for p in params:
                result[p] = leaf_grads.get(p, np.zeros_like(p.data))
            return result
        return leaf_grads


def _graph() -> CompGraph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _finalize(op: str, out_data: np.ndarray, backward_fn: Callable | None) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    g = _graph()
    if g is not None and backward_fn is not None:
        g._record(out, backward_fn)
    return out


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Shape rules (no other combinations):

    - (M,K) @ (K,N) -> (M,N)
    - (B,M,K) @ (K,N) -> (B,M,N)    shared right operand
    - (B,M,K) @ (B,K,N) -> (B,M,N)  batched, equal batch dims
    """
    _check_same_dtype("matmul", a, b)
    sa, sb = a.data.shape, b.data.shape
    ok = (
        (len(sa) == 2 and len(sb) == 2 and sa[1] == sb[0])
        or (len(sa) == 3 and len(sb) == 2 and sa[2] == sb[0])
        or (len(sa) == 3 and len(sb) == 3 and sa[0] == sb[0] and sa[2] == sb[1])
    )
    if not ok:
        raise ShapeError("matmul", sa, sb)
    out = a.data @ b.data

    def backward(adj):
        if len(sa) == 2:
            da = adj @ b.data.T
            db = a.data.T @ adj
        elif len(sb) == 2:
            da = adj @ b.data.T
            db = a.data.reshape(-1, sa[2]).T @ adj.reshape(-1, sb[1])
        else:
            da = adj @ b.data.transpose(0, 2, 1)
            db = a.data.transpose(0, 2, 1) @ adj
        return [(a, da), (b, db)]

    return _finalize("matmul", out, backward)


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    _check_same_dtype(op, a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(op, a.data.shape, b.data.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    _elementwise_shapes("add", a, b)
    return _finalize("add", a.data + b.data, lambda adj: [(a, adj), (b, adj)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; shapes must match exactly."""
    _elementwise_shapes("sub", a, b)
    return _finalize("sub", a.data - b.data, lambda adj: [(a, adj), (b, -adj)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _elementwise_shapes("mul", a, b)
    return _finalize("mul", a.data * b.data, lambda adj: [(a, adj * b.data), (b, adj * a.data)])


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every element by the python scalar `c`."""
    c = float(c)
    return _finalize("scale", a.data * np.array(c, dtype=a.dtype), lambda adj: [(a, adj * c)])


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis: x (..., D) + b (D,)."""
    _check_same_dtype("bias_add", x, b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError("bias_add", x.data.shape, b.data.shape)

    def backward(adj):
        db = adj.reshape(-1, b.data.shape[0]).sum(axis=0)
        return [(x, adj), (b, db)]

    return _finalize("bias_add", x.data + b.data, backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _finalize("relu", out, lambda adj: [(x, adj * (x.data > 0))])


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _finalize("tanh", out, lambda adj: [(x, adj * (1.0 - out * out))])


def softmax_lastaxis(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of `x + additive_mask`.

    `additive_mask` is a constant (not differentiated) of exactly x.shape;
    use -inf entries to zero out positions. Every row must keep at least one
    finite entry, otherwise the result is undefined (NaN).
    """
    z = x.data
    if additive_mask is not None:
        if additive_mask.shape != x.data.shape:
            raise ShapeError("softmax_lastaxis(mask)", x.data.shape, additive_mask.shape)
        z = z + additive_mask
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def backward(adj):
        inner = np.sum(adj * out, axis=-1, keepdims=True)
        return [(x, out * (adj - inner))]

    return _finalize("softmax_lastaxis", out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis D, then scale/shift: gain, bias are (D,)."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm", x.data.shape, gain.data.shape, bias.data.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.array(eps, dtype=x.dtype))
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def backward(adj):
        dxhat = adj * gain.data
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = (inv / d) * (d * dxhat - s1 - xhat * s2)
        dgain = (adj * xhat).reshape(-1, d).sum(axis=0)
        dbias = adj.reshape(-1, d).sum(axis=0)
        return [(x, dx), (gain, dgain), (bias, dbias)]

    return _finalize("layer_norm", out, backward)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup: table (V,D) indexed by an integer array -> indices.shape + (D,)."""
    if table.data.ndim != 2:
        raise ShapeError("embedding", table.data.shape)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError(
            f"embedding index out of range [0, {table.data.shape[0]}): "
            f"[{idx.min()}, {idx.max()}]"
        )
    out = table.data[idx]

    def backward(adj):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx.reshape(-1), adj.reshape(-1, table.data.shape[1]))
        return [(table, dt)]

    return _finalize("embedding", out, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError("reshape", x.data.shape, shape)
    old = x.data.shape
    return _finalize("reshape", x.data.reshape(shape), lambda adj: [(x, adj.reshape(old))])


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError("transpose", x.data.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _finalize("transpose", x.data.transpose(axes), lambda adj: [(x, adj.transpose(inverse))])


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; all other dims must match exactly."""
    if not parts:
        raise ContractError("concat of zero tensors")
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError("concat", ref, s)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(adj):
        grads = []
        for i, p in enumerate(parts):
            sl = [slice(None)] * adj.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append((p, adj[tuple(sl)]))
        return grads

    return _finalize("concat", out, backward)


def index_select(x: Tensor, axis: int, indices: np.ndarray) -> Tensor:
    """Gather the given positions along `axis` (integer index vector)."""
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("index_select needs a 1-D integer index array")
    out = np.take(x.data, idx, axis=axis)

    def backward(adj):
        dx = np.zeros_like(x.data)
        sl = (slice(None),) * axis + (idx,)
        np.add.at(dx, sl, adj)
        return [(x, dx)]

    return _finalize("index_select", out, backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element; returns a scalar tensor."""
    return _finalize("sum_all", np.asarray(x.data.sum(), dtype=x.dtype), lambda adj: [(x, np.full(x.data.shape, adj, dtype=x.dtype))])


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements (scalar output)."""
    _elementwise_shapes("mse", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def backward(adj):
        g = (2.0 / n) * diff * adj
        return [(pred, g), (target, -g)]

    return _finalize("mse", out, backward)


def masked_mse(pred: Tensor, target: Tensor, mask: np.ndarray) -> Tensor:
    """MSE restricted to positions where `mask` is nonzero.

    pred/target are (..., D); mask is a constant 0/1 array of pred.shape[:-1].
    The mean runs over masked positions times D. An all-zero mask is a
    contract violation.
    """
    _elementwise_shapes("masked_mse", pred, target)
    if mask.shape != pred.data.shape[:-1]:
        raise ShapeError("masked_mse(mask)", pred.data.shape, mask.shape)
    m = mask.astype(pred.dtype)
    count = m.sum()
    if count == 0:
        raise ContractError("masked_mse: mask selects no positions")
    denom = count * pred.data.shape[-1]
    diff = (pred.data - target.data) * m[..., None]
    out = np.asarray((diff * diff).sum() / denom, dtype=pred.dtype)

    def backward(adj):
        g = (2.0 / denom) * diff * adj
        return [(pred, g), (target, -g)]

    return _finalize("masked_mse", out, backward)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied directly to the parameter (`p *= 1 - lr*wd`) before the
    adaptive update, so a zero-gradient step still shrinks weights. Biases
    and layer-norm parameters should be registered with decay disabled via
    `no_decay`.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        no_decay: Iterable[Tensor] = (),
    ):
        if lr <= 0:
            raise ContractError("AdamW needs lr > 0")
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self._no_decay = {id(p) for p in no_decay}
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError("adamw_step", p.data.shape, g.shape)
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and id(p) not in self._no_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)
