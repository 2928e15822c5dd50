"""Dense tensors with tape-based reverse-mode differentiation.

Only the operators the segmentation networks need are provided. Every operator
works on the trailing axes and broadcasts over any leading batch axes, so a
batch of blocks or groups runs through one graph.

Recording happens only inside an active :class:`Tape`; outside a tape the
operators are plain numpy computations.
"""
from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError, EmptyInputError, LabelError, StateError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_local = threading.local()


def _env_precision() -> str:
    value = os.environ.get("PTSEG_PRECISION", "f32").strip().lower()
    if value not in _DTYPES:
        raise ArgumentError(f"PTSEG_PRECISION must be one of {sorted(_DTYPES)}, got {value!r}")
    return value


_precision = _env_precision()


def get_precision() -> str:
    return getattr(_local, "precision", _precision)


def set_precision(name: str) -> None:
    """Set the precision used for newly created tensors in this thread."""
    if name not in _DTYPES:
        raise ArgumentError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _local.precision = name


@contextlib.contextmanager
def precision(name: str):
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def default_dtype():
    return _DTYPES[get_precision()]


class Tensor:
    """An array node. ``grad`` is filled in by :func:`backward` for leaves."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            dtype = default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or default_dtype())


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations, replayed in reverse by :meth:`backward`.

    Use as a context manager; operators executed inside the ``with`` block on
    inputs that require gradients are appended to ``nodes``.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, inputs, output, backward) -> None:
        node = _Node(inputs, output, backward)
        output._node = node
        output._tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise StateError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                    else:
                        t.grad += gi
                else:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf that contributed to ``loss``.

    Gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise StateError("loss was not produced on a live tape")
    loss._tape.backward(loss)


def _result(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def _flat_rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _rows_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # one vector-matrix product per row: results do not depend on batch layout
    return np.matmul(a[..., None, :], w)[..., 0, :]


# ---------------------------------------------------------------------------
# operators


def linear(x, w, b) -> Tensor:
    """Apply ``x @ w + b`` to every row of ``x``.

    The product is computed one row at a time so each output row depends on
    its input row alone, bit for bit. That keeps permutation equivariance
    exact, which blocked BLAS kernels do not guarantee.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: x{x.shape}, w{w.shape}, b{b.shape} are inconsistent")
    out = _rows_matmul(x.data, w.data) + b.data

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        g2 = _flat_rows(g)
        gw = _flat_rows(x.data).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, w, b), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * mask,))


def max_pool_rows(x):
    """Max over the row axis (second to last). Returns ``(pooled, argmax)``.

    Ties go to the lowest row index, and the backward pass routes each
    column's gradient to that row only.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"max_pool_rows needs at least 2 axes, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise EmptyInputError("max_pool_rows over zero rows")
    idx = np.argmax(x.data, axis=-2)
    out = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _result(out, (x,), back), idx


def stack_rows(g, n: int) -> Tensor:
    """Repeat a feature vector as ``n`` identical rows."""
    g = as_tensor(g)
    if n < 1:
        raise ArgumentError(f"stack_rows needs n >= 1, got {n}")
    out = np.repeat(g.data[..., None, :], n, axis=-2)
    return _result(out, (g,), lambda grad: (grad.sum(axis=-2),))


def concat_cols(xs) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ArgumentError("concat_cols needs at least one input")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(f"concat_cols: shapes {xs[0].shape} and {x.shape} differ outside the last axis")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([x.data for x in xs], axis=-1)
    cuts = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return _result(out, xs, lambda g: tuple(np.split(g, cuts, axis=-1)))


def take(x, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is removed)."""
    x = as_tensor(x)
    axis = axis % x.ndim
    out = np.take(x.data, index, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _result(out, (x,), back)


def stack(xs, axis: int) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim
    return _result(out, xs, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(xs))))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g),))


def weighted_sum(x, weights) -> Tensor:
    """``sum(x * weights)`` for a constant weight array."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise DimensionError(f"weighted_sum: x{x.shape} vs weights{w.shape}")
    return _result(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), lambda g: (g * w,))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over all rows of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    m = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels{labels.shape} do not match logits{logits.shape}")
    flat = labels.reshape(-1).astype(np.int64)
    bad = np.flatnonzero((flat < 0) | (flat >= m))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(flat[i])} at index {i} is outside [0, {m})")
    z = _flat_rows(logits.data)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(flat.size)
    count = max(flat.size, 1)
    loss = np.asarray(-logp[rows, flat].sum() / count, dtype=logits.dtype)

    def back(g):
        p = np.exp(logp)
        p[rows, flat] -= 1
        p *= g / count
        return (p.reshape(logits.shape),)

    return _result(loss, (logits,), back)


def _sigmoid(a):
    return 0.5 * (np.tanh(0.5 * a) + 1)


@dataclass
class GruParams:
    """Gate weights of a GRU cell; ``W_*`` is (hidden, input), ``U_*`` is (hidden, hidden)."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")

    def __post_init__(self):
        hidden, inp = self.W_z.shape
        for n in ("W_z", "W_r", "W_h"):
            if getattr(self, n).shape != (hidden, inp):
                raise DimensionError(f"GRU {n} has shape {getattr(self, n).shape}, expected {(hidden, inp)}")
        for n in ("U_z", "U_r", "U_h"):
            if getattr(self, n).shape != (hidden, hidden):
                raise DimensionError(f"GRU {n} has shape {getattr(self, n).shape}, expected {(hidden, hidden)}")
        for n in ("b_z", "b_r", "b_h"):
            if getattr(self, n).shape != (hidden,):
                raise DimensionError(f"GRU {n} has shape {getattr(self, n).shape}, expected {(hidden,)}")

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self.NAMES}

    @classmethod
    def from_tensors(cls, tensors) -> GruParams:
        return cls(**{n: tensors[n] for n in cls.NAMES})

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int = 64, rng=None, requires_grad: bool = True) -> GruParams:
        rng = np.random.default_rng(rng)
        t = {}
        for n in cls.NAMES:
            if n.startswith("W"):
                data = glorot_uniform(rng, (hidden_dim, input_dim))
            elif n.startswith("U"):
                data = glorot_uniform(rng, (hidden_dim, hidden_dim))
            else:
                data = np.zeros(hidden_dim)
            t[n] = Tensor(data, requires_grad=requires_grad, name=n, dtype=default_dtype())
        return cls(**t)


def glorot_uniform(rng, shape) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)), drawn in float64."""
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def gru_step(x, h, p: GruParams) -> Tensor:
    """One GRU update, ``h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h)``."""
    x, h = as_tensor(x), as_tensor(h)
    if x.shape[-1] != p.input_dim or h.shape[-1] != p.hidden_dim or x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(
            f"gru_step: x{x.shape}, h{h.shape} do not fit input_dim={p.input_dim}, hidden_dim={p.hidden_dim}"
        )
    Wz, Wr, Wh, Uz, Ur, Uh = (t.data for t in (p.W_z, p.W_r, p.W_h, p.U_z, p.U_r, p.U_h))
    xd, hd = x.data, h.data
    z = _sigmoid(_rows_matmul(xd, Wz.T) + _rows_matmul(hd, Uz.T) + p.b_z.data)
    r = _sigmoid(_rows_matmul(xd, Wr.T) + _rows_matmul(hd, Ur.T) + p.b_r.data)
    rh = r * hd
    cand = np.tanh(_rows_matmul(xd, Wh.T) + _rows_matmul(rh, Uh.T) + p.b_h.data)
    out = (1 - z) * hd + z * cand

    def back(g):
        dz = g * (cand - hd)
        dh = g * (1 - z)
        da_h = g * z * (1 - cand * cand)
        drh = da_h @ Uh
        dh += drh * r
        da_r = drh * hd * r * (1 - r)
        da_z = dz * z * (1 - z)
        dh += da_r @ Ur + da_z @ Uz
        dx = da_h @ Wh + da_r @ Wr + da_z @ Wz
        X, H, RH = _flat_rows(xd), _flat_rows(hd), _flat_rows(rh)
        Ah, Ar, Az = _flat_rows(da_h), _flat_rows(da_r), _flat_rows(da_z)
        return (
            dx, dh,
            Az.T @ X, Ar.T @ X, Ah.T @ X,
            Az.T @ H, Ar.T @ H, Ah.T @ RH,
            Az.sum(axis=0), Ar.sum(axis=0), Ah.sum(axis=0),
        )

    inputs = (x, h, p.W_z, p.W_r, p.W_h, p.U_z, p.U_r, p.U_h, p.b_z, p.b_r, p.b_h)
    return _result(out.astype(x.dtype, copy=False), inputs, back)
