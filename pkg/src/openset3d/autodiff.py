"""A small dense-tensor reverse-mode differentiation core.

Tensors wrap numpy arrays. Each op records its parents and a rule that maps
the output gradient to parent gradients; :func:`backward` walks the graph in
reverse topological order. Reductions use numpy's fixed-order kernels, so a
run with the same seed and thread layout is bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Check every op output for NaN/Inf when enabled."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_rule", "op")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._rule = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _size_error(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def _size_error(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, rule, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._rule = rule if out.requires_grad else None
    out.op = op
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.maximum(x.data, 0.0), (x,),
                 lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules; ``b`` is typically a (C, D) weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(ad @ bd, (a, b), rule, "matmul")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def max_over_rows(x) -> Tensor:
    """Max over the second-to-last axis (global max pooling over points).

    The gradient flows to the first maximising row.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"max_over_rows needs at least 2 dims, got shape {x.shape}")
    idx = np.argmax(x.data, axis=-2)
    out = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _make(out, (x,), rule, "max_over_rows")


# ---------------------------------------------------------------- shape ops

def gather_rows(x, idx) -> Tensor:
    """Select rows along the second-to-last axis.

    ``x`` is (N, C) with ``idx`` (m,), or (B, N, C) with ``idx`` (B, m).
    Repeated indices accumulate their gradients.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim == 2 and idx.ndim == 1:
        out = x.data[idx]
        n, c = x.shape

        def rule(g):
            gx = np.zeros((n, c), dtype=g.dtype)
            np.add.at(gx, idx, g)
            return (gx,)

        return _make(out, (x,), rule, "gather_rows")
    if x.ndim == 3 and idx.ndim == 2 and idx.shape[0] == x.shape[0]:
        b, n, c = x.shape
        flat = (idx + (np.arange(b) * n)[:, None]).reshape(-1)
        out = x.data.reshape(b * n, c)[flat].reshape(b, idx.shape[1], c)

        def rule(g):
            gx = np.zeros((b * n, c), dtype=g.dtype)
            g2 = g.reshape(-1, c)
            # rows that are hit once can be written directly; the rest accumulate
            order = np.argsort(flat, kind="stable")
            sf = flat[order]
            starts = np.flatnonzero(np.r_[True, sf[1:] != sf[:-1]])
            gx[sf[starts]] = np.add.reduceat(g2[order], starts, axis=0)
            return (gx.reshape(b, n, c),)

        return _make(out, (x,), rule, "gather_rows")
    raise ValueError(f"gather_rows: unsupported shapes {x.shape} and index {idx.shape}")


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in ts]
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------- softmax & losses

def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(x) -> Tensor:
    x = as_tensor(x)
    s = _softmax(x.data)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),),
                 "row_softmax")


def mse(x, target) -> Tensor:
    """Mean of squared differences over every element."""
    x = as_tensor(x)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=x.data.dtype)
    if t.shape != x.shape:
        raise ValueError(f"mse: prediction shape {x.shape} != target shape {t.shape}")
    diff = x.data - t
    n = diff.size
    return _make(np.asarray((diff * diff).sum() / n), (x,),
                 lambda g: (g * 2.0 * diff / n,), "mse")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    ``logits`` is (..., K) and ``labels`` has the leading shape.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k - 1}]")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)
    n = labels.size

    def rule(g):
        p = np.exp(logp)
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1.0, -1)
        return (g * p / n,)

    return _make(np.asarray(-picked.sum() / n), (logits,), rule, "cross_entropy")


# ---------------------------------------------------------------- backward

def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Leaves listed in ``params`` always end up with a gradient array, zero when
    they are disconnected from ``loss``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    # drop references so the graph can be collected
    loss._parents = ()


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- parameters & optimiser

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, name=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros_param(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise RuntimeError(f"parameter {p.name or '<unnamed>'} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# ---------------------------------------------------------------- checkpoints
#
# Byte layout (all integers little-endian):
#   8 bytes   magic b"OS3DCKPT"
#   u32       format version (1)
#   u32       length L of the metadata blob
#   L bytes   UTF-8 JSON metadata (sorted keys)
#   u32       parameter count P
#   P times:  u16 name length, UTF-8 name, u8 ndim, u32 x ndim dims,
#             u8 dtype code (0 = float64, 1 = float32), raw little-endian values

MAGIC = b"OS3DCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        code = 1 if arr.dtype == np.float32 else 0
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, mlen = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        (code,) = take("<B")
        dt = _DTYPES.get(code)
        if dt is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated in parameter {name}")
        params[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                     offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += nbytes
    return params, meta
