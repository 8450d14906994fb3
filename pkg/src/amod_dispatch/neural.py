"""A small reverse-mode differentiation kernel on top of numpy.

Tensors record the operation that produced them; ``backward`` walks the
graph in reverse topological order and accumulates gradients into every
tensor that requires them.  The op set is what the dispatching networks
need: affine layers, pointwise activations, softmax, concatenation, row
gathers, segment sums and a few reductions.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _needs(*xs) -> bool:
    return any(x.requires_grad for x in xs)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    if not _needs(a, b):
        return Tensor(out)
    return Tensor(out, True, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data
    if not _needs(a, b):
        return Tensor(out)
    return Tensor(out, True, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data
    if not _needs(a, b):
        return Tensor(out)
    return Tensor(out, True, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    if not _needs(a, b):
        return Tensor(out)

    def back(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, True, (a, b), back, "matmul")


def affine(x, w, b=None) -> Tensor:
    """x @ w + b for x of shape (n, in), w of shape (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not fit weight {w.shape}")
    if b is None:
        return matmul(x, w)
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} does not fit weight {w.shape}")
    out = x.data @ w.data + b.data
    if not _needs(x, w, b):
        return Tensor(out)
    return Tensor(out, True, (x, w, b),
                  lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)), "affine")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: (g * out,), "exp")


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis (log-sum-exp stabilised)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    if not x.requires_grad:
        return Tensor(out)
    soft = np.exp(out)
    return Tensor(out, True, (x,),
                  lambda g: (g - soft * g.sum(axis=-1, keepdims=True),), "log_softmax")


def softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,),
                  lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax")


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    if not _needs(*xs):
        return Tensor(out)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(out, True, tuple(xs), back, "concat")


def total(x, axis=None, keepdims=False) -> Tensor:
    """Sum reduction."""
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    if not x.requires_grad:
        return Tensor(np.asarray(out))

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(np.asarray(out), True, (x,), back, "sum")


def weighted_sum(x, weights) -> Tensor:
    """Sum over rows of x weighted by a per-row weight vector: (n, d), (n,) -> (d,)."""
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.data.ndim != 1 or x.data.ndim != 2 or x.shape[0] != weights.shape[0]:
        raise ShapeError(f"weighted_sum: shapes {x.shape} and {weights.shape}")
    out = weights.data @ x.data
    if not _needs(x, weights):
        return Tensor(out)
    return Tensor(out, True, (x, weights),
                  lambda g: (np.outer(weights.data, g), x.data @ g), "weighted_sum")


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]
    if not x.requires_grad:
        return Tensor(out)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(out, True, (x,), back, "gather_rows")


def segment_matmul(mask, x) -> Tensor:
    """Constant 0/1 (or weight) matrix times x; used for per-segment sums."""
    mask = np.asarray(mask, dtype=DTYPE)
    x = as_tensor(x)
    if mask.ndim != 2 or mask.shape[1] != x.shape[0]:
        raise ShapeError(f"segment_matmul: mask {mask.shape} does not fit {x.shape}")
    out = mask @ x.data
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: (mask.T @ g,), "segment_matmul")


def segment_sum(x, segments, n_segments) -> Tensor:
    segments = np.asarray(segments, dtype=np.int64)
    mask = np.zeros((n_segments, len(segments)))
    mask[segments, np.arange(len(segments))] = 1.0
    return segment_matmul(mask, x)


def huber(prediction, target, delta=10.0) -> Tensor:
    """Elementwise Huber loss: 0.5 e^2 inside |e| <= delta, delta (|e| - delta/2) beyond."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"huber: shapes {prediction.shape} and {target.shape}")
    e = prediction.data - target.data
    inside = np.abs(e) <= delta
    out = np.where(inside, 0.5 * e * e, delta * (np.abs(e) - 0.5 * delta))
    if not _needs(prediction, target):
        return Tensor(out)
    de = np.where(inside, e, delta * np.sign(e))
    return Tensor(out, True, (prediction, target), lambda g: (g * de, -g * de), "huber")


# --------------------------------------------------------------------------
# parameters


class ParameterSet:
    """Named parameter tensors.  Names ending in ``/b`` are biases."""

    def __init__(self, arrays=None):
        self.tensors: dict[str, Tensor] = {}
        self.version = 0
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, array) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(array, dtype=DTYPE), requires_grad=True)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def weight_names(self):
        return [k for k in self.tensors if not k.endswith("/b")]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: t.data.copy() for k, t in self.tensors.items()})

    def assign(self, arrays: dict) -> None:
        for k, arr in arrays.items():
            if self.tensors[k].data.shape != np.shape(arr):
                raise ShapeError(f"parameter {k}: shape {np.shape(arr)} != {self.tensors[k].data.shape}")
            self.tensors[k].data = np.array(arr, dtype=DTYPE)
        self.version += 1

    def n_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def l2_penalty(params: ParameterSet, coefficient: float = 1e-4) -> Tensor:
    """coefficient * sum of squared weights; biases are excluded."""
    terms = [total(mul(params[k], params[k])) for k in params.weight_names()]
    if not terms:
        return Tensor(np.asarray(0.0))
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return mul(acc, coefficient)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict, max_norm: float = 10.0) -> dict:
    """Scale the whole gradient set down when its global L2 norm exceeds max_norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterSet, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"AMODCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_bytes(buf: io.BytesIO, payload: bytes) -> None:
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    """Length-prefixed binary file: magic, version, metadata JSON, named tensors."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _pack_bytes(buf, json.dumps(metadata or {}, sort_keys=True).encode())
    buf.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        _pack_bytes(buf, name.encode())
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        _pack_bytes(buf, arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expected_version: int = FORMAT_VERSION):
    """Inverse of save_checkpoint; returns (tensors, metadata)."""
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def take_blob():
        (n,) = struct.unpack("<Q", take(8))
        return bytes(take(n))

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != expected_version:
        raise CheckpointError(f"checkpoint format version {version}, expected {expected_version}")
    try:
        metadata = json.loads(take_blob().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from None
    (count,) = struct.unpack("<Q", take(8))
    tensors = {}
    for _ in range(count):
        name = take_blob().decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        data = take_blob()
        if len(data) != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r} payload does not match its shape")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, metadata
