"""Dense-array math with tape-based reverse-mode differentiation.

Only what the models in this package need: row-major 2-D activations,
elementwise nonlinearities, matmul with bias-add, reductions, and a few
piecewise ops (clip, minimum, where) for the PPO and quantile losses.

Usage::

    store = ParamStore(seed=0)
    init_mlp(store, "pi", [4, 64, 2])
    tape = Tape()
    with tape:
        out = forward_mlp(store.view("pi", tape), x, MLPSpec([4, 64, 2], "tanh"))
        loss = mean(square(out))
    backward(tape, loss, store)
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ParamStore", "MLPSpec", "ShapeError",
    "const", "add", "sub", "mul", "div", "neg", "matmul", "tanh", "relu",
    "sigmoid", "exp", "log", "square", "abs_", "sum_", "mean", "concat",
    "columns", "clip", "minimum", "where", "log_softmax", "take_rows",
    "no_grad", "forward_mlp", "init_mlp", "backward", "adam_step",
    "save_checkpoint", "load_checkpoint", "numeric_grad",
]

ACTIVATIONS = ("tanh", "relu", "linear", "sigmoid")


class ShapeError(ValueError):
    """Raised when operand shapes disagree."""


# ----------------------------------------------------------------------
# tensors and tape

_ACTIVE: list["Tape"] = []
_NO_GRAD = [0]


class Tensor:
    """A node in the computation graph.

    ``data`` is a numpy array. ``requires_grad`` marks nodes whose gradient
    is wanted; ``param`` names the ParamStore entry a leaf was read from.
    """

    __slots__ = ("data", "requires_grad", "param", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, param: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" param={self.param}" if self.param else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


class Tape:
    """Ordered record of primitive operations.

    Entering the tape as a context makes it the recording target; ops whose
    inputs require gradients append ``(output, inputs, vjp)`` in execution
    order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.leaves: dict[str, Tensor] = {}

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append((out, inputs, vjp))

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) backwards; returns id(node) -> grad."""
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(gi, inp.data.shape)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads


@contextmanager
def no_grad():
    """Evaluate ops without recording (outputs are constants)."""
    _NO_GRAD[0] += 1
    try:
        yield
    finally:
        _NO_GRAD[0] -= 1


def const(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    needs = (not _NO_GRAD[0]) and _ACTIVE and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=bool(needs))
    if needs:
        _ACTIVE[-1].record(out, inputs, vjp)
    return out


# ----------------------------------------------------------------------
# primitive ops

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    # 64-bit accumulation, result cast back to the operand dtype
    out = a.data.sum(axis=axis, dtype=np.float64).astype(a.data.dtype)
    shape = a.data.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.data.dtype),)

    return _make(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis), np.asarray(1.0 / n, dtype=a.data.dtype))


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]``."""
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input lies strictly inside."""
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def where(cond: np.ndarray, a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (g * cond, g * ~cond))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``a[i, idx[i]]`` for each row, returning shape (n,)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, idx] = g
        return (full,)

    return _make(a.data[rows, idx], (a,), vjp)


# ----------------------------------------------------------------------
# parameters

class ParamStore:
    """Named trainable arrays with gradient accumulators and Adam moments.

    Iteration order is insertion order. ``rng`` is the generator used for
    initialization so that a store built from the same seed is identical.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def zero_grad(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.grads[n].fill(0)

    def view(self, prefix: str, tape: Tape | None = None,
             trainable: bool = True) -> dict[str, Tensor]:
        """Leaf tensors for every parameter under ``prefix``.

        With a tape and ``trainable``, leaves require gradients and are
        registered on the tape; otherwise they are constants.
        """
        out = {}
        for n in self.names(prefix):
            if tape is not None and trainable:
                leaf = tape.leaves.get(n)
                if leaf is None:
                    leaf = Tensor(self.values[n], requires_grad=True, param=n)
                    tape.leaves[n] = leaf
            else:
                leaf = Tensor(self.values[n])
            out[n[len(prefix):].lstrip(".")] = leaf
        return out

    def astype(self, dtype) -> "ParamStore":
        """Copy with values cast to ``dtype`` (used by gradient checks)."""
        new = ParamStore(dtype=dtype)
        for n, v in self.values.items():
            new.add(n, v)
        return new

    def copy(self) -> "ParamStore":
        new = self.astype(self.dtype)
        for n in self.values:
            new.m[n] = self.m[n].copy()
            new.v[n] = self.v[n].copy()
        new.step = self.step
        return new

    def flat(self, prefix: str = "") -> np.ndarray:
        names = self.names(prefix)
        if not names:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([self.values[n].ravel() for n in names])


def backward(tape: Tape, loss: Tensor, store: ParamStore | None = None,
             accumulate: bool = False) -> dict[str, np.ndarray]:
    """Backpropagate a scalar loss and return gradients by parameter name.

    When ``store`` is given its gradient buffers are overwritten (or added to
    with ``accumulate``) for every leaf registered on the tape; leaves that
    did not contribute receive zeros.
    """
    grads = tape.gradients(loss)
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(id(leaf))
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)
        out[name] = g
        if store is not None:
            if accumulate:
                store.grads[name] += g
            else:
                store.grads[name][...] = g
    return out


# ----------------------------------------------------------------------
# multilayer perceptrons

@dataclass(frozen=True)
class MLPSpec:
    sizes: tuple[int, ...]
    activation: str = "tanh"
    out_activation: str = "linear"

    def __init__(self, sizes: Iterable[int], activation: str = "tanh",
                 out_activation: str = "linear"):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        for act in (activation, out_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "activation", activation)
        object.__setattr__(self, "out_activation", out_activation)


_ACT_FN = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "linear": lambda t: t}


def init_mlp(store: ParamStore, prefix: str, sizes: Sequence[int],
             zero_last: bool = False) -> None:
    """Xavier-uniform weights, zero biases, drawn from ``store.rng``."""
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if zero_last and last:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = store.rng.uniform(-bound, bound, size=(fan_in, fan_out))
        store.add(f"{prefix}.W{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def forward_mlp(params: dict[str, Tensor], x, spec: MLPSpec) -> Tensor:
    """Run an MLP given leaves named ``W0, b0, W1, b1, ...``."""
    h = _as_tensor(x)
    if h.data.ndim != 2:
        raise ShapeError(f"layer 0: expected 2-D input, got shape {h.shape}")
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        W, b = params[f"W{i}"], params[f"b{i}"]
        if h.shape[1] != W.shape[0]:
            raise ShapeError(f"layer {i}: input width {h.shape[1]} != weight rows {W.shape[0]}")
        h = add(matmul(h, W), b)
        act = spec.activation if i < n_layers - 1 else spec.out_activation
        h = _ACT_FN[act](h)
    return h


# ----------------------------------------------------------------------
# optimizer

@dataclass
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None


def adam_step(store: ParamStore, names: Sequence[str], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              max_grad_norm: float | None = None, step: int | None = None) -> None:
    """One bias-corrected Adam update of the named parameters.

    Each parameter group keeps its own step count in ``store.m``'s sibling
    ``store.step`` only when ``step`` is omitted; trainers that alternate
    groups pass their own counter.
    """
    for n in names:
        if not np.all(np.isfinite(store.grads[n])):
            raise FloatingPointError(f"non-finite gradient in parameter {n!r}")
    scale = 1.0
    if max_grad_norm is not None:
        total = np.sqrt(sum(float(np.sum(np.square(store.grads[n], dtype=np.float64)))
                            for n in names))
        if total > max_grad_norm:
            scale = max_grad_norm / (total + 1e-12)
    if step is None:
        store.step += 1
        step = store.step
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for n in names:
        g = store.grads[n] * scale
        m = store.m[n]
        v = store.v[n]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr:
            upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
            store.values[n] -= upd.astype(store.dtype)


# ----------------------------------------------------------------------
# checkpoints

_MAGIC = b"BDPGCKPT"
_VERSION = 1


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Header (JSON, length-prefixed) followed by little-endian float32
    payloads: all values, then first moments, then second moments."""
    entries = [{"name": n, "shape": list(v.shape)} for n, v in store.values.items()]
    header = json.dumps({"version": _VERSION, "entries": entries, "step": store.step,
                         "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        for table in (store.values, store.m, store.v):
            for n in store.values:
                fh.write(np.ascontiguousarray(table[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    offset = 16 + hlen
    store = ParamStore()
    shapes = [(e["name"], tuple(e["shape"])) for e in header["entries"]]
    for table in ("values", "m", "v"):
        for name, shape in shapes:
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += 4 * n
            if table == "values":
                store.add(name, arr.astype(np.float32))
            else:
                getattr(store, table)[name] = arr.astype(np.float32)
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    store.step = header["step"]
    return store, header["meta"]


# ----------------------------------------------------------------------
# finite differences

def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (in place)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad
