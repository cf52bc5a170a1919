"""Dense float64 tensors with reverse-mode autodiff, MLP layers and AdamW.

Only the handful of ops needed by the velocity network are implemented.
Every op records a closure on the tape when any input requires grad;
``Tensor.backward`` walks the tape in reverse topological order and then
drops it.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes introduced or stretched by numpy broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """n-d float64 array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        tracked = tuple(p for p in parents if p.requires_grad or p._parents)
        out.requires_grad = bool(tracked)
        if tracked:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -----------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._result(a.data - b.data, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return Tensor.lift(other) - self

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def square(self) -> "Tensor":
        x = self
        return Tensor._result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))

    def __matmul__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def backward(g):
            ga = g @ b.data.T if (a.requires_grad or a._parents) else None
            gb = a.data.T @ g if (b.requires_grad or b._parents) else None
            return ga, gb

        return Tensor._result(a.data @ b.data, (a, b), backward)

    # -- nonlinearities -------------------------------------------------------
    def silu(self) -> "Tensor":
        x = self.data
        sig = expit(x)

        def backward(g):
            return (g * (sig * (1.0 + x * (1.0 - sig))),)

        return Tensor._result(x * sig, (self,), backward)

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._result(y, (self,), lambda g: (g * (1.0 - y * y),))

    # -- reductions and reshaping ---------------------------------------------
    def sum(self, axis=None) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return Tensor._result(np.asarray(self.data.sum(axis=axis)), (self,), backward)

    def mean(self, axis=None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._result(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def take_rows(self, index) -> "Tensor":
        """Gather rows ``self[index]``; gradients scatter-add back."""
        index = np.asarray(index, dtype=np.intp)
        src = self

        def backward(g):
            out = np.zeros_like(src.data)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._result(self.data[index], (self,), backward)

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> dict:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        Returns a map from ``id(leaf)`` to its gradient. The tape is cleared
        afterwards so intermediate buffers can be freed.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self._parents:
            raise ContractError("backward() called on a tensor with an empty tape")

        order: list[Tensor] = []
        seen: set[int] = set()
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        leaves = {}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                    leaves[id(node)] = node.grad
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._parents):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

        for node in order:
            node._parents = ()
            node._backward = None
        return leaves

    def zero_grad(self) -> None:
        self.grad = None


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [Tensor.lift(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._result(data, tuple(tensors), backward)


# -- layers ---------------------------------------------------------------------

ACTIVATIONS = ("silu", "tanh", "identity")


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "silu":
        return x.silu()
    if name == "tanh":
        return x.tanh()
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


class MlpNet:
    """Fully connected net; ``widths=[in, h1, ..., out]``.

    Weights are stored ``[fan_in, fan_out]`` and initialised uniformly in
    ``+-1/sqrt(fan_in)`` from a seeded generator.
    """

    def __init__(self, widths: Sequence[int], activation: str = "silu", seed: int = 0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise DimensionError(f"invalid layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True))

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named.append((f"layer{i}.weight", w))
            named.append((f"layer{i}.bias", b))
        return named

    def num_parameters(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def forward(self, x) -> Tensor:
        x = Tensor.lift(x)
        if x.data.ndim != 2 or x.shape[-1] != self.in_width:
            raise DimensionError(f"net expects [n, {self.in_width}] input, got {x.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = _activate(h, self.activation)
        return h

    __call__ = forward

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState) -> AdamState:
    """In-place AdamW update (decoupled weight decay, bias-corrected moments)."""
    if state.lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return state


class Adam:
    """Binds an :class:`AdamState` to a list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay)

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- finite differences (test oracle helper) -------------------------------------

def numerical_grad(fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``array`` (mutated in place)."""
    out = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


# -- threads ----------------------------------------------------------------------

def configure_threads(limit: int | None = None):
    """Cap BLAS worker threads (``RFLOW_THREADS`` when ``limit`` is None).

    Returns the threadpoolctl controller, or None when no cap applies.
    """
    if limit is None:
        env = os.environ.get("RFLOW_THREADS")
        if not env:
            return None
        limit = int(env)
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(limit)))


# -- checkpoint file ---------------------------------------------------------------
#
# Layout (all integers little-endian):
#   b"RFLOW"                         5 bytes
#   version                          u32 (=1)
#   metadata length L                u32
#   metadata                         L bytes UTF-8, "key=value" lines
#   layer count W                    u32
#   widths                           W x u32
#   activation length A              u32, then A bytes ASCII
#   block count B                    u32
#   per block: name length u32, name bytes, ndim u32, dims ndim x u32,
#              prod(dims) x f64

CHECKPOINT_MAGIC = b"RFLOW"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_metadata(meta: dict) -> str:
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or "=" in key:
            raise FormatError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return "\n".join(lines)


def decode_metadata(text: str) -> dict:
    meta = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def write_checkpoint(path, widths: Sequence[int], activation: str,
                     blocks: Sequence[tuple[str, np.ndarray]], meta: dict) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(encode_metadata(meta)),
             struct.pack("<I", len(widths)), struct.pack(f"<{len(widths)}I", *widths),
             _pack_str(activation), struct.pack("<I", len(blocks))]
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("truncated file")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_checkpoint(path) -> tuple[list[int], str, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(5) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an RFLOW checkpoint")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    meta = decode_metadata(reader.string())
    count = reader.u32()
    widths = list(struct.unpack(f"<{count}I", reader.take(4 * count)))
    activation = reader.string()
    blocks = {}
    for _ in range(reader.u32()):
        name = reader.string()
        ndim = reader.u32()
        dims = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        blocks[name] = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if reader.pos != len(reader.raw):
        raise FormatError(f"{path}: trailing bytes after parameter blocks")
    return widths, activation, blocks, meta
