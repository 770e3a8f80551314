"""Minimal reverse-mode autodiff core and the layers built on it.

Everything runs on float64 numpy arrays. The Tensor class records a tape of
elementary ops; Parameter marks trainable leaves. Layers (Dense, LSTMCell,
conv2d) compose Tensor ops, so their gradients come from the same tape and
can all be checked against finite differences.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(RuntimeError):
    """Raised when a forward value or gradient stops being finite."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    # -- graph traversal --

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- elementary ops --

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def back(g):
            self.grad += _unbroadcast(g, self.data.shape)
            other.grad += _unbroadcast(g, other.data.shape)

        out._backward = back
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def back(g):
            self.grad += _unbroadcast(g * other.data, self.data.shape)
            other.grad += _unbroadcast(g * self.data, other.data.shape)

        out._backward = back
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    __radd__ = __add__
    __rmul__ = __mul__

    def __pow__(self, p: float):
        out = Tensor(self.data ** p, (self,))

        def back(g):
            self.grad += g * p * self.data ** (p - 1)

        out._backward = back
        return out

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self * other ** -1.0

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data @ other.data, (self, other))

        def back(g):
            self.grad += g @ other.data.swapaxes(-1, -2)
            other.grad += _unbroadcast(self.data.swapaxes(-1, -2) @ g, other.data.shape)

        out._backward = back
        return out

    def exp(self):
        out = Tensor(np.exp(self.data), (self,))

        def back(g):
            self.grad += g * out.data

        out._backward = back
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))

        def back(g):
            self.grad += g / self.data

        out._backward = back
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), (self,))

        def back(g):
            self.grad += g * (1.0 - out.data ** 2)

        out._backward = back
        return out

    def sigmoid(self):
        out = Tensor(1.0 / (1.0 + np.exp(-self.data)), (self,))

        def back(g):
            self.grad += g * out.data * (1.0 - out.data)

        out._backward = back
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), (self,))

        def back(g):
            self.grad += g * (self.data > 0.0)

        out._backward = back
        return out

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes only through unclipped entries."""
        out = Tensor(np.clip(self.data, lo, hi), (self,))
        mask = (self.data > lo) & (self.data < hi)

        def back(g):
            self.grad += g * mask

        out._backward = back
        return out

    def sum(self, axis=None):
        out = Tensor(self.data.sum(axis=axis), (self,))

        def back(g):
            if axis is None:
                self.grad += g
            else:
                self.grad += np.expand_dims(g, axis)

        out._backward = back
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))

        def back(g):
            self.grad += g.reshape(self.data.shape)

        out._backward = back
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,))

        def back(g):
            np.add.at(self.grad, idx, g)

        out._backward = back
        return out


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent gradient accumulator."""

    def __init__(self, data):
        super().__init__(data)
        self.grad = np.zeros_like(self.data)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), tuple(tensors))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.grad += piece

    out._backward = back
    return out


# -- convolution --


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad, ho, wo):
    b, c, h, w = x_shape
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3-style 2D convolution on (B, C, H, W) input."""
    cout, cin, kh, kw = w.data.shape
    if x.data.shape[1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape[1]}, weight {cin}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(cout, -1)
    out_data = np.matmul(w2, cols) + b.data[:, None]
    out = Tensor(out_data.reshape(-1, cout, ho, wo), (x, w, b))

    def back(g):
        g2 = g.reshape(g.shape[0], cout, ho * wo)
        w.grad += np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        b.grad += g2.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, g2)
        x.grad += _col2im(dcols, x.data.shape, kh, kw, stride, pad, ho, wo)

    out._backward = back
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling on (B, C, H, W)."""
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,))

    def back(g):
        b, c, h2, w2 = g.shape
        x.grad += g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))

    out._backward = back
    return out


# -- layers --


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = Parameter(uniform_init(rng, (n_in, n_out), n_in))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def parameters(self):
        return {"w": self.w, "b": self.b}


class LSTMCell:
    """Standard gated recurrent cell (input/forget/output gates, tanh candidate)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.wx = Parameter(uniform_init(rng, (n_in, 4 * hidden), n_in))
        self.wh = Parameter(uniform_init(rng, (hidden, 4 * hidden), hidden))
        self.b = Parameter(np.zeros(4 * hidden))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        nh = self.hidden
        gates = x @ self.wx + h @ self.wh + self.b
        i = gates[..., 0 * nh:1 * nh].sigmoid()
        f = gates[..., 1 * nh:2 * nh].sigmoid()
        o = gates[..., 2 * nh:3 * nh].sigmoid()
        g = gates[..., 3 * nh:4 * nh].tanh()
        c_new = f * c + i * g
        h_new = o * c_new.tanh()
        return h_new, c_new

    def parameters(self):
        return {"wx": self.wx, "wh": self.wh, "b": self.b}


class StepEmbedding:
    """Sinusoidal embedding of the diffusion step index."""

    def __init__(self, dim: int):
        if dim % 2 != 0:
            raise ValueError("step embedding dim must be even")
        self.dim = dim
        half = dim // 2
        self.freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)

    def __call__(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=np.float64)
        ang = k[..., None] * self.freqs
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# -- optimizer --


def adam_update(value, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps_opt=1e-8):
    """One Adam step for a single array; returns (value, m, v)."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to adam_update")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad ** 2
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    value = value - lr * m_hat / (np.sqrt(v_hat) + eps_opt)
    return value, m, v


class Adam:
    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps_opt: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_opt = eps_opt
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            p.data, self.m[name], self.v[name] = adam_update(
                p.data, p.grad, self.m[name], self.v[name], self.t,
                self.lr, self.beta1, self.beta2, self.eps_opt)


# -- checkpoints --

CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write a flat key->array map; round-trips bit-exactly."""
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    if "__format_version__" in payload:
        raise ValueError("reserved key __format_version__")
    payload["__format_version__"] = np.array(CHECKPOINT_VERSION)
    np.savez(path, **payload)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(path) as f:
        version = int(f["__format_version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        return {k: f[k] for k in f.files if k != "__format_version__"}
