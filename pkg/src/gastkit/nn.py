"""Parameter containers, layers, Adam, and the checkpoint archive format."""

from __future__ import annotations

import struct

import numpy as np

from . import engine
from .engine import ContractError, Tensor


class Parameter:
    """A named trainable tensor."""

    def __init__(self, data, name=""):
        self.tensor = Tensor(np.asarray(data), requires_grad=True)
        self.name = name

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()


class Module:
    """Lightweight layer container with dotted-path parameter naming."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for m, prefix in self._named_modules():
            for key, arr in getattr(m, "_buffers", {}).items():
                state[f"{prefix}.{key}" if prefix else key] = arr.copy()
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            p.data = state[name].astype(p.data.dtype)
        for m, prefix in self._named_modules():
            for key, arr in getattr(m, "_buffers", {}).items():
                full = f"{prefix}.{key}" if prefix else key
                arr[...] = state[full]

    def _named_modules(self, prefix=""):
        yield self, prefix
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Module):
                yield from val._named_modules(path)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{path}.{i}")


def _he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_he_init(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x):
        return engine.conv2d(x, self.weight.tensor, self.bias.tensor,
                             self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, rng, cin, cout, k, stride=(1, 1, 1), padding=(0, 0, 0),
                 dtype=np.float32):
        super().__init__()
        if isinstance(k, int):
            k = (k, k, k)
        self.stride, self.padding = stride, padding
        fan_in = cin * int(np.prod(k))
        self.weight = Parameter(_he_init(rng, (cout,) + (cin,) + k, fan_in, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x):
        return engine.conv3d(x, self.weight.tensor, self.bias.tensor,
                             self.stride, self.padding)


class BatchNorm(Module):
    """Channel-wise batchnorm; works for [C,...] maps of any rank."""

    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.momentum, self.eps = momentum, eps
        self._buffers = {
            "running_mean": np.zeros(c, dtype=dtype),
            "running_var": np.ones(c, dtype=dtype),
        }

    def __call__(self, x):
        return engine.batchnorm(
            x, self.gamma.tensor, self.beta.tensor,
            self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class ConvBnRelu2d(Module):
    def __init__(self, rng, cin, cout, k, padding=0, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, k, padding=padding, dtype=dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def __call__(self, x):
        return engine.relu(self.bn(self.conv(x)))


class ConvBnRelu3d(Module):
    def __init__(self, rng, cin, cout, k, padding=(0, 0, 0), dtype=np.float32):
        super().__init__()
        self.conv = Conv3d(rng, cin, cout, k, padding=padding, dtype=dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def __call__(self, x):
        return engine.relu(self.bn(self.conv(x)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class NonFiniteGradient(RuntimeError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter '{name}'")
        self.name = name


def adam_step(named_params, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over (name, Parameter) pairs.

    state maps name -> (m, v); mutated in place. state["__step__"] counts
    completed steps. Aborts before touching any parameter if a gradient is
    non-finite.
    """
    named_params = list(named_params)
    for name, p in named_params:
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    t = state.get("__step__", 0) + 1
    state["__step__"] = t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        m, v = state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state[name] = (m, v)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, model, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}

    def step(self):
        adam_step(self.model.named_parameters(), self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def state_arrays(self):
        out = {"opt.__step__": np.array([self.state.get("__step__", 0)], dtype=np.float64)}
        for name, (m, v) in ((k, v) for k, v in self.state.items() if k != "__step__"):
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays):
        self.state = {"__step__": int(arrays["opt.__step__"][0])}
        pairs = {}
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                pairs.setdefault(key[6:], [None, None])[0] = arr
            elif key.startswith("opt.v."):
                pairs.setdefault(key[6:], [None, None])[1] = arr
        for name, (m, v) in pairs.items():
            self.state[name] = (m, v)


# ---------------------------------------------------------------------------
# checkpoint archive: little-endian flat (name, shape, values) entries
# ---------------------------------------------------------------------------

_MAGIC = b"GKPT"
_VERSION = 1
_DTYPES = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}
_DTYPES_INV = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, arrays):
    """Write a dict of name -> float array; round-trips exactly."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            code = _DTYPES[arr.dtype.newbyteorder("<")]
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ContractError(f"{path}: not a checkpoint archive")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            dtype = _DTYPES_INV[code]
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(
                f.read(n * dtype.itemsize), dtype=dtype
            ).reshape(shape).copy()
    return arrays
