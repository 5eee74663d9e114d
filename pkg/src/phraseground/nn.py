"""Small module system and the shared layers (linear, norms, attention, FFN).

Modules register parameters and submodules through attribute assignment, the
way the big frameworks do it, so checkpoints get stable dotted names.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import ContractViolation, Parameter, Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._parameters[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, ModuleList):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for key, p in self._parameters.items():
            name = f"{prefix}{key}"
            p.name = name
            yield name, p
        for key, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self, flag: bool = True):
        for p in self.parameters():
            p.frozen = flag
        return self

    def state_dict(self) -> dict:
        names = {}
        for name, p in self.named_parameters():
            if name in names:
                raise ContractViolation(f"duplicate parameter name {name}")
            names[name] = p.data.copy()
        return names

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            raise ContractViolation(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ContractViolation(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# ---------------------------------------------------------------------------
# init helpers


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, zero_init: bool = False, gain: float = 1.0):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = uniform_init(rng, (d_in, d_out), d_in, dtype, gain)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        super().__init__()
        self.scale = Parameter(np.ones(dim, dtype=dtype))
        self.shift = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.normalize(x, axes=-1) * self.scale + self.shift


class GroupNorm(Module):
    """Group normalization for [H, W, C] features."""

    def __init__(self, channels: int, groups: int = 8, dtype=np.float32):
        super().__init__()
        while channels % groups:
            groups -= 1
        self.groups = groups
        self.channels = channels
        self.scale = Parameter(np.ones(channels, dtype=dtype))
        self.shift = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        H, W, C = x.shape
        g = self.groups
        xg = x.reshape((H, W, g, C // g))
        xn = ops.normalize(xg, axes=(0, 1, 3)).reshape((H, W, C))
        return xn * self.scale + self.shift


class FeedForward(Module):
    def __init__(self, dim: int, rng, dtype=np.float32, ratio: int = 2, zero_init_out: bool = False):
        super().__init__()
        self.up = Linear(dim, dim * ratio, rng, dtype)
        self.down = Linear(dim * ratio, dim, rng, dtype, zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import silu

        return self.down(silu(self.up(x)))


class MultiHeadAttention(Module):
    """Multi-head attention over token stacks [T, C].

    Returns both the output and the head-averaged post-softmax attention map
    [Tq, Tk]; the mask heads feed on those maps.
    """

    def __init__(self, q_dim: int, kv_dim: int, dim: int, heads: int, rng,
                 dtype=np.float32, zero_init_out: bool = False):
        super().__init__()
        if dim % heads:
            raise ContractViolation(f"attention dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = dim // heads
        self.dim = dim
        # half-gain queries keep init-time attention logits small
        self.wq = Linear(q_dim, dim, rng, dtype, gain=0.5)
        # key bias is shift-invariant under the softmax: a dead parameter
        self.wk = Linear(kv_dim, dim, rng, dtype, bias=False)
        self.wv = Linear(kv_dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype, zero_init=zero_init_out)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None = None):
        Tq = q_in.shape[0]
        Tk = kv_in.shape[0]
        h, d = self.heads, self.d_head
        q = self.wq(q_in).reshape((Tq, h, d)).transpose((1, 0, 2))
        k = self.wk(kv_in).reshape((Tk, h, d)).transpose((1, 0, 2))
        v = self.wv(kv_in).reshape((Tk, h, d)).transpose((1, 0, 2))
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / math.sqrt(d))
        if mask is None:
            attn = ops.softmax(scores, axis=-1)
        else:
            attn = ops.masked_softmax(scores, np.broadcast_to(mask, scores.shape), axis=-1)
        out = (attn @ v).transpose((1, 0, 2)).reshape((Tq, h * d))
        return self.wo(out), attn.mean(axis=0)


def sinusoidal_rows(n: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 1-D sinusoidal position table [n, dim]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.arange(n)[:, None] * freqs[None, :]
    table = np.zeros((n, dim), dtype=dtype)
    table[:, 0:2 * half:2] = np.sin(ang)
    table[:, 1:2 * half:2] = np.cos(ang)
    return table


_POS2D_CACHE: dict = {}


def sinusoidal_grid(h: int, w: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sinusoidal position table [h*w, dim] (row-major flatten)."""
    key = (h, w, dim, np.dtype(dtype).str)
    out = _POS2D_CACHE.get(key)
    if out is None:
        half = dim // 2
        rows = sinusoidal_rows(h, half, dtype)
        cols = sinusoidal_rows(w, dim - half, dtype)
        out = np.concatenate(
            [np.repeat(rows, w, axis=0), np.tile(cols, (h, 1))], axis=1
        )
        _POS2D_CACHE[key] = out
    return out


def grid_reference_points(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Half-pixel-centered normalized (u, v) coordinates, row-major [h*w, 2]."""
    v = (np.arange(h, dtype=np.float64) + 0.5) / h
    u = (np.arange(w, dtype=np.float64) + 0.5) / w
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu.ravel(), vv.ravel()], axis=1).astype(dtype)
