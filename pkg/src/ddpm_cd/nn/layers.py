"""Module/Parameter containers and the layers the networks are built from."""
from __future__ import annotations

import hashlib
import math

import numpy as np

from ..errors import DataError
from . import functional as F
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Minimal module tree; parameters and children are discovered from attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise DataError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DataError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def param_hash(self) -> str:
        """SHA-256 over parameter names, shapes and bytes, in name order."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Convolution layer.  Layers operate channels-last (N, H, W, C)."""

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, padding=None, rng=None,
                 bias=True, init_scale=1.0):
        rng = rng or np.random.default_rng(0)
        if padding is None:
            padding = kernel_size // 2
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel_size * kernel_size
        self.weight = Parameter(init_scale * kaiming_uniform(
            rng, (out_ch, in_ch, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return F.conv2d_nhwc(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, bias=True):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


def default_groups(channels: int) -> int:
    # Channel group size min(8, C); falls back to a divisor when C % 8 != 0.
    size = math.gcd(min(8, channels), channels)
    return channels // size


class GroupNorm(Module):
    def __init__(self, channels, num_groups=None, eps=1e-5):
        self.num_groups = num_groups or default_groups(channels)
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return F.group_norm_nhwc(x, self.num_groups, self.weight, self.bias, self.eps)


class SiLU(Module):
    def forward(self, x):
        return T.silu(x)
