"""U-Net noise predictor with sinusoidal time conditioning and decoder feature taps."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError
from .nn import Conv2d, GroupNorm, Linear, Module, Tensor
from .nn.tensor import check_finite

NUM_LEVELS = 5


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    base_width: int = 32
    channel_mults: tuple = (1, 2, 2, 4, 4)
    attention_levels: tuple = (4,)
    time_dim: int = 0  # 0 -> 4 * base_width
    num_res_blocks: int = 1
    check_numerics: bool = True

    def __post_init__(self):
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if len(self.channel_mults) != NUM_LEVELS:
            raise ConfigError(f"need exactly {NUM_LEVELS} channel multipliers, got {self.channel_mults}")
        if any(not 0 <= a < NUM_LEVELS for a in self.attention_levels):
            raise ConfigError(f"attention levels must be in 0..{NUM_LEVELS - 1}")
        if self.base_width % 2:
            raise ConfigError("base_width must be even (sinusoidal embedding width)")

    @property
    def channels(self) -> list:
        return [self.base_width * m for m in self.channel_mults]

    @property
    def temb_dim(self) -> int:
        return self.time_dim or 4 * self.base_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_levels"] = list(self.attention_levels)
        d.pop("check_numerics")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding with interleaved (sin, cos) pairs.

    ``t`` may be a scalar or a vector; returns shape ``(dim,)`` or ``(len(t), dim)``.
    """
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t_arr[:, None] * freqs[None, :]
    emb = np.empty((len(t_arr), dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    emb = emb.astype(np.float32)
    return emb[0] if np.ndim(t) == 0 else emb


class ResBlock(Module):
    def __init__(self, in_ch, out_ch, temb_dim, rng):
        self.norm1 = GroupNorm(in_ch)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng=rng)
        self.temb = Linear(temb_dim, out_ch, rng=rng)
        self.norm2 = GroupNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng=rng)
        self.skip = Conv2d(in_ch, out_ch, 1, rng=rng) if in_ch != out_ch else None

    def forward(self, x, temb):
        h = self.conv1(nn.silu(self.norm1(x)))
        shift = self.temb(nn.silu(temb))
        h = h + shift.reshape(shift.shape[0], 1, 1, shift.shape[1])
        h = self.conv2(nn.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class AttnBlock(Module):
    """Single-head spatial self-attention (channels-last)."""

    def __init__(self, ch, rng):
        self.norm = GroupNorm(ch)
        self.qkv = Conv2d(ch, 3 * ch, 1, rng=rng)
        self.proj = Conv2d(ch, ch, 1, rng=rng)

    def forward(self, x):
        n, h, w, c = x.shape
        qkv = nn.transpose(self.qkv(self.norm(x)).reshape(n, h * w, 3, c), (2, 0, 1, 3))
        q, k, v = (_take0(qkv, i) for i in range(3))
        attn = nn.softmax(nn.matmul(q, nn.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(c)), axis=-1)
        out = nn.matmul(attn, v).reshape(n, h, w, c)
        return x + self.proj(out)


def _take0(x: Tensor, i: int) -> Tensor:
    # Differentiable x[i] along axis 0.
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return nn.tensor.make(x.data[i], (x,), backward)


class Denoiser(Module):
    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.channels
        td = config.temb_dim
        self.time_mlp = [Linear(config.base_width, td, rng=rng), Linear(td, td, rng=rng)]
        self.conv_in = Conv2d(config.in_channels, ch[0], 3, rng=rng)

        self.down_blocks, self.down_attn, self.downsample = [], [], []
        prev = ch[0]
        for lvl in range(NUM_LEVELS):
            blocks = []
            for _ in range(config.num_res_blocks):
                blocks.append(ResBlock(prev, ch[lvl], td, rng))
                prev = ch[lvl]
            self.down_blocks.append(_Seq(blocks))
            self.down_attn.append(AttnBlock(ch[lvl], rng) if lvl in config.attention_levels else None)
            if lvl < NUM_LEVELS - 1:
                self.downsample.append(Conv2d(ch[lvl], ch[lvl], 3, stride=2, rng=rng))

        self.mid1 = ResBlock(prev, prev, td, rng)
        self.mid_attn = AttnBlock(prev, rng)
        self.mid2 = ResBlock(prev, prev, td, rng)

        # up_blocks[lvl] serves resolution level lvl; built coarse -> fine.
        self.up_blocks = [None] * NUM_LEVELS
        self.up_attn = [None] * NUM_LEVELS
        self.upsample = [None] * NUM_LEVELS
        for lvl in reversed(range(NUM_LEVELS)):
            self.up_blocks[lvl] = ResBlock(prev + ch[lvl], ch[lvl], td, rng)
            self.up_attn[lvl] = AttnBlock(ch[lvl], rng) if lvl in config.attention_levels else None
            if lvl > 0:
                # Project to the finer level's width after upsampling; keeps
                # the full-resolution convolutions narrow.
                self.upsample[lvl] = Conv2d(ch[lvl], ch[lvl - 1], 3, rng=rng)
                prev = ch[lvl - 1]

        self.norm_out = GroupNorm(ch[0])
        self.conv_out = Conv2d(ch[0], config.in_channels, 3, rng=rng)

    @property
    def feature_channels(self) -> list:
        return list(self.config.channels)

    def _check(self, h, where):
        if self.config.check_numerics:
            check_finite(h, where)

    def forward_with_features(self, x, t):
        """Return ``(eps_hat, features)``; features ordered finest -> coarsest."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4:
            raise DimensionError(f"denoiser expects (N, C, H, W) input, got shape {x.shape}")
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise DimensionError(f"denoiser input axis 1 has {c} channels, expected {self.config.in_channels}")
        div = 2 ** (NUM_LEVELS - 1)
        if h % div or w % div:
            raise DimensionError(f"spatial dims (axes 2, 3) = ({h}, {w}) must be divisible by {div}")
        t = np.broadcast_to(np.asarray(t), (n,))
        x = nn.transpose(x, (0, 2, 3, 1))
        temb = Tensor(timestep_embedding(t, self.config.base_width).astype(x.dtype))
        temb = self.time_mlp[1](nn.silu(self.time_mlp[0](temb)))

        hcur = self.conv_in(x)
        skips = []
        for lvl in range(NUM_LEVELS):
            hcur = self.down_blocks[lvl](hcur, temb)
            if self.down_attn[lvl] is not None:
                hcur = self.down_attn[lvl](hcur)
            self._check(hcur, f"down_blocks.{lvl}")
            skips.append(hcur)
            if lvl < NUM_LEVELS - 1:
                hcur = self.downsample[lvl](hcur)

        hcur = self.mid2(self.mid_attn(self.mid1(hcur, temb)), temb)
        self._check(hcur, "mid")

        features = [None] * NUM_LEVELS
        for lvl in reversed(range(NUM_LEVELS)):
            hcur = self.up_blocks[lvl](nn.concat([hcur, skips[lvl]], axis=-1), temb)
            if self.up_attn[lvl] is not None:
                hcur = self.up_attn[lvl](hcur)
            self._check(hcur, f"up_blocks.{lvl}")
            features[lvl] = nn.transpose(nn.silu(hcur), (0, 3, 1, 2))
            if lvl > 0:
                hcur = self.upsample[lvl](nn.upsample_nearest_nhwc(hcur, 2))

        out = self.conv_out(nn.silu(self.norm_out(hcur)))
        self._check(out, "conv_out")
        return nn.transpose(out, (0, 3, 1, 2)), features

    def forward(self, x, t):
        return self.forward_with_features(x, t)[0]


class _Seq(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x, temb):
        for b in self.blocks:
            x = b(x, temb)
        return x


def build(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    return Denoiser(config, seed)
