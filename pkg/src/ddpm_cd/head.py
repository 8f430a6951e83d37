"""Lightweight change-detection head over multi-scale feature differences.

Per scale: concurrent channel/spatial squeeze-excitation, then a 1x1
projection.  Coarse scales are nearest-upsampled to full resolution, the
projections are concatenated, fused by a 3x3 convolution and mapped to two
logits per pixel.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, InvariantError
from .features import extract_pair, feature_difference
from .metrics import ConfusionCounts, accumulate, scores
from .nn import Conv2d, Linear, Module, Tensor

log = logging.getLogger(__name__)


@dataclass
class CdHeadConfig:
    in_channels: tuple
    reduction: int = 16
    fusion_width: int = 16
    num_classes: int = 2

    def __post_init__(self):
        self.in_channels = tuple(int(c) for c in self.in_channels)
        for c in self.in_channels:
            if c % self.reduction:
                raise ConfigError(
                    f"channel count {c} not divisible by attention reduction ratio {self.reduction}")

    def to_dict(self) -> dict:
        return {"in_channels": list(self.in_channels), "reduction": self.reduction,
                "fusion_width": self.fusion_width, "num_classes": self.num_classes}


class ChannelSpatialAttention(Module):
    """max(x * sigmoid(channel gate), x * sigmoid(spatial gate)), channels-last."""

    def __init__(self, channels, reduction, rng):
        if channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by reduction {reduction}")
        self.fc1 = Linear(channels, channels // reduction, rng=rng)
        self.fc2 = Linear(channels // reduction, channels, rng=rng)
        self.spatial = Conv2d(channels, 1, 1, rng=rng)

    def forward(self, x):
        n, h, w, c = x.shape
        squeezed = nn.mean(x, axis=(1, 2))
        cgate = nn.sigmoid(self.fc2(nn.relu(self.fc1(squeezed)))).reshape(n, 1, 1, c)
        sgate = nn.sigmoid(self.spatial(x))
        return nn.maximum(x * cgate, x * sgate)


def csa_forward(x, params: ChannelSpatialAttention) -> Tensor:
    """Apply channel-spatial attention to an (N, C, H, W) tensor."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"csa_forward expects (N, C, H, W), got {x.shape}")
    out = params(nn.transpose(x, (0, 2, 3, 1)))
    return nn.transpose(out, (0, 3, 1, 2))


class CdHead(Module):
    def __init__(self, config: CdHeadConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        fw = config.fusion_width
        self.attn = [ChannelSpatialAttention(c, config.reduction, rng) for c in config.in_channels]
        self.proj = [Conv2d(c, fw, 1, rng=rng) for c in config.in_channels]
        self.fuse = Conv2d(fw * len(config.in_channels), fw, 3, rng=rng)
        self.classify = Conv2d(fw, config.num_classes, 1, rng=rng)

    def forward(self, diffs) -> Tensor:
        """(N, C_s, H/2^s, W/2^s) difference maps -> (N, 2, H, W) logits."""
        if len(diffs) != len(self.config.in_channels):
            raise DimensionError(f"head expects {len(self.config.in_channels)} scales, got {len(diffs)}")
        parts = []
        full = None
        for s, d in enumerate(diffs):
            d = d if isinstance(d, Tensor) else Tensor(np.asarray(d, dtype=np.float32))
            if d.shape[1] != self.config.in_channels[s]:
                raise DimensionError(
                    f"scale {s}: {d.shape[1]} channels, head built for {self.config.in_channels[s]}")
            y = self.proj[s](self.attn[s](nn.transpose(d, (0, 2, 3, 1))))
            if full is None:
                full = y.shape[1:3]
            factor = full[0] // y.shape[1]
            if factor > 1:
                y = nn.upsample_nearest_nhwc(y, factor)
            parts.append(y)
        h = nn.silu(self.fuse(nn.concat(parts, axis=-1)))
        return nn.transpose(self.classify(h), (0, 3, 1, 2))


def build_head(feature_channels, n_timesteps: int, reduction: int = 16, fusion_width: int = 16,
               seed: int = 0) -> CdHead:
    cfg = CdHeadConfig(tuple(c * n_timesteps for c in feature_channels), reduction, fusion_width)
    return CdHead(cfg, seed)


# -- training / inference ------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 8
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr_end: float
    val: dict | None = None


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict | None = None


def _stack_batch(samples, idx):
    diffs = [np.concatenate([samples[i][0][s] for i in idx], axis=0) for s in range(len(samples[0][0]))]
    labels = np.concatenate([samples[i][1][None] if samples[i][1].ndim == 2 else samples[i][1] for i in idx])
    return diffs, labels


def train_cd(head: CdHead, train_views, cfg: TrainConfig, frozen_model=None, val_set=None,
             on_epoch=None) -> TrainResult:
    """Optimise the head with pixel-wise CE and AdamW; the backbone is never touched.

    ``train_views`` is either a list of ``(diffs, mask)`` samples or a list of
    such lists (one per noise draw); epoch ``e`` uses view ``e % len(views)``.
    ``val_set`` (same sample form) drives model selection by F1 when given.
    The learning rate decays linearly per step and reaches 0 at the end of
    the last epoch.
    """
    views = train_views if train_views and isinstance(train_views[0], list) else [train_views]
    before = frozen_model.param_hash() if frozen_model is not None else None
    params = head.named_parameters()
    names, plist = zip(*params)
    opt = nn.AdamW(plist, lr=cfg.lr, weight_decay=cfg.weight_decay, names=names)
    rng = np.random.default_rng(cfg.seed)
    n = len(views[0])
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    result = TrainResult()
    best_f1 = -1.0
    for epoch in range(cfg.epochs):
        samples = views[epoch % len(views)]
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            diffs, labels = _stack_batch(samples, idx)
            frac = epoch + b / steps_per_epoch
            lr = nn.lr_linear_decay(frac, cfg.epochs, cfg.lr)
            opt.zero_grad()
            loss = nn.cross_entropy(head(diffs), labels)
            loss.backward()
            opt.step(lr)
            total += loss.item() * len(idx)
            count += len(idx)
        entry = EpochLog(epoch, total / count, nn.lr_linear_decay(epoch + 1, cfg.epochs, cfg.lr))
        if val_set:
            counts = evaluate_head(head, val_set)
            s = scores(counts)
            entry.val = {"f1": s.f1, "iou": s.iou, "oa": s.oa}
            if s.f1 > best_f1:
                best_f1 = s.f1
                result.best_epoch = epoch
                result.best_state = {k: v.copy() for k, v in head.state_dict().items()}
        result.log.append(entry)
        log.info("epoch %d loss %.4f%s", epoch, entry.loss,
                 f" val f1 {entry.val['f1']:.4f}" if entry.val else "")
        if on_epoch is not None:
            on_epoch(entry)
    if result.best_state is not None:
        head.load_state_dict(result.best_state)
    if frozen_model is not None and frozen_model.param_hash() != before:
        raise InvariantError("denoiser parameters changed during CD-head training")
    return result


@dataclass
class ChangeMap:
    probabilities: np.ndarray  # (2, H, W)
    labels: np.ndarray         # (H, W) uint8 in {0, 1}


def probabilities(head: CdHead, diffs) -> np.ndarray:
    with nn.no_grad():
        logits = head(diffs).data
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def to_change_map(probs: np.ndarray, threshold: float = 0.5) -> ChangeMap:
    # p(change) exactly at the threshold counts as no-change.
    return ChangeMap(probs, (probs[1] > threshold).astype(np.uint8))


def predict_from_diffs(head: CdHead, diffs, threshold: float = 0.5) -> list:
    probs = probabilities(head, diffs)
    return [to_change_map(p, threshold) for p in probs]


def predict(head: CdHead, frozen_model, img_a, img_b, tset, sched, noise_seed: int = 0,
            threshold: float = 0.5, pair_index: int = 0) -> ChangeMap:
    sa, sb = extract_pair(frozen_model, img_a, img_b, tset, sched, noise_seed, pair_index)
    return predict_from_diffs(head, feature_difference(sa, sb), threshold)[0]


def evaluate_head(head: CdHead, samples, threshold: float = 0.5, batch_size: int = 8) -> ConfusionCounts:
    counts = ConfusionCounts()
    for start in range(0, len(samples), batch_size):
        idx = range(start, min(len(samples), start + batch_size))
        diffs, labels = _stack_batch(samples, idx)
        for cm, gt in zip(predict_from_diffs(head, diffs, threshold), labels):
            counts = accumulate(counts, cm.labels, gt)
    return counts
