"""Multi-scale, multi-timestep feature stacks from a frozen denoiser."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffusion import NoiseSchedule, q_sample
from .errors import ConfigError, DataError
from .nn import Tensor, no_grad


def timestep_set(ts, T: int | None = None) -> tuple:
    """Validate an ordered set of distinct timesteps in [1, T]."""
    ts = tuple(int(t) for t in ts)
    if not ts:
        raise ConfigError("timestep set must be nonempty")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ConfigError(f"timestep set must be strictly increasing, got {ts}")
    if ts[0] < 1:
        raise ConfigError(f"timesteps must be >= 1, got {ts}")
    if T is not None and ts[-1] > T:
        raise ConfigError(f"timestep {ts[-1]} exceeds schedule length T={T}")
    return ts


def scale_timesteps(ts, T: int, reference_T: int = 1000) -> tuple:
    """Map timesteps chosen for a ``reference_T``-step schedule onto a ``T``-step one."""
    return tuple(max(1, int(round(t * T / reference_T))) for t in ts)


@dataclass
class FeatureStack:
    """``levels[k][s]`` is the scale-``s`` feature map (N, C, H, W) at ``timesteps[k]``."""
    levels: list
    timesteps: tuple
    noise_seed: int
    schedule_hash: str
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return sum(len(per_t) for per_t in self.levels)


def noise_for(noise_seed: int, t: int, shape, pair_index: int = 0) -> np.ndarray:
    """Deterministic eps for (seed, pair, timestep); shared by both images of a pair."""
    rng = np.random.default_rng([int(noise_seed), int(pair_index), int(t)])
    return rng.standard_normal(shape).astype(np.float32)


def _batch(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    return arr[None] if arr.ndim == 3 else arr


def _extract_many(model, images: list, tset, sched, noise_seed, pair_index):
    # Every image shares the same eps per timestep and runs through the model
    # on its own, so its features never depend on what it was batched with.
    tset = timestep_set(tset, sched.T)
    stacks = [[] for _ in images]
    with no_grad():
        for t in tset:
            eps = None
            for i, im in enumerate(images):
                x0 = _batch(im)
                if eps is None:
                    eps = noise_for(noise_seed, t, x0.shape[1:], pair_index)
                xt = q_sample(x0, t, np.broadcast_to(eps, x0.shape), sched)
                _, feats = model.forward_with_features(Tensor(xt), np.full(len(x0), t))
                stacks[i].append([f.data for f in feats])
    meta = {"model_hash": getattr(model, "_cached_hash", None)}
    return [FeatureStack(s, tset, int(noise_seed), sched.hash(), dict(meta)) for s in stacks]


def extract(model, image, tset, sched: NoiseSchedule, noise_seed: int, pair_index: int = 0) -> FeatureStack:
    """Noise ``image`` to each t in ``tset`` and collect the five decoder taps.

    ``image`` is (3, H, W) or (N, 3, H, W) in [-1, 1].
    """
    return _extract_many(model, [image], tset, sched, noise_seed, pair_index)[0]


def extract_pair(model, img_a, img_b, tset, sched: NoiseSchedule, noise_seed: int,
                 pair_index: int = 0) -> tuple[FeatureStack, FeatureStack]:
    a, b = _batch(img_a), _batch(img_b)
    if a.shape != b.shape:
        raise DataError(f"pair shape mismatch: {a.shape} vs {b.shape}")
    sa, sb = _extract_many(model, [a, b], tset, sched, noise_seed, pair_index)
    return sa, sb


def concat_timesteps(stack: FeatureStack) -> list:
    """Per scale, concatenate the timestep maps along channels in timestep order."""
    n_scales = len(stack.levels[0])
    return [np.concatenate([per_t[s] for per_t in stack.levels], axis=1) for s in range(n_scales)]


def feature_difference(stack_a, stack_b) -> list:
    """Per-scale |f_a - f_b| of the timestep-concatenated features."""
    fa = concat_timesteps(stack_a) if isinstance(stack_a, FeatureStack) else list(stack_a)
    fb = concat_timesteps(stack_b) if isinstance(stack_b, FeatureStack) else list(stack_b)
    if len(fa) != len(fb) or any(x.shape != y.shape for x, y in zip(fa, fb)):
        raise DataError("feature stacks are not shape-compatible")
    return [np.abs(x - y) for x, y in zip(fa, fb)]


def pair_difference(model, img_a, img_b, tset, sched, noise_seed, pair_index=0) -> list:
    sa, sb = extract_pair(model, img_a, img_b, tset, sched, noise_seed, pair_index)
    return feature_difference(sa, sb)


# -- optional on-disk cache ----------------------------------------------------

def model_hash(model) -> str:
    h = getattr(model, "_cached_hash", None)
    if h is None:
        h = model.param_hash()[:16]
        model._cached_hash = h
    return h


def cache_key(pair_id: str, tset, sched: NoiseSchedule, mhash: str, noise_seed: int) -> str:
    raw = f"{pair_id}|{','.join(map(str, tset))}|{sched.hash()}|{mhash}|{noise_seed}"
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def save_stack(path, stack: FeatureStack, mhash: str) -> None:
    tensors = {}
    for k, per_t in enumerate(stack.levels):
        for s, f in enumerate(per_t):
            tensors[f"t{stack.timesteps[k]}.scale{s}"] = f
    nn.save_tensors(path, tensors, {
        "timesteps": list(stack.timesteps), "noise_seed": stack.noise_seed,
        "schedule_hash": stack.schedule_hash, "model_hash": mhash,
        "num_scales": len(stack.levels[0]),
    })


def load_stack(path, sched: NoiseSchedule, mhash: str) -> FeatureStack:
    tensors, meta = nn.load_tensors(path)
    if meta.get("schedule_hash") != sched.hash() or meta.get("model_hash") != mhash:
        raise DataError(f"{path}: stale feature cache (schedule or model changed)")
    ts = tuple(meta["timesteps"])
    levels = [[tensors[f"t{t}.scale{s}"] for s in range(meta["num_scales"])] for t in ts]
    return FeatureStack(levels, ts, meta["noise_seed"], meta["schedule_hash"], {"model_hash": mhash})


def cached_extract_pair(cache_dir, pair_id, model, img_a, img_b, tset, sched, noise_seed, pair_index=0):
    """``extract_pair`` with one cache file per (pair, image, tset)."""
    mhash = model_hash(model)
    key = cache_key(pair_id, tset, sched, mhash, noise_seed)
    paths = [os.path.join(cache_dir, f"{key}.{side}.ddpmcd") for side in "ab"]
    if all(os.path.exists(p) for p in paths):
        try:
            return tuple(load_stack(p, sched, mhash) for p in paths)
        except DataError:
            pass
    os.makedirs(cache_dir, exist_ok=True)
    sa, sb = extract_pair(model, img_a, img_b, tset, sched, noise_seed, pair_index)
    for p, s in zip(paths, (sa, sb)):
        save_stack(p, s, mhash)
    return sa, sb
