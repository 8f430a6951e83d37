"""End-to-end stages shared by the CLI, the demos and the acceptance tests."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import data, nn
from .config import RunConfig
from .diffusion import NoiseSchedule, make_schedule, sample, training_step_target
from .errors import ConfigError, DataError, NumericError
from .features import extract_pair, model_hash, timestep_set
from .head import CdHead, CdHeadConfig, TrainConfig, build_head, evaluate_head, train_cd
from .metrics import ConfusionCounts
from .unet import Denoiser, DenoiserConfig, build

log = logging.getLogger(__name__)


def schedule_from(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.kind, s.T, s.beta_start, s.beta_end)


def denoiser_config_from(cfg: RunConfig) -> DenoiserConfig:
    d = cfg.denoiser
    return DenoiserConfig(base_width=d.base_width, channel_mults=d.channel_mults,
                          attention_levels=d.attention_levels, num_res_blocks=d.num_res_blocks)


# -- pretraining -------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: Denoiser
    schedule: NoiseSchedule
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def load_corpus(cfg: RunConfig) -> np.ndarray:
    p = cfg.pretrain
    return np.stack([data.normalize(x) for x in
                     data.synth_pretrain_corpus(p.corpus_size, p.image_size, p.corpus_seed)])


def pretrain(cfg: RunConfig, corpus: np.ndarray | None = None, checkpoint_path=None,
             on_log=None) -> PretrainResult:
    """Train the denoiser on the noise-prediction MSE with Adam, warmup and grad clipping."""
    p = cfg.pretrain
    sched = schedule_from(cfg)
    model = build(denoiser_config_from(cfg), seed=cfg.run.seed)
    if corpus is None:
        corpus = load_corpus(cfg)
    names, params = zip(*model.named_parameters())
    opt = nn.Adam(params, lr=p.lr, names=names)
    rng = np.random.default_rng([cfg.run.seed, 7])
    losses = []
    t0 = time.time()
    for step in range(p.steps):
        idx = rng.integers(0, len(corpus), size=p.batch_size)
        xt, t, eps = training_step_target(corpus[idx], sched, rng)
        opt.zero_grad()
        loss = nn.mse_loss(model(nn.Tensor(xt), t), eps)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite loss at pretraining step {step}")
        loss.backward()
        if p.grad_clip > 0:
            nn.clip_grad_norm(params, p.grad_clip)
        opt.step(nn.lr_warmup_then_constant(step, p.warmup_steps, p.lr))
        losses.append(loss.item())
        if on_log is not None and (step % p.log_every == 0 or step == p.steps - 1):
            on_log(step, float(np.mean(losses[-p.log_every:])))
        if checkpoint_path and p.checkpoint_every and (step + 1) % p.checkpoint_every == 0:
            save_denoiser(checkpoint_path, model, sched, step + 1)
    if checkpoint_path:
        save_denoiser(checkpoint_path, model, sched, p.steps)
    return PretrainResult(model, sched, losses, time.time() - t0)


def running_mean(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


# -- checkpoints --------------------------------------------------------------------

def save_denoiser(path, model: Denoiser, sched: NoiseSchedule, step: int) -> None:
    nn.save_tensors(path, model.state_dict(), {
        "kind": "denoiser", "config": model.config.to_dict(), "schedule": sched.to_dict(),
        "step": int(step),
    })


def load_denoiser(path, expected: DenoiserConfig | None = None) -> tuple[Denoiser, NoiseSchedule, dict]:
    tensors, meta = nn.load_tensors(path)
    if meta.get("kind") != "denoiser":
        raise DataError(f"{path} is not a denoiser checkpoint")
    cfg = DenoiserConfig.from_dict(meta["config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        raise ConfigError(f"{path}: checkpoint config {cfg.to_dict()} does not match requested {expected.to_dict()}")
    model = build(cfg)
    model.load_state_dict(tensors)
    model.requires_grad_(False)
    return model, NoiseSchedule.from_dict(meta["schedule"]), meta


def save_head(path, head: CdHead, tset, sched: NoiseSchedule, backbone_hash: str, extra=None) -> None:
    meta = {"kind": "cd_head", "config": head.config.to_dict(), "timesteps": list(tset),
            "schedule": sched.to_dict(), "backbone_hash": backbone_hash}
    meta.update(extra or {})
    nn.save_tensors(path, head.state_dict(), meta)


def load_head(path) -> tuple[CdHead, dict]:
    tensors, meta = nn.load_tensors(path)
    if meta.get("kind") != "cd_head":
        raise DataError(f"{path} is not a CD-head checkpoint")
    c = meta["config"]
    head = CdHead(CdHeadConfig(tuple(c["in_channels"]), c["reduction"], c["fusion_width"], c["num_classes"]))
    head.load_state_dict(tensors)
    return head, meta


# -- sampling ---------------------------------------------------------------------------

def generate(model, sched, n: int, size: int, seed: int, batch: int = 8) -> np.ndarray:
    """``n`` samples in [0, 1], shape (n, 3, size, size)."""
    out = []
    rng = np.random.default_rng([seed, 11])
    for start in range(0, n, batch):
        k = min(batch, n - start)
        out.append(sample(model, (k, 3, size, size), sched, rng))
    return data.denormalize(np.concatenate(out))


# -- CD datasets and features ------------------------------------------------------------

def load_cd_splits(cfg: RunConfig) -> dict:
    d = cfg.data
    if d.root:
        man = data.load_manifest(d.root, patch_size=d.patch_size)
        return {s: man.load_split(s) for s in data.SPLITS}
    train = data.synth_cd_dataset(d.n_train, d.image_size, d.change_rate, d.data_seed, start=0)
    val = data.synth_cd_dataset(d.n_val, d.image_size, d.change_rate, d.data_seed, start=d.n_train)
    test = data.synth_cd_dataset(d.n_test, d.image_size, d.change_rate, d.data_seed,
                                 start=d.n_train + d.n_val)
    return {"train": train, "val": val, "test": test}


@dataclass
class DiffBank:
    """Per-sample, per-timestep feature differences; any timestep subset can be assembled."""
    timesteps: tuple
    diffs: list      # diffs[i][t] -> list of 5 arrays (1, C, h, w)
    masks: list

    def samples(self, tset) -> list:
        for t in tset:
            if t not in self.timesteps:
                raise ConfigError(f"timestep {t} was not extracted (have {self.timesteps})")
        out = []
        for per_t, m in zip(self.diffs, self.masks):
            scales = [np.concatenate([per_t[t][s] for t in tset], axis=1) for s in range(len(per_t[tset[0]]))]
            out.append((scales, m[None]))
        return out


def extract_bank(model, sched, samples, tset, noise_seed: int, index_offset: int = 0,
                 progress=None) -> DiffBank:
    tset = timestep_set(tset, sched.T)
    diffs = []
    for i, s in enumerate(samples):
        sa, sb = extract_pair(model, data.normalize(s.img_a), data.normalize(s.img_b), tset, sched,
                              noise_seed, pair_index=index_offset + i)
        per_t = {t: [np.abs(fa - fb) for fa, fb in zip(sa.levels[k], sb.levels[k])]
                 for k, t in enumerate(tset)}
        diffs.append(per_t)
        if progress is not None:
            progress(i)
    return DiffBank(tset, diffs, [s.mask for s in samples])


@dataclass
class CdRun:
    head: CdHead
    tset: tuple
    log: list
    test_counts: ConfusionCounts | None
    best_epoch: int


def train_head_on_banks(cfg: RunConfig, model, train_banks: list, val_bank, test_bank, tset,
                        on_epoch=None) -> CdRun:
    """Train one head for ``tset``; ``train_banks`` holds one bank per noise draw."""
    head = build_head(model.feature_channels, len(tset), cfg.head.reduction, cfg.head.fusion_width,
                      seed=cfg.run.seed)
    tc = TrainConfig(cfg.cd.epochs, cfg.cd.lr, cfg.cd.weight_decay, cfg.cd.batch_size, cfg.run.seed)
    views = [b.samples(tset) for b in train_banks]
    val = val_bank.samples(tset) if val_bank is not None else None
    res = train_cd(head, views, tc, frozen_model=model, val_set=val, on_epoch=on_epoch)
    counts = evaluate_head(head, test_bank.samples(tset), cfg.cd.threshold) if test_bank is not None else None
    return CdRun(head, tuple(tset), res.log, counts, res.best_epoch)


def build_banks(cfg: RunConfig, model, sched, splits: dict, timesteps, progress=None) -> dict:
    """Feature-difference banks for every split; train gets ``noise_views`` draws."""
    ns = cfg.features.noise_seed
    n_tr, n_va = len(splits["train"]), len(splits["val"])
    banks = {"train": [extract_bank(model, sched, splits["train"], timesteps, ns + v, 0, progress)
                       for v in range(cfg.features.noise_views)]}
    banks["val"] = extract_bank(model, sched, splits["val"], timesteps, ns, n_tr) if n_va else None
    banks["test"] = extract_bank(model, sched, splits["test"], timesteps, ns, n_tr + n_va)
    return banks


# -- raw-difference baseline ---------------------------------------------------------------

def rgb_difference_baseline(samples, thresholds=None) -> tuple[float, float, ConfusionCounts]:
    """Best-threshold F1 of mean |RGB_a - RGB_b| against the masks (brute-force sweep)."""
    from .metrics import accumulate, scores
    thresholds = np.linspace(0.0, 1.0, 201) if thresholds is None else thresholds
    d = np.stack([np.abs(s.img_a - s.img_b).mean(axis=0) for s in samples])
    gt = np.stack([s.mask for s in samples]).astype(bool)
    best = (-1.0, 0.0, None)
    for th in thresholds:
        c = accumulate(None, d > th, gt)
        f1 = scores(c).f1
        if f1 > best[0]:
            best = (f1, float(th), c)
    return best
