"""``ddpm-cd`` command line.

Every subcommand resolves its config, makes a timestamped run directory under
the output root (``--output-root``, else ``$DDPM_CD_OUTPUT``, else the
config's ``run.output_root``), writes ``config.ini`` and ``run.log`` there,
and leaves a ``FAILED`` file behind if it stops early.

Exit codes: 0 ok, 1 usage or unexpected error, 2 bad data or config,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback

import numpy as np

from . import data, pipeline
from .config import REFERENCE_ABLATION, RunConfig, load_config
from .errors import ConfigError, DataError, DdpmCdError
from .features import cached_extract_pair, model_hash, scale_timesteps, timestep_set
from .head import evaluate_head, predict_from_diffs
from .metrics import ConfusionCounts, accumulate, format_table, report_dict, scores

log = logging.getLogger("ddpm_cd")
OUTPUT_ENV = "DDPM_CD_OUTPUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_tsets(text: str) -> list:
    """``"50;50,100"`` -> [(50,), (50, 100)]."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            out.append(tuple(int(x) for x in chunk.split(",")))
        except ValueError:
            raise ConfigError(f"cannot parse timestep set {chunk!r}") from None
    if not out:
        raise ConfigError("no timestep sets given")
    return out


# -- run directory ---------------------------------------------------------------------

class Run:
    def __init__(self, command: str, cfg: RunConfig, root: str):
        stamp = time.strftime("%Y%m%d-%H%M%S")
        base = os.path.join(root, f"{command}-{stamp}")
        path, k = base, 1
        while os.path.exists(path):
            path, k = f"{base}-{k}", k + 1
        os.makedirs(path)
        self.dir = path
        self.cfg = cfg
        with open(self.file("config.ini"), "w") as fh:
            fh.write(cfg.to_ini())
        self._handler = logging.FileHandler(self.file("run.log"))
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(self._handler)

    def file(self, *parts) -> str:
        return os.path.join(self.dir, *parts)

    def write_json(self, name: str, obj) -> str:
        with open(self.file(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
        return self.file(name)

    def fail(self, message: str) -> None:
        with open(self.file("FAILED"), "w") as fh:
            fh.write(message + "\n")

    def close(self) -> None:
        logging.getLogger().removeHandler(self._handler)
        self._handler.close()


# -- subcommands ---------------------------------------------------------------------------

def cmd_pretrain(args, cfg: RunConfig, run: Run) -> int:
    ckpt = run.file("denoiser.ddpmcd")
    log.info("pretraining %d steps, width %d, T=%d", cfg.pretrain.steps, cfg.denoiser.base_width,
             cfg.schedule.T)
    res = pipeline.pretrain(cfg, checkpoint_path=ckpt,
                            on_log=lambda s, l: log.info("step %d loss %.5f", s, l))
    np.savetxt(run.file("losses.txt"), np.asarray(res.losses), fmt="%.6f")
    w = min(cfg.pretrain.log_every, len(res.losses))
    log.info("running loss %.5f -> %.5f in %.1fs; checkpoint %s",
             float(np.mean(res.losses[:w])), float(np.mean(res.losses[-w:])), res.seconds, ckpt)
    return 0


def _load_model(args, cfg):
    model, sched, meta = pipeline.load_denoiser(args.checkpoint)
    if sched.T != cfg.schedule.T:
        log.warning("checkpoint schedule has T=%d; config says %d, using the checkpoint's",
                    sched.T, cfg.schedule.T)
        cfg.schedule.T = sched.T
    return model, sched


def cmd_sample(args, cfg, run) -> int:
    model, sched = _load_model(args, cfg)
    imgs = pipeline.generate(model, sched, args.n, args.size or cfg.pretrain.image_size, cfg.run.seed)
    for i, im in enumerate(imgs):
        data.save_image(run.file(f"sample_{i:03d}.png"), im)
    stats = {"mean": imgs.mean(axis=(0, 2, 3)).tolist(), "std": imgs.std(axis=(0, 2, 3)).tolist()}
    run.write_json("sample_stats.json", stats)
    log.info("wrote %d samples; per-channel mean %s std %s", len(imgs),
             np.round(stats["mean"], 3).tolist(), np.round(stats["std"], 3).tolist())
    return 0


def _split_samples(cfg, split):
    splits = pipeline.load_cd_splits(cfg)
    if split not in splits:
        raise ConfigError(f"unknown split {split!r}")
    return splits, splits[split]


def _pair_offset(splits, split) -> int:
    # Pair indices keep eps draws distinct across splits.
    off = 0
    for name in data.SPLITS:
        if name == split:
            return off
        off += len(splits[name])
    return off


def cmd_extract_features(args, cfg, run) -> int:
    model, sched = _load_model(args, cfg)
    splits, samples = _split_samples(cfg, args.split)
    by_id = {s.id: (i, s) for i, s in enumerate(samples)}
    if args.pair in by_id:
        idx, s = by_id[args.pair]
    else:
        try:
            idx = int(args.pair)
            s = samples[idx]
        except (ValueError, IndexError):
            raise DataError(f"no pair {args.pair!r} in split {args.split}") from None
    tset = timestep_set(_tset_arg(args, cfg), sched.T)
    cache = cfg.features.cache_dir or run.file("cache")
    sa, sb = cached_extract_pair(cache, s.id, model, data.normalize(s.img_a), data.normalize(s.img_b),
                                 tset, sched, cfg.features.noise_seed,
                                 _pair_offset(splits, args.split) + idx)
    os.makedirs(run.file("viz"), exist_ok=True)
    for side, stack in (("a", sa), ("b", sb)):
        for k, t in enumerate(tset):
            for sc, f in enumerate(stack.levels[k]):
                m = f[0].mean(axis=0)
                lo, hi = float(m.min()), float(m.max())
                img = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
                data.save_image(run.file("viz", f"{side}_t{t}_scale{sc}.png"), np.repeat(img[None], 3, 0))
    log.info("pair %s: %d timesteps x %d scales; cache %s", s.id, len(tset), len(sa.levels[0]), cache)
    return 0


def _tset_arg(args, cfg):
    if getattr(args, "timesteps", None):
        return _parse_tsets(args.timesteps)[0]
    return cfg.cd_timesteps()


def _epoch_logger(entry):
    if entry.val:
        v = entry.val
        log.info("epoch %d loss %.4f val F1 %.2f IoU %.2f OA %.2f", entry.epoch, entry.loss,
                 100 * v["f1"], 100 * v["iou"], 100 * v["oa"])
    else:
        log.info("epoch %d loss %.4f", entry.epoch, entry.loss)


def cmd_train_cd(args, cfg, run) -> int:
    model, sched = _load_model(args, cfg)
    tset = timestep_set(_tset_arg(args, cfg), sched.T)
    splits = pipeline.load_cd_splits(cfg)
    log.info("extracting features at t=%s for %d/%d/%d pairs", tset,
             *(len(splits[k]) for k in data.SPLITS))
    banks = pipeline.build_banks(cfg, model, sched, splits, tset)
    res = pipeline.train_head_on_banks(cfg, model, banks["train"], banks["val"], banks["test"], tset,
                                       on_epoch=_epoch_logger)
    pipeline.save_head(run.file("head.ddpmcd"), res.head, tset, sched, model_hash(model),
                       {"denoiser_checkpoint": os.path.abspath(args.checkpoint)})
    run.write_json("epochs.json", [e.__dict__ for e in res.log])
    run.write_json("test_metrics.json", report_dict(res.test_counts))
    print(format_table([(",".join(map(str, tset)), res.test_counts)], "timesteps"))
    return 0


def cmd_eval(args, cfg, run) -> int:
    splits, samples = _split_samples(cfg, args.split)
    if args.predictions:
        counts = ConfusionCounts()
        for s in samples:
            counts = accumulate(counts, data.load_mask(os.path.join(args.predictions, f"{s.id}.png")),
                                s.mask)
        name = "predictions"
    else:
        if not (args.head and args.checkpoint):
            raise UsageError("eval needs --head and --checkpoint, or --predictions")
        head, meta = pipeline.load_head(args.head)
        model, sched = _load_model(args, cfg)
        if meta["backbone_hash"] != model_hash(model):
            raise DataError(f"{args.head} was trained on a different denoiser than {args.checkpoint}")
        tset = tuple(meta["timesteps"])
        bank = pipeline.extract_bank(model, sched, samples, tset, cfg.features.noise_seed,
                                     _pair_offset(splits, args.split))
        pairs = bank.samples(tset)
        counts = evaluate_head(head, pairs, cfg.cd.threshold)
        if args.save_predictions:
            os.makedirs(run.file("pred"), exist_ok=True)
            for s, (diffs, _) in zip(samples, pairs):
                cm = predict_from_diffs(head, diffs, cfg.cd.threshold)[0]
                data.save_mask(run.file("pred", f"{s.id}.png"), cm.labels)
        name = ",".join(map(str, tset))
    run.write_json("metrics.json", report_dict(counts))
    table = format_table([(name, counts)], args.split)
    with open(run.file("metrics.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def cmd_ablate(args, cfg, run) -> int:
    model, sched = _load_model(args, cfg)
    if args.tsets:
        tsets = _parse_tsets(args.tsets)
    else:
        tsets = list(REFERENCE_ABLATION)
        args.reference_scale = True
    if args.reference_scale:
        tsets = [scale_timesteps(ts, sched.T) for ts in tsets]
    tsets = [timestep_set(ts, sched.T) for ts in tsets]
    union = tuple(sorted({t for ts in tsets for t in ts}))
    splits = pipeline.load_cd_splits(cfg)
    log.info("extracting features once at t=%s", union)
    banks = pipeline.build_banks(cfg, model, sched, splits, union)
    rows, report = [], []
    for ts in tsets:
        log.info("training head for t=%s", ts)
        res = pipeline.train_head_on_banks(cfg, model, banks["train"], banks["val"], banks["test"], ts)
        label = ",".join(map(str, ts))
        rows.append((label, res.test_counts))
        report.append({"timesteps": list(ts), **report_dict(res.test_counts)})
        log.info("t=%s test F1 %.2f", label, 100 * scores(res.test_counts).f1)
    table = format_table(rows, "timesteps")
    with open(run.file("ablation.txt"), "w") as fh:
        fh.write(table + "\n")
    run.write_json("ablation.json", report)
    print(table)
    return 0


def cmd_make_synthetic(args, cfg, run) -> int:
    splits = pipeline.load_cd_splits(cfg)
    out = args.out or run.file("dataset")
    data.write_manifest(out, splits)
    log.info("wrote %s", out)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "sample": cmd_sample,
    "extract-features": cmd_extract_features,
    "train-cd": cmd_train_cd,
    "eval": cmd_eval,
    "ablate-timesteps": cmd_ablate,
    "make-synthetic": cmd_make_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--profile", choices=["desk", "full"])
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--output-root", help=f"parent of run directories (default ${OUTPUT_ENV} or run.output_root)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ddpm-cd", description="Diffusion-feature change detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("pretrain", parents=[common], help="train the denoiser")

    s = sub.add_parser("sample", parents=[common], help="generate images from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-n", type=int, default=16)
    s.add_argument("--size", type=int, default=0)

    s = sub.add_parser("extract-features", parents=[common], help="cache and visualize one pair's features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pair", default="0", help="sample id or index within the split")
    s.add_argument("--split", default="test")
    s.add_argument("--timesteps", help="comma-separated timesteps (default cd.timesteps)")

    s = sub.add_parser("train-cd", parents=[common], help="train the change-detection head")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--timesteps", help="comma-separated timesteps (default cd.timesteps)")

    s = sub.add_parser("eval", parents=[common], help="score a head, or a directory of predicted masks")
    s.add_argument("--head")
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test")
    s.add_argument("--predictions", help="directory of <id>.png binary masks")
    s.add_argument("--save-predictions", action="store_true")

    s = sub.add_parser("ablate-timesteps", parents=[common], help="one head per timestep set")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tsets", help='e.g. "50;50,100" (default: the reference ablation sets)')
    s.add_argument("--reference-scale", action="store_true",
                   help="treat timesteps as chosen for a 1000-step schedule and rescale to T")

    s = sub.add_parser("make-synthetic", parents=[common], help="write the synthetic benchmark as a manifest dataset")
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ddpm-cd: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    run = None
    try:
        cfg = load_config(args.config, args.overrides, args.profile)
        root = args.output_root or os.environ.get(OUTPUT_ENV) or cfg.run.output_root
        run = Run(args.command, cfg, root)
        log.info("run directory %s", run.dir)
        code = COMMANDS[args.command](args, cfg, run)
        run.close()
        return code
    except UsageError as exc:
        code, msg = 1, f"usage: {exc}"
    except DdpmCdError as exc:
        code, msg = exc.exit_code, f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # noqa: BLE001 - report, flag the run, exit 1
        code, msg = 1, f"{type(exc).__name__}: {exc}"
        log.debug(traceback.format_exc())
    log.error(msg)
    if run is not None:
        run.fail(msg)
        run.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
