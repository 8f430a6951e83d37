"""A shortened desk run.  Set DEMO_STEPS=2000 for the full-length pretraining."""
import os

from ddpm_cd import pipeline
from ddpm_cd.config import load_config
from ddpm_cd.metrics import format_table

steps = int(os.environ.get("DEMO_STEPS", "300"))
cfg = load_config(overrides=[f"pretrain.steps={steps}", "data.n_train=60", "data.n_val=20",
                             "data.n_test=20", "cd.epochs=10"])

# 1. Pretrain the denoiser on unlabeled synthetic scenes
res = pipeline.pretrain(cfg, on_log=lambda s, l: print(f"step {s:5d}  loss {l:.4f}") if s % 100 == 0 else None)
print(f"pretraining took {res.seconds:.0f}s")

# 2. Extract multi-timestep feature differences once
splits = pipeline.load_cd_splits(cfg)
ts = cfg.cd_timesteps()
banks = pipeline.build_banks(cfg, res.model, res.schedule, splits, ts)

# 3. Train one head per timestep set
rows = []
for tset in [ts[:1], ts]:
    run = pipeline.train_head_on_banks(cfg, res.model, banks["train"], banks["val"], banks["test"], tset)
    rows.append((",".join(map(str, tset)), run.test_counts))
print(format_table(rows, "timesteps"))

f1, th, _ = pipeline.rgb_difference_baseline(splits["test"])
print(f"RGB-difference baseline F1 {100 * f1:.2f}")
