import numpy as np

from ddpm_cd import data
from ddpm_cd.diffusion import make_schedule, q_sample

sched = make_schedule("linear", T=200)

# Signal retained after t steps
for t in (1, 10, 20, 80, 130, 200):
    print(f"t={t:3d}  gamma={sched.gamma_at(t):.4f}  noise std={np.sqrt(1 - sched.gamma_at(t)):.3f}")

# Noise one synthetic scene at a few levels and save a strip
img = data.normalize(data.synth_image(seed=0, index=0, size=64))
eps = np.random.default_rng(0).standard_normal(img.shape).astype(np.float32)
tiles = [data.denormalize(np.clip(q_sample(img, t, eps, sched), -1, 1)) for t in (1, 20, 80, 200)]
strip = np.concatenate(tiles, axis=2)
data.save_image("noised_strip.png", strip)
print("wrote noised_strip.png", strip.shape)
