import numpy as np
import pytest

from ddpm_cd import nn
from ddpm_cd.diffusion import make_schedule, sample, training_step_target
from ddpm_cd.errors import ConfigError, DimensionError
from ddpm_cd.nn import Tensor
from ddpm_cd.unet import DenoiserConfig, build, timestep_embedding

from conftest import rel_err

TINY = DenoiserConfig(base_width=4, channel_mults=(1, 2, 2, 2, 2), attention_levels=(4,))

# Pinned parameter counts; a change here means the architecture changed.
PARAM_COUNTS = {16: 843_011, 32: 3_358_211}


@pytest.mark.parametrize("width", sorted(PARAM_COUNTS))
def test_parameter_count_is_pinned(width):
    assert build(DenoiserConfig(base_width=width)).num_parameters() == PARAM_COUNTS[width]


def test_same_seed_same_parameters():
    a, b, c = build(TINY, seed=3), build(TINY, seed=3), build(TINY, seed=4)
    assert a.param_hash() == b.param_hash() != c.param_hash()


def test_shapes_and_features(rng):
    m = build(DenoiserConfig(base_width=8))
    x = Tensor(rng.standard_normal((2, 3, 32, 32)).astype(np.float32))
    with nn.no_grad():
        eps, feats = m.forward_with_features(x, np.array([5, 9]))
        plain = m(x, np.array([5, 9]))
    assert eps.shape == x.shape
    assert np.array_equal(eps.data, plain.data)
    assert [f.shape[1:] for f in feats] == [(c, 32 >> i, 32 >> i) for i, c in enumerate(m.feature_channels)]
    assert all(np.abs(f.data).max() > 0 for f in feats)


def test_time_conditioning_is_live(rng):
    m = build(TINY)
    x = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
    with nn.no_grad():
        assert not np.allclose(m(x, [3]).data, m(x, [150]).data)


def test_bad_spatial_size():
    with pytest.raises(DimensionError, match="divisible by 16"):
        build(TINY)(Tensor(np.zeros((1, 3, 24, 16), np.float32)), [1])


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(channel_mults=(1, 2))
    with pytest.raises(ConfigError):
        timestep_embedding(3, 7)


def test_denoiser_gradients_on_sampled_parameters():
    rng = np.random.default_rng(0)
    m = build(TINY, seed=1).to(np.float64)
    x = rng.standard_normal((1, 3, 16, 16))
    w = rng.standard_normal((1, 3, 16, 16))
    t = np.array([40])

    def loss():
        return (m(Tensor(x), t) * Tensor(w)).sum()

    m.zero_grad()
    loss().backward()
    params = m.named_parameters()
    checked = 0
    for name, p in params:
        flat = p.data.reshape(-1)
        k = max(1, flat.size // 100)
        for i in rng.choice(flat.size, size=k, replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            fp = loss().item()
            flat[i] = old - 1e-5
            fm = loss().item()
            flat[i] = old
            num = (fp - fm) / 2e-5
            ana = p.grad.reshape(-1)[i]
            assert abs(num - ana) <= 1e-4 * max(1e-3, abs(num), abs(ana)), name
            checked += 1
    assert checked >= m.num_parameters() // 100


def test_embedding_values():
    e0 = timestep_embedding(0, 8)
    assert np.array_equal(e0, np.float32([0, 1, 0, 1, 0, 1, 0, 1]))
    assert np.linalg.norm(timestep_embedding(50, 64) - timestep_embedding(100, 64)) > 0


def test_embeddings_pairwise_distinct():
    e = timestep_embedding(np.arange(1, 201), 64).astype(np.float64)
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    cos = e @ e.T
    np.fill_diagonal(cos, -1)
    assert cos.max() < 1 - 1e-6


def test_trained_denoiser_samples_constant_data():
    # Train a tiny denoiser on images that are 0.7 everywhere; its samples
    # should land near 0.7.
    sched = make_schedule("linear", 50, 1e-4, 0.2)
    m = build(DenoiserConfig(base_width=8, channel_mults=(1, 1, 1, 1, 1), attention_levels=()), seed=0)
    opt = nn.Adam(m.parameters(), lr=2e-3)
    rng = np.random.default_rng(0)
    x0 = np.full((8, 3, 16, 16), 0.7 * 2 - 1, np.float32)
    for step in range(300):
        xt, t, eps = training_step_target(x0, sched, rng)
        opt.zero_grad()
        nn.mse_loss(m(Tensor(xt), t), eps).backward()
        opt.step()
    out = (sample(m, (4, 3, 16, 16), sched, np.random.default_rng(1)) + 1) / 2
    assert abs(out.mean() - 0.7) < 0.05
