import numpy as np
import pytest

from ddpm_cd import nn
from ddpm_cd.errors import ContractError, DataError, DimensionError
from ddpm_cd.nn import Parameter, Tensor

from conftest import numeric_grad, rel_err


def f64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_conv_ones_gives_nine():
    out = nn.conv2d(f64(np.ones((1, 1, 3, 3))), f64(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_identity_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    assert np.array_equal(nn.conv2d(f64(x), f64(np.ones((1, 1, 1, 1)))).data, x)


def test_conv_input_gradient_matches_differences(rng):
    x, w = f64(rng.standard_normal((2, 3, 8, 8))), f64(rng.standard_normal((4, 3, 3, 3)))
    nn.conv2d(x, w, padding=1).sum().backward()
    num = numeric_grad(lambda: nn.conv2d(Tensor(x.data), Tensor(w.data), padding=1).data.sum(), x.data)
    assert rel_err(x.grad, num) <= 1e-4


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (1, 1, 0), (3, 2, 1), (3, 1, 0), (2, 2, 0)])
def test_channels_last_conv_matches_reference_path(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 8, 8))
    w, b = rng.standard_normal((5, 3, k, k)), rng.standard_normal(5)
    ref = nn.conv2d(f64(x), f64(w), f64(b), stride, pad)
    xl = f64(x.transpose(0, 2, 3, 1))
    wl, bl = f64(w), f64(b)
    out = nn.conv2d_nhwc(xl, wl, bl, stride, pad)
    assert np.allclose(out.data.transpose(0, 3, 1, 2), ref.data, atol=1e-12)
    g = rng.standard_normal(ref.shape)
    (ref * Tensor(g)).sum().backward()
    (out * Tensor(g.transpose(0, 2, 3, 1))).sum().backward()
    xr, wr, br = ref._parents
    assert np.allclose(xl.grad.transpose(0, 3, 1, 2), xr.grad, atol=1e-10)
    assert np.allclose(wl.grad, wr.grad, atol=1e-10)
    assert np.allclose(bl.grad, br.grad, atol=1e-10)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0)])
def test_channels_last_conv_gradients(rng, k, stride, pad):
    x, w, b = f64(rng.standard_normal((1, 6, 6, 2))), f64(rng.standard_normal((3, 2, k, k))), f64(rng.standard_normal(3))
    g = rng.standard_normal(nn.conv2d_nhwc(x, w, b, stride, pad).shape)
    (nn.conv2d_nhwc(x, w, b, stride, pad) * Tensor(g)).sum().backward()
    f = lambda: float((nn.conv2d_nhwc(Tensor(x.data), Tensor(w.data), Tensor(b.data), stride, pad).data * g).sum())
    for t in (x, w, b):
        assert rel_err(t.grad, numeric_grad(f, t.data)) <= 1e-4


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        nn.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        nn.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_group_norm_gradients_and_normalization(rng):
    x = f64(rng.standard_normal((2, 4, 4, 8)) * 3 + 1)
    gamma, beta = f64(rng.standard_normal(8)), f64(rng.standard_normal(8))
    g = rng.standard_normal(x.shape)
    (nn.group_norm_nhwc(x, 2, gamma, beta) * Tensor(g)).sum().backward()
    f = lambda: float((nn.group_norm_nhwc(Tensor(x.data), 2, Tensor(gamma.data), Tensor(beta.data)).data * g).sum())
    for t in (x, gamma, beta):
        assert rel_err(t.grad, numeric_grad(f, t.data)) <= 1e-4
    y = nn.group_norm_nhwc(Tensor(x.data), 2, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    grouped = y.reshape(2, 16, 2, 4).transpose(0, 2, 1, 3).reshape(2, 2, -1)
    assert np.allclose(grouped.mean(-1), 0, atol=1e-10) and np.allclose(grouped.std(-1), 1, atol=1e-3)


def test_group_norm_layouts_agree(rng):
    x = rng.standard_normal((2, 8, 4, 4))
    g, b = rng.standard_normal(8), rng.standard_normal(8)
    a = nn.group_norm(f64(x), 4, f64(g), f64(b)).data
    c = nn.group_norm_nhwc(f64(x.transpose(0, 2, 3, 1)), 4, f64(g), f64(b)).data
    assert np.allclose(a, c.transpose(0, 3, 1, 2), atol=1e-12)


def test_upsample_gradients(rng):
    x = f64(rng.standard_normal((1, 3, 3, 2)))
    g = rng.standard_normal((1, 6, 6, 2))
    (nn.upsample_nearest_nhwc(x, 2) * Tensor(g)).sum().backward()
    num = numeric_grad(lambda: float((nn.upsample_nearest_nhwc(Tensor(x.data), 2).data * g).sum()), x.data)
    assert rel_err(x.grad, num) <= 1e-4


def test_losses(rng):
    p = rng.standard_normal((2, 3))
    assert nn.mse_loss(f64(p), p).item() == 0.0
    labels = rng.integers(0, 2, (2, 4, 4))
    assert np.isclose(nn.cross_entropy(f64(np.zeros((2, 2, 4, 4))), labels).item(), np.log(2))
    margin = np.where(np.eye(2)[labels].transpose(0, 3, 1, 2) > 0, 50.0, -50.0)
    assert nn.cross_entropy(f64(margin), labels).item() < 1e-30
    with pytest.raises(DataError):
        nn.cross_entropy(f64(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 3))


def test_loss_gradients(rng):
    logits, labels = f64(rng.standard_normal((2, 2, 3, 3))), rng.integers(0, 2, (2, 3, 3))
    nn.cross_entropy(logits, labels).backward()
    num = numeric_grad(lambda: nn.cross_entropy(Tensor(logits.data), labels).item(), logits.data)
    assert rel_err(logits.grad, num) <= 1e-4
    p, t = f64(rng.standard_normal((3, 4))), rng.standard_normal((3, 4))
    nn.mse_loss(p, t).backward()
    assert rel_err(p.grad, numeric_grad(lambda: nn.mse_loss(Tensor(p.data), t).item(), p.data)) <= 1e-4


# -- optimizers and schedules ---------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = Parameter([1.0, -2.0])
    opt = nn.Adam([p], lr=0.1)
    opt.zero_grad()
    opt.step()
    assert np.array_equal(p.data, np.float32([1.0, -2.0]))


def test_adam_first_step_is_minus_lr():
    p = Parameter(np.zeros(4), dtype=np.float64)
    opt = nn.Adam([p], lr=1e-3, eps=1e-12)
    p.grad = np.ones(4)
    opt.step()
    assert np.allclose(p.data, -1e-3, rtol=1e-9)


def test_adamw_zero_grad_shrinks_multiplicatively():
    p = Parameter([2.0, -4.0], dtype=np.float64)
    opt = nn.AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(2)
    opt.step()
    assert np.allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))


def test_step_without_grad_names_parameter():
    p = Parameter([1.0])
    with pytest.raises(ContractError, match="w0"):
        nn.Adam([p], names=["w0"]).step()


def test_lr_schedules():
    assert nn.lr_warmup_then_constant(0, 100, 1e-3) == 0.0
    assert nn.lr_warmup_then_constant(100, 100, 1e-3) == 1e-3
    assert nn.lr_warmup_then_constant(50, 100, 1e-3) == 5e-4
    assert nn.lr_warmup_then_constant(5, 0, 1e-3) == 1e-3
    assert nn.lr_linear_decay(0, 120, 1e-5) == 1e-5
    assert nn.lr_linear_decay(120, 120, 1e-5) == 0.0
    assert np.isclose(nn.lr_linear_decay(30, 120, 1e-5), 7.5e-6, rtol=1e-12)


def test_clip_grad_norm():
    a, b = Parameter([0.0]), Parameter([0.0])
    a.grad, b.grad = np.float32([3.0]), np.float32([4.0])
    assert nn.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0, rel=1e-6)


# -- modules and checkpoints ---------------------------------------------------------------

class Tiny(nn.Module):
    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.conv = nn.Conv2d(3, 8, 3, rng=rng)
        self.blocks = [nn.Linear(8, 4, rng=rng), nn.Linear(4, 2, rng=rng)]


def test_named_parameters_and_state_roundtrip(tmp_path):
    m = Tiny()
    names = [n for n, _ in m.named_parameters()]
    assert names == ["conv.weight", "conv.bias", "blocks.0.weight", "blocks.0.bias", "blocks.1.weight", "blocks.1.bias"]
    path = tmp_path / "m.ckpt"
    nn.save_tensors(path, m.state_dict(), {"note": "x"})
    tensors, meta = nn.load_tensors(path)
    assert meta == {"note": "x"}
    m2 = Tiny(seed=5)
    m2.load_state_dict(tensors)
    assert m2.param_hash() == m.param_hash()
    for k, v in m.state_dict().items():
        assert tensors[k].tobytes() == v.tobytes()


def test_checkpoint_corruption_is_data_error(tmp_path):
    path = tmp_path / "c.ckpt"
    nn.save_tensors(path, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:8] == nn.MAGIC
    for bad in (b"NOTMAGIC" + raw[8:], raw[:-4], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(DataError):
            nn.load_tensors(path)


def test_load_state_dict_mismatch():
    with pytest.raises(DataError):
        Tiny().load_state_dict({"conv.weight": np.zeros((8, 3, 3, 3))})
