import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import GOLDEN, randomize_parameters
from stardiff.denoiser import (DESK_CONFIG, MINIMAL_CONFIG, DenoiserConfig, LinearAttention, backward, forward,
                               init_denoiser, load_checkpoint, save_checkpoint)
from stardiff.diffusion import training_loss
from stardiff.schedule import make_linear_schedule


def images(n, size, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, size, size, generator=g, dtype=torch.float64) * 2 - 1).to(dtype)


# ------------------------------------------------------------- parameter count

def conv(cin, cout, k):
    return cin * cout * k * k + cout


def linear(i, o):
    return i * o + o


def res(ci, co, ted):
    return 2 * ci + conv(ci, co, 3) + linear(ted, co) + 2 * co + conv(co, co, 3) + (conv(ci, co, 1) if ci != co else 0)


def attn(c):
    return 2 * c + c * 3 * c + conv(c, c, 1)


def expected_count(cfg: DenoiserConfig):
    ted, b = cfg.time_embed_dim, cfg.base_channels
    chans = [b * m for m in cfg.channel_multipliers]
    total = 2 * linear(ted, ted) + conv(6, b, 3)
    ch = b
    for level, c in enumerate(chans, 1):
        total += res(ch, c, ted) + res(c, c, ted) + conv(c, c, 3)
        total += attn(c) if level in cfg.attention_levels else 0
        ch = c
    total += 2 * res(ch, ch, ted) + (attn(ch) if "bottleneck" in cfg.attention_levels else 0)
    for level in (3, 2, 1):
        c = chans[level - 1]
        total += conv(ch, ch, 3) + res(ch + c, c, ted) + res(c, c, ted)
        total += attn(c) if level in cfg.attention_levels else 0
        ch = c
    return total + 2 * ch + conv(ch, 3, 3)


@pytest.mark.parametrize("cfg", [DESK_CONFIG, MINIMAL_CONFIG,
                                 DenoiserConfig(8, (1, 2, 2), 16, (1, 2, 3, "bottleneck"), 4),
                                 DenoiserConfig(8, (1, 1, 2), 16, (), 2)])
def test_parameter_count_matches_shape_arithmetic(cfg):
    model = init_denoiser(cfg)
    assert model.parameter_count == expected_count(cfg)


def test_desk_parameter_count_frozen():
    assert expected_count(DESK_CONFIG) == 818307


# ------------------------------------------------------------------ init/forward

def test_same_seed_bit_identical():
    a, b = init_denoiser(DESK_CONFIG, seed=3), init_denoiser(DESK_CONFIG, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = init_denoiser(DESK_CONFIG, seed=4)
    assert not torch.equal(a.in_conv.weight, c.in_conv.weight)


def test_parameters_finite_and_fan_in_scaled():
    model = init_denoiser(DESK_CONFIG)
    for name, p in model.named_parameters():
        assert torch.isfinite(p).all(), name
    w = model.in_conv.weight
    assert w.abs().max() <= 1 / np.sqrt(6 * 9)


def test_untrained_predicts_zero():
    model = init_denoiser(DESK_CONFIG)
    x = images(2, 32)
    assert torch.count_nonzero(forward(model, x, x, 7)) == 0


@pytest.mark.parametrize("size", [32, 64, 128])
def test_shape_preserved(size):
    model = randomize_parameters(init_denoiser(DESK_CONFIG), 1, 0.05)
    y, x = images(1, size, 1), images(1, size, 2)
    with torch.no_grad():
        out = forward(model, y, x, 5)
    assert out.shape == y.shape
    assert forward(model, y[0], x[0], 5).shape == y[0].shape


def test_non_square_and_chw():
    model = init_denoiser(MINIMAL_CONFIG)
    y = torch.zeros(3, 16, 24)
    assert forward(model, y, y, 1).shape == (3, 16, 24)


@pytest.mark.parametrize("shape", [(1, 3, 12, 16), (1, 3, 16, 20)])
def test_rejects_indivisible(shape):
    model = init_denoiser(MINIMAL_CONFIG)
    with pytest.raises(ValueError):
        forward(model, torch.zeros(shape), torch.zeros(shape), 1)


def test_rejects_mismatched_shapes():
    model = init_denoiser(MINIMAL_CONFIG)
    with pytest.raises(ValueError):
        forward(model, torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16), 1)
    with pytest.raises(ValueError):
        forward(model, torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 8), 1)


@pytest.mark.parametrize("kwargs", [dict(base_channels=6, groups_per_norm=4), dict(channel_multipliers=(1, 2)),
                                    dict(time_embed_dim=7), dict(attention_levels=(4,)),
                                    dict(channel_multipliers=(1, 0, 2))])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        DenoiserConfig(**kwargs)


def test_forward_deterministic():
    model = randomize_parameters(init_denoiser(MINIMAL_CONFIG), 2)
    y, x = images(2, 16, 3), images(2, 16, 4)
    with torch.no_grad():
        assert torch.equal(forward(model, y, x, 9), forward(model, y, x, 9))


def test_time_sensitivity_after_one_step():
    torch.manual_seed(0)
    model = init_denoiser(MINIMAL_CONFIG)
    sched = make_linear_schedule(50, 1e-4, 0.02)
    y0, x = images(2, 16, 5), images(2, 16, 6)
    eps = torch.randn(y0.shape, generator=torch.Generator().manual_seed(1))
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    training_loss(model, y0, x, torch.tensor([10, 40]), eps, sched).backward()
    opt.step()
    with torch.no_grad():
        a, b = forward(model, y0, x, 3), forward(model, y0, x, 30)
    assert not torch.allclose(a, b)


def test_per_item_steps_match_batched_scalar():
    model = randomize_parameters(init_denoiser(MINIMAL_CONFIG).double(), 3)
    y, x = images(2, 8, 1, torch.float64), images(2, 8, 2, torch.float64)
    with torch.no_grad():
        both = forward(model, y, x, torch.tensor([4, 11]))
        first = forward(model, y[:1], x[:1], 4)
        second = forward(model, y[1:], x[1:], 11)
    torch.testing.assert_close(both, torch.cat([first, second]), rtol=0, atol=1e-12)


def golden_setup():
    cfg = DenoiserConfig(base_channels=8, channel_multipliers=(1, 2, 2), time_embed_dim=16,
                         attention_levels=(3, "bottleneck"), groups_per_norm=4)
    model = randomize_parameters(init_denoiser(cfg, seed=11, dtype=torch.float64), 12, 0.2)
    return model, images(1, 8, 13, torch.float64), images(1, 8, 14, torch.float64)


def test_golden_forward_8x8():
    model, y, x = golden_setup()
    with torch.no_grad():
        out = forward(model, y, x, 17).numpy()
    path = GOLDEN / "forward_8x8.npy"
    if not path.exists():  # first correct build records the tensor
        path.parent.mkdir(exist_ok=True)
        np.save(path, out)
    ref = np.load(path)
    assert np.abs(ref).max() > 0.1
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-5)


# ---------------------------------------------------------------- attention

def test_attention_single_pixel_is_linear_map():
    g = torch.Generator().manual_seed(0)
    att = LinearAttention(8, 2).double()
    with torch.no_grad():
        for p in att.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64))
    x = torch.randn(5, 8, 1, 1, generator=g, dtype=torch.float64)
    wv = att.qkv.weight[16:, :, 0, 0]
    expected = x[..., 0, 0] + (att.norm(x)[..., 0, 0] @ wv.T) @ att.out.weight[..., 0, 0].T + att.out.bias
    with torch.no_grad():
        torch.testing.assert_close(att(x)[..., 0, 0], expected, rtol=0, atol=1e-12)


def test_attention_preserves_shape():
    att = LinearAttention(16, 4)
    x = torch.randn(2, 16, 6, 10)
    assert att(x).shape == x.shape


# ------------------------------------------------------------------ gradients

def gradcheck_setup(seed=0):
    model = randomize_parameters(init_denoiser(MINIMAL_CONFIG, dtype=torch.float64), seed)
    sched = make_linear_schedule(20, 1e-3, 0.2)
    g = torch.Generator().manual_seed(seed + 1)
    y0 = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    x = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    return model, lambda: training_loss(model, y0, x, 9, eps, sched)


def finite_difference_errors(model, loss_fn, h=1e-4, names=None):
    """Central differences on every scalar; returns worst relative error per parameter."""
    grads = backward(model, loss_fn())
    worst = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if names is not None and name not in names:
                continue
            flat, ana = p.view(-1), grads[name].reshape(-1)
            err = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd, a = (up - down) / (2 * h), ana[i].item()
                # floor keeps near-zero entries from dividing by rounding noise
                err = max(err, abs(fd - a) / max(abs(fd), abs(a), 1e-6))
            worst[name] = err
    return worst


def test_gradients_match_finite_differences_subset():
    model, loss_fn = gradcheck_setup()
    picks = {"in_conv.bias", "time_mlp.0.weight", "down.2.2.qkv.weight", "mid_attn.norm.weight",
             "up.0.1.skip.weight", "out_norm.bias", "out_conv.weight"}
    worst = finite_difference_errors(model, loss_fn, names=picks)
    assert set(worst) == picks
    assert max(worst.values()) < 1e-3, worst


def test_zero_loss_gives_zero_gradients():
    model = init_denoiser(MINIMAL_CONFIG, dtype=torch.float64)
    sched = make_linear_schedule(10, 1e-3, 0.2)
    y = images(1, 8, 1, torch.float64)
    loss = training_loss(model, y, y, 4, torch.zeros_like(y), sched)
    assert loss.item() == 0.0
    for name, g in backward(model, loss).items():
        assert torch.count_nonzero(g) == 0, name


def test_frozen_group_has_zero_gradient():
    model, loss_fn = gradcheck_setup(1)
    for p in model.time_mlp.parameters():
        p.requires_grad_(False)
    grads = backward(model, loss_fn())
    for name, g in grads.items():
        if name.startswith("time_mlp"):
            assert torch.count_nonzero(g) == 0
    assert torch.count_nonzero(grads["in_conv.weight"]) > 0
    assert set(grads) == {n for n, _ in model.named_parameters()}


def test_backward_without_forward_graph():
    model = init_denoiser(MINIMAL_CONFIG)
    with pytest.raises(RuntimeError):
        backward(model, torch.tensor(1.0))
    with torch.no_grad():
        loss = F.mse_loss(forward(model, torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), 1), torch.ones(1, 3, 8, 8))
    with pytest.raises(RuntimeError):
        backward(model, loss)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    model = randomize_parameters(init_denoiser(MINIMAL_CONFIG), 5)
    p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
    save_checkpoint(p1, model, extra={"phase": 2})
    loaded, extra = load_checkpoint(p1)
    assert extra == {"phase": 2}
    assert loaded.config == model.config
    for (n, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert a.dtype == b.dtype and torch.equal(a, b), n
    save_checkpoint(p2, loaded, extra={"phase": 2})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_is_little_endian_and_tagged(tmp_path):
    import json
    path = tmp_path / "c.npz"
    save_checkpoint(path, init_denoiser(MINIMAL_CONFIG))
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        assert meta["format"] == "stardiff-ckpt/1"
        assert meta["byte_order"] == "little"
        arr = z["param/in_conv.weight"]
        assert arr.dtype.byteorder in "<|=" and arr.dtype.str.startswith("<")
        assert meta["parameters"]["in_conv.weight"]["shape"] == list(arr.shape)


def test_checkpoint_rejects_foreign_format(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        load_checkpoint(path)
