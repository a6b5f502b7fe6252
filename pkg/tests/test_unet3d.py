import numpy as np
import pytest
import torch

from locseg.training import combined_loss
from locseg.unet3d import UNetConfig, forward, init_params, load_checkpoint, save_checkpoint

TINY = dict(base_channels=4, depth=1, groups_per_norm=2, patch_size=(4, 4, 4))


def test_config_divisibility():
    with pytest.raises(ValueError):
        UNetConfig(patch_size=(60, 256, 256), depth=3)
    with pytest.raises(ValueError):
        UNetConfig(base_channels=12, groups_per_norm=8)
    UNetConfig(patch_size=(64, 256, 256))


def test_forward_shape_desk():
    net = init_params(UNetConfig(base_channels=8, depth=2, patch_size=(16, 32, 32)), 0)
    out = forward(net, torch.randn(1, 1, 16, 32, 32))
    assert out.shape == (1, 2, 16, 32, 32)
    assert torch.isfinite(out).all()


@pytest.mark.slow
def test_forward_shape_full_scale():
    net = init_params(UNetConfig(base_channels=8, depth=3), 0)
    with torch.no_grad():
        out = forward(net, torch.zeros(2, 1, 64, 256, 256))
    assert out.shape == (2, 2, 64, 256, 256)


def test_forward_zero_input_finite_and_indivisible():
    net = init_params(UNetConfig(base_channels=8, depth=2, patch_size=(8, 8, 8)), 1)
    with torch.no_grad():
        assert torch.isfinite(forward(net, torch.zeros(1, 1, 8, 12, 16))).all()
    with pytest.raises(ValueError):
        forward(net, torch.zeros(1, 1, 8, 10, 16))


def test_softmax_sums_to_one():
    net = init_params(UNetConfig(base_channels=8, depth=2, patch_size=(8, 8, 8)), 2)
    with torch.no_grad():
        p = torch.softmax(forward(net, torch.randn(2, 1, 8, 8, 8)), dim=1)
    assert torch.allclose(p.sum(1), torch.ones(1), atol=1e-5)


def test_he_initialisation_statistics():
    net = init_params(UNetConfig(base_channels=32, depth=1, patch_size=(2, 2, 2)), 0)
    conv = net.down[1][0]  # 32 -> 64 channels, 27 * 32 fan-in
    w = conv.weight.detach().double()
    fan_in = 32 * 27
    assert abs(float(w.mean())) < 4 * (2 / fan_in / w.numel()) ** 0.5
    assert float(w.var()) == pytest.approx(2 / fan_in, rel=0.10)
    norm = net.down[0][1]
    assert torch.all(norm.weight == 1) and torch.all(norm.bias == 0)


def test_init_deterministic_in_seed():
    cfg = UNetConfig(**TINY)
    a, b, c = init_params(cfg, 3), init_params(cfg, 3), init_params(cfg, 4)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_parameter_gradient_finite_differences():
    torch.manual_seed(0)
    net = init_params(UNetConfig(in_channels=1, **TINY), 0, dtype=torch.float64)
    x = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
    target = (torch.rand(1, 4, 4, 4) > 0.5).long()
    combined_loss(net(x), target).backward()

    rng = np.random.default_rng(0)
    params = list(net.named_parameters())
    h = 1e-6
    for _ in range(12):
        name, p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            fp = float(combined_loss(net(x), target))
            p[idx] = orig - h
            fm = float(combined_loss(net(x), target))
            p[idx] = orig
        numeric = (fp - fm) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-6) + 1e-8, name


def test_checkpoint_round_trip(tmp_path):
    net = init_params(UNetConfig(**TINY), 7)
    save_checkpoint(tmp_path / "best.pt", net, epoch=4, best_val_dice=0.5, role="organ")
    back, state = load_checkpoint(tmp_path / "best.pt")
    assert state["epoch"] == 4 and state["best_val_dice"] == 0.5 and state["role"] == "organ"
    assert back.config == net.config
    x = torch.randn(1, 1, 4, 4, 4)
    with torch.no_grad():
        assert torch.equal(net(x), back(x))
