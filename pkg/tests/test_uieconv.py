import pytest
import torch
from torch import nn

from physuie import data, losses
from physuie.errors import ConfigError
from physuie.uieconv import (
    GatedConvBlock,
    ModernConvBlock,
    UIEConv,
    UieConvConfig,
    count_parameters,
    enhance,
)

TINY = UieConvConfig(base_channels=8, levels=2, mcb_per_level=1, gcb_count=2)


def test_output_shape_and_range():
    torch.manual_seed(0)
    model = UIEConv(TINY)
    x = torch.rand(2, 3, 32, 32)
    y = model(x)
    assert y.shape == x.shape
    assert bool((y > 0).all()) and bool((y < 1).all())
    assert enhance(x[0], model).shape == (3, 32, 32)


def test_default_config_accepts_256():
    model = UIEConv()
    assert model.required_divisor == 8
    with torch.no_grad():
        assert model(torch.rand(1, 3, 256, 256)).shape == (1, 3, 256, 256)


def test_default_parameter_count_frozen():
    assert count_parameters(UIEConv()) == 2_190_406


def test_indivisible_input():
    with pytest.raises(ConfigError, match="divisible by 4"):
        UIEConv(TINY)(torch.rand(1, 3, 30, 32))


def test_local_only_accepts_any_size():
    model = UIEConv(UieConvConfig(base_channels=4, enable_global=False))
    assert model(torch.rand(1, 3, 13, 7)).shape == (1, 3, 13, 7)


def test_no_branch_rejected():
    with pytest.raises(ConfigError):
        UieConvConfig(enable_global=False, enable_local=False)


class TestModernConvBlock:
    def test_identity_at_init(self):
        block = ModernConvBlock(8)
        x = torch.randn(2, 8, 16, 16)
        assert torch.equal(block(x), x)

    def test_receptive_field_is_kernel_wide(self):
        torch.manual_seed(0)
        block = ModernConvBlock(4, kernel=7).double()
        # break the identity so the residual path carries signal
        nn.init.normal_(block.pwconv2.weight)
        x = torch.randn(1, 4, 32, 32, dtype=torch.float64, requires_grad=True)
        y = block(x)
        # instance norm couples all pixels; probe the pre-norm depthwise conv instead
        probe = block.dwconv(x)[0, :, 16, 16].sum()
        (grad,) = torch.autograd.grad(probe, x)
        rows, cols = grad[0].abs().sum(0).nonzero(as_tuple=True)
        assert (rows.min().item(), rows.max().item()) == (13, 19)
        assert (cols.min().item(), cols.max().item()) == (13, 19)
        assert y.shape == x.shape


class TestGatedConvBlock:
    def test_identity_when_gate_closed(self):
        block = GatedConvBlock(6)
        with torch.no_grad():
            block.gate_conv.weight.zero_()
            block.gate_conv.bias.fill_(-1e4)
        x = torch.randn(1, 6, 12, 12)
        assert torch.equal(block(x), x)

    def test_gate_in_unit_interval(self):
        block = GatedConvBlock(6)
        g = block.gate(torch.randn(2, 6, 12, 12))
        assert bool((g >= 0).all()) and bool((g <= 1).all())


def test_layer_manifest():
    rows = UIEConv(TINY).layer_manifest()
    convs = [r for r in rows if r["op"] == "conv"]
    ups = [r for r in rows if r["op"] == "upsample"]
    assert len(convs) == 2 and len(ups) == 2
    assert all(r["kernel"] == [2, 2] and r["stride"] == [2, 2] for r in convs)
    assert all(r["mode"] == "bilinear" and r["scale_factor"] == 2 for r in ups)


def test_deterministic_forward():
    torch.manual_seed(0)
    a = UIEConv(TINY)
    torch.manual_seed(0)
    b = UIEConv(TINY)
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(a(x), b(x))


def test_directional_derivative_matches_finite_differences():
    torch.manual_seed(0)
    model = UIEConv(TINY).double()
    for p in model.parameters():
        # move off the zero-initialized projections so all paths are active
        p.data.add_(0.05 * torch.randn_like(p))
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    v = torch.randn_like(x)
    _, jvp = torch.func.jvp(model, (x,), (v,))
    h = 1e-5
    fd = (model(x + h * v) - model(x - h * v)) / (2 * h)
    rel = (jvp - fd).norm() / fd.norm()
    assert rel.item() <= 1e-2


def test_overfits_single_pair():
    torch.manual_seed(0)
    model = UIEConv()
    sample = data.generate_synthetic(data.toy_scenes(1, size=32, seed=0), seed=0)[0]
    clean, degraded = sample.clean.unsqueeze(0), sample.degraded.unsqueeze(0)
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    for _ in range(200):
        loss = losses.loss_sup(model(degraded), clean)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.02
