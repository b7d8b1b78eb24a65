import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from fmpn.exceptions import ConfigError, LoadError, ShapeError
from fmpn.networks import (
    BACKBONES,
    FMPN,
    ArchConfig,
    PriorFusion,
    TinyBackbone,
    cn_forward,
    fmg_forward,
    init_params,
    load_checkpoint,
    pfn_fuse,
    register_backbone,
    save_checkpoint,
)
from fmpn.training import classification_loss, mask_loss

import oracles
from gradcheck import fd_check

SMALL = ArchConfig(n_classes=7, input_size=64, fmg_channels=(16, 32))
MINI = ArchConfig(n_classes=3, input_size=8, fmg_channels=(4, 4), backbone_widths=(4, 4, 4))


def _rand(*shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


class TestMaskGenerator:
    def test_shape_and_range(self):
        out = fmg_forward(init_params("fmg", SMALL, 0), _rand(2, 64, 64))
        assert out.shape == (2, 64, 64)
        assert torch.all(out > 0) and torch.all(out < 1)

    def test_zero_head_gives_half(self):
        fmg = init_params("fmg", ArchConfig(fmg_channels=(8, 8), zero_init_fmg_head=True), 0)
        out = fmg_forward(fmg, _rand(3, 32, 32))
        assert torch.all(out == 0.5)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            fmg_forward(init_params("fmg", SMALL, 0), _rand(1, 30, 30))

    def test_default_widths_follow_design(self):
        fmg = init_params("fmg", ArchConfig(), 0)
        convs = [m for m in fmg.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
        assert (convs[0].in_channels, convs[0].out_channels, convs[1].out_channels) == (1, 64, 128)
        assert len(fmg.trunk) == 4
        assert (convs[-2].out_channels, convs[-1].out_channels) == (64, 1)
        assert all(c.stride == (2, 2) for c in convs[:2] + convs[-2:])

    @pytest.mark.parametrize("size", range(32, 257, 4))
    def test_spatial_size_preserved(self, size):
        fmg = init_params("fmg", ArchConfig(fmg_channels=(2, 2), fmg_blocks=1), 0).eval()
        with torch.no_grad():
            assert fmg_forward(fmg, _rand(1, size, size)).shape == (1, size, size)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 10_000))
    def test_strictly_inside_unit_interval(self, pseed, xseed):
        fmg = init_params("fmg", ArchConfig(fmg_channels=(4, 8), fmg_blocks=2), pseed)
        with torch.no_grad():
            out = fmg_forward(fmg, _rand(2, 16, 16, seed=xseed))
        assert torch.all(out > 0) and torch.all(out < 1) and torch.all(torch.isfinite(out))

    def test_overfits_single_sample(self):
        torch.manual_seed(0)
        fmg = init_params("fmg", SMALL, 0)
        gray = _rand(1, 64, 64)
        yy, xx = torch.meshgrid(torch.arange(64.0), torch.arange(64.0), indexing="ij")
        target = (torch.exp(-((xx - 40) ** 2 + (yy - 45) ** 2) / 80)
                  + 0.5 * torch.exp(-((xx - 20) ** 2 + (yy - 20) ** 2) / 50))[None]
        opt = torch.optim.Adam(fmg.parameters(), lr=3e-3)
        for _ in range(500):
            loss = mask_loss(fmg_forward(fmg, gray), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert loss.item() < 1e-3
        fmg.eval()
        with torch.no_grad():
            assert mask_loss(fmg_forward(fmg, gray), target).item() < 1e-3


class TestPriorFusion:
    def test_masked_branch_zeroed_is_identity(self):
        pfn = PriorFusion()
        with torch.no_grad():
            pfn.masked.weight.zero_()
        rgb = _rand(2, 5, 5, 3)
        out = pfn_fuse(pfn, rgb, _rand(2, 5, 5, seed=1), _rand(2, 5, 5, seed=2))
        assert torch.equal(out, rgb)

    def test_holistic_zeroed_replicates_gray(self):
        pfn = PriorFusion()
        with torch.no_grad():
            pfn.holistic.weight.zero_()
        gray = _rand(2, 5, 5, seed=1)
        out = pfn_fuse(pfn, _rand(2, 5, 5, 3), gray, torch.ones(2, 5, 5))
        for c in range(3):
            assert torch.equal(out[..., c], gray)

    def test_matches_loop(self):
        pfn = init_params("pfn", MINI, 0).double()
        g = torch.Generator().manual_seed(3)
        with torch.no_grad():
            for p in pfn.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64))
        rgb, gray, mask = (np.random.default_rng(s).random(shape) for s, shape in
                           ((0, (2, 2, 2, 3)), (1, (2, 2, 2)), (2, (2, 2, 2))))
        out = pfn_fuse(pfn, rgb, gray, mask).detach().numpy()
        expect = oracles.pfn_loop(pfn.holistic.weight[:, :, 0, 0].detach().numpy(), pfn.holistic.bias.detach().numpy(),
                                  pfn.masked.weight[:, 0, 0, 0].detach().numpy(), pfn.masked.bias.detach().numpy(),
                                  rgb, gray, mask)
        np.testing.assert_allclose(out, expect, atol=1e-6)

    def test_fresh_init_passthrough(self):
        pfn = init_params("pfn", MINI, 123)
        rgb, gray = _rand(2, 4, 4, 3), _rand(2, 4, 4, seed=1)
        out = pfn_fuse(pfn, rgb, gray, torch.ones(2, 4, 4))
        torch.testing.assert_close(out, rgb + gray[..., None].expand(-1, -1, -1, 3))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.integers(0, 1000))
    def test_linear_without_bias(self, a, seed):
        pfn = PriorFusion().double()
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            pfn.holistic.weight.copy_(torch.randn(3, 3, 1, 1, generator=g, dtype=torch.float64))
            pfn.masked.weight.copy_(torch.randn(3, 1, 1, 1, generator=g, dtype=torch.float64))
        rgb, gray, mask = _rand(1, 3, 3, 3, seed=seed, dtype=torch.float64), _rand(1, 3, 3, seed=seed + 1, dtype=torch.float64), \
            _rand(1, 3, 3, seed=seed + 2, dtype=torch.float64)
        torch.testing.assert_close(pfn_fuse(pfn, a * rgb, a * gray, mask), a * pfn_fuse(pfn, rgb, gray, mask))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pfn_fuse(PriorFusion(), _rand(1, 4, 4, 3), _rand(1, 4, 5), _rand(1, 4, 4))


class TestClassifier:
    def test_logit_shape(self):
        cn = init_params("cn", ArchConfig(n_classes=7, input_size=32), 0)
        assert cn_forward(cn, _rand(4, 32, 32, 3)).shape == (4, 7)

    def test_eval_rows_identical(self):
        cn = init_params("cn", ArchConfig(n_classes=7, input_size=32), 0).eval()
        x = _rand(1, 32, 32, 3).repeat(3, 1, 1, 1)
        with torch.no_grad():
            out = cn_forward(cn, x)
        assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])

    def test_size_mismatch(self):
        cn = init_params("cn", ArchConfig(n_classes=7, input_size=32), 0)
        with pytest.raises(ShapeError):
            cn_forward(cn, _rand(1, 36, 36, 3))

    def test_overfits_eight_samples(self):
        cn = init_params("cn", ArchConfig(n_classes=7, input_size=32), 0)
        x, y = _rand(8, 32, 32, 3), torch.tensor([0, 1, 2, 3, 4, 5, 6, 0])
        opt = torch.optim.Adam(cn.parameters(), lr=1e-2)
        for _ in range(300):
            loss = classification_loss(cn_forward(cn, x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        cn.eval()
        with torch.no_grad():
            assert torch.equal(cn_forward(cn, x).argmax(1), y)

    def test_unknown_backbone(self):
        with pytest.raises(ConfigError):
            init_params("cn", ArchConfig(backbone="nope"), 0)

    def test_plugin_backbone_runs_pipeline(self):
        @register_backbone("linear_probe")
        def _probe(arch):
            return nn.Sequential(nn.AdaptiveAvgPool2d(2), nn.Flatten(), nn.Linear(12, arch.n_classes))

        try:
            arch = ArchConfig(n_classes=4, input_size=16, fmg_channels=(4, 4), backbone="linear_probe")
            model = FMPN.build(arch, 0)
            mask, logits = model(_rand(2, 3, 16, 16))
            assert mask.shape == (2, 1, 16, 16) and logits.shape == (2, 4)
        finally:
            BACKBONES.pop("linear_probe")

    def test_resnet_plugin(self):
        pytest.importorskip("torchvision")
        model = FMPN.build(ArchConfig(n_classes=5, input_size=32, fmg_channels=(4, 4), backbone="resnet18"), 0)
        assert model(_rand(2, 3, 32, 32))[1].shape == (2, 5)

    def test_pretrained_weights(self, tmp_path):
        arch = ArchConfig(n_classes=3, input_size=16)
        donor = init_params("cn", arch, 99)
        torch.save(donor.backbone.state_dict(), tmp_path / "w.pt")
        cn = init_params("cn", ArchConfig(n_classes=3, input_size=16, pretrained_path=str(tmp_path / "w.pt")), 0)
        for a, b in zip(donor.parameters(), cn.parameters()):
            assert torch.equal(a, b)
        torch.save(TinyBackbone(5).state_dict(), tmp_path / "bad.pt")
        with pytest.raises(LoadError):
            init_params("cn", ArchConfig(n_classes=3, input_size=16, pretrained_path=str(tmp_path / "bad.pt")), 0)


class TestInit:
    def test_seeded_determinism(self):
        for kind in ("fmg", "pfn", "cn"):
            a, b = init_params(kind, SMALL, 7), init_params(kind, SMALL, 7)
            for p, q in zip(a.state_dict().values(), b.state_dict().values()):
                assert torch.equal(p, q)
        a, b = init_params("fmg", SMALL, 7), init_params("fmg", SMALL, 8)
        assert not torch.equal(a.encoder[0].weight, b.encoder[0].weight)

    def test_fan_in_variance(self):
        fmg = init_params("fmg", ArchConfig(fmg_channels=(64, 128)), 3)
        w = fmg.trunk[0].body[0].weight.detach().double()
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        sample = w.flatten()[:1000]
        target = 2.0 / fan_in
        assert abs(sample.var().item() / target - 1) < 0.2


@pytest.fixture
def mini_model():
    model = FMPN.build(MINI, 0).double().train()
    g = torch.Generator().manual_seed(1)
    x = torch.rand(4, 3, 8, 8, generator=g, dtype=torch.float64)
    return model, x, g


@pytest.mark.parametrize("part", ["fmg", "pfn", "cn"])
def test_network_output_gradients(mini_model, part):
    model, x, g = mini_model
    gray = x.mean(1, keepdim=True)
    proj = {"fmg": torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64),
            "pfn": torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64),
            "cn": torch.randn(4, 3, generator=g, dtype=torch.float64)}[part]
    mask = torch.rand(4, 1, 8, 8, generator=g, dtype=torch.float64)
    net = getattr(model, part)
    fn = {"fmg": lambda: (net(gray) * proj).sum(),
          "pfn": lambda: (net(x, gray, mask) * proj).sum(),
          "cn": lambda: (net(x) * proj).sum()}[part]
    n = min(50, sum(p.numel() for p in net.parameters()))
    assert fd_check(net, fn, n_params=n) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = FMPN.build(ArchConfig(n_classes=3, input_size=16, fmg_channels=(4, 4)), 5, "no_lG")
        path = save_checkpoint(tmp_path / "ck.npz", model, {"arch": ArchConfig(n_classes=3, input_size=16,
                                                                                fmg_channels=(4, 4)).to_dict(),
                                                            "seed": 5, "epoch": 3})
        back, header = load_checkpoint(path)
        assert header["seed"] == 5 and header["epoch"] == 3 and back.variant == "no_lG"
        for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert torch.equal(a, b), k

    def test_corrupt(self, tmp_path):
        (tmp_path / "x.npz").write_bytes(b"junk")
        with pytest.raises(LoadError):
            load_checkpoint(tmp_path / "x.npz")
