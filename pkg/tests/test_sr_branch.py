import numpy as np
import pytest
import torch

from sgenet.nn_core import ConfigError, ShapeError, grad_check
from sgenet.recognizer import FrameRecognizer
from sgenet.sr_branch import (
    GuidanceFusion,
    SequentialRecurrentBlock,
    SGENet,
    ShallowExtractor,
    SrConfig,
    Upsampler,
)

from oracles import arr, fusion_loop

TINY = SrConfig(channels=8, heads=2, frames=4, lr_size=(4, 8))


def tiny_model(finetune=False, seed=0):
    torch.manual_seed(seed)
    rec = FrameRecognizer(4, 8, frames=4, widths=(4, 4, 4), hidden=4)
    return SGENet(TINY, recognizer=rec, finetune_recognizer=finetune).double()


def test_config_validation():
    with pytest.raises(ConfigError):
        SrConfig(scale=0)
    with pytest.raises(ConfigError):
        SrConfig(n_srb=0)
    with pytest.raises(ConfigError):
        SrConfig(channels=6, reduction=4)
    assert SrConfig().hr_size == (32, 128)


# ---------------------------------------------------------------- shallow extractor


def test_shallow_shape_and_zero():
    ext = ShallowExtractor()
    assert ext(torch.rand(2, 3, 16, 64)).shape == (2, 64, 16, 64)
    with torch.no_grad():
        ext.conv.bias.zero_()
    assert torch.equal(ext(torch.zeros(1, 3, 16, 64)), torch.zeros(1, 64, 16, 64))
    with pytest.raises(ShapeError):
        ext(torch.rand(1, 1, 16, 64))


def test_shallow_gradient():
    torch.manual_seed(0)
    ext = ShallowExtractor(4).double()
    x = torch.rand(1, 3, 5, 6, dtype=torch.float64)
    w = torch.randn(1, 4, 5, 6, dtype=torch.float64)
    params = {"x": x, "w": ext.conv.weight, "a": ext.act.weight}
    assert grad_check(lambda: (ext(x) * w).sum(), params, max_coords=40).passed


# ---------------------------------------------------------------- fusion


@pytest.mark.parametrize("seed", range(50))
def test_fusion_matches_loop_oracle(seed):
    torch.manual_seed(seed)
    fusion = GuidanceFusion(8, 4).double()
    f_s = torch.randn(2, 8, 2, 3, dtype=torch.float64)
    h_g = torch.randn(2, 8, 2, 3, dtype=torch.float64)
    ref = fusion_loop(arr(f_s), arr(h_g), fusion)
    assert np.abs(arr(fusion(f_s, h_g)) - ref).max() < 1e-6


def _force_gate(fusion, value):
    with torch.no_grad():
        fusion.ca.fc2.weight.zero_()
        fusion.ca.fc2.bias.fill_(value)


def test_fusion_zero_gate_gives_f3():
    fusion = GuidanceFusion(8, 4)
    _force_gate(fusion, -1e4)  # sigmoid saturates to exactly 0
    f_s, h_g = torch.randn(1, 8, 2, 3), torch.randn(1, 8, 2, 3)
    f3 = fusion.proj3(torch.cat([f_s, h_g], 1))
    assert torch.equal(fusion(f_s, h_g), f3)


def test_fusion_unit_gate_gives_f2_plus_f3():
    fusion = GuidanceFusion(8, 4)
    _force_gate(fusion, 1e4)  # sigmoid saturates to exactly 1
    f_s, h_g = torch.randn(1, 8, 2, 3), torch.randn(1, 8, 2, 3)
    x = torch.cat([f_s, h_g], 1)
    assert torch.equal(fusion(f_s, h_g), fusion.proj3(x) + fusion.proj2(x))


def test_fusion_grid_mismatch():
    with pytest.raises(ShapeError):
        GuidanceFusion(8, 4)(torch.randn(1, 8, 2, 3), torch.randn(1, 8, 3, 2))


# ---------------------------------------------------------------- SRB


def test_srb_shape():
    srb = SequentialRecurrentBlock(64)
    x = torch.randn(2, 64, 16, 64)
    assert srb(x).shape == x.shape


def test_srb_zero_params_zero_input():
    srb = SequentialRecurrentBlock(8)
    with torch.no_grad():
        for p in srb.parameters():
            p.zero_()
    x = torch.zeros(1, 8, 4, 6)
    assert torch.equal(srb(x), x)


def test_srb_residual_identity():
    torch.manual_seed(0)
    srb = SequentialRecurrentBlock(8)
    with torch.no_grad():
        for p in srb.parameters():
            p.zero_()
    x = torch.randn(2, 8, 4, 6)
    assert torch.equal(srb(x), x)


@pytest.mark.parametrize("seed", range(3))
def test_srb_gradient(seed):
    torch.manual_seed(seed)
    srb = SequentialRecurrentBlock(8).double()
    x = torch.randn(1, 8, 4, 6, dtype=torch.float64)
    w = torch.randn(1, 8, 4, 6, dtype=torch.float64)
    params = {"x": x, **{n: p for n, p in srb.named_parameters()}}
    g = torch.Generator().manual_seed(seed)
    assert grad_check(lambda: (srb(x) * w).sum(), params, max_coords=12, generator=g).passed


# ---------------------------------------------------------------- upsampler


def test_upsampler_shape_and_range():
    torch.manual_seed(0)
    up = Upsampler(64, 2)
    out = up(torch.randn(2, 64, 16, 64) * 5)
    assert out.shape == (2, 3, 32, 128)
    assert torch.all((out > 0) & (out < 1))


def test_upsampler_gradient():
    torch.manual_seed(0)
    up = Upsampler(4, 2).double()
    f = torch.randn(1, 4, 3, 4, dtype=torch.float64)
    w = torch.randn(1, 3, 6, 8, dtype=torch.float64)
    params = {"f": f, **{n: p for n, p in up.named_parameters()}}
    assert grad_check(lambda: (up(f) * w).sum(), params, max_coords=30).passed


# ---------------------------------------------------------------- full model


def test_forward_shapes_default():
    torch.manual_seed(0)
    model = SGENet().eval()
    out = model(torch.rand(2, 3, 16, 64))
    assert out.sr.shape == (2, 3, 32, 128)
    assert out.dist.shape == (2, 16, 37)
    assert out.guidance.shape == (2, 64, 16, 64)
    with pytest.raises(ShapeError):
        model(torch.rand(1, 3, 32, 128))


def test_forward_deterministic():
    torch.manual_seed(0)
    model = SGENet().eval()
    x = torch.rand(1, 3, 16, 64)
    assert torch.equal(model(x).sr, model(x).sr)


def test_recognizer_frame_count_must_match():
    rec = FrameRecognizer(16, 64, frames=8)
    with pytest.raises(ConfigError):
        SGENet(SrConfig(), recognizer=rec)


@pytest.mark.parametrize("seed", range(100))
def test_untrained_model_is_finite(seed):
    model = tiny_model(seed=seed).float()
    g = torch.Generator().manual_seed(seed)
    out = model(torch.rand(2, 3, 4, 8, generator=g))
    assert torch.isfinite(out.sr).all() and torch.isfinite(out.guidance).all()
    assert torch.all((out.sr > 0) & (out.sr < 1))


def test_full_backward_finite_gradients():
    torch.manual_seed(0)
    model = SGENet(finetune_recognizer=True)
    out = model(torch.rand(2, 3, 16, 64))
    (out.sr.mean() + out.dist.square().mean()).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name


def test_frozen_recognizer_gets_no_gradient():
    model = tiny_model()
    out = model(torch.rand(1, 3, 4, 8, dtype=torch.float64))
    out.sr.sum().backward()
    assert all(p.grad is None for p in model.recognizer.parameters())
    assert all(p.grad is not None for p in model.sr_parameters())
    model.train()
    assert not model.recognizer.training


@pytest.mark.parametrize("seed", range(2))
def test_full_model_gradient_check_sr_parameters(seed):
    model = tiny_model(seed=seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, 4, 8, dtype=torch.float64, generator=g)
    w = torch.randn(1, 3, 8, 16, dtype=torch.float64, generator=g)
    params = dict((n, p) for n, p in model.named_parameters() if not n.startswith("recognizer."))
    rep = grad_check(lambda: (model(x).sr * w).sum(), params, max_coords=3, generator=g)
    assert rep.passed and rep.checked > 50


def test_full_model_gradient_check_wrt_input_when_finetuning():
    model = tiny_model(finetune=True, seed=5)
    g = torch.Generator().manual_seed(5)
    x = torch.rand(1, 3, 4, 8, dtype=torch.float64, generator=g)
    w = torch.randn(1, 3, 8, 16, dtype=torch.float64, generator=g)
    fn = lambda: (model(x).sr * w).sum()
    assert grad_check(fn, {"x": x}, max_coords=40, generator=g).passed
