import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sgenet.alphabet import Alphabet
from sgenet.nn_core import ShapeError, grad_check
from sgenet.recognizer import padded_targets
from sgenet.losses import (
    LossWeights,
    TrainingAbort,
    content_loss,
    finetune_loss,
    inverse_frequency_weights,
    position_loss,
    reconstruction_loss,
    total_loss,
)


# ---------------------------------------------------------------- reconstruction


def test_reconstruction_examples():
    x = torch.rand(2, 3, 4, 5)
    assert reconstruction_loss(x, x).item() == 0.0
    assert reconstruction_loss(torch.zeros(2, 3), torch.ones(2, 3)).item() == 1.0
    with pytest.raises(ShapeError):
        reconstruction_loss(torch.zeros(2, 3), torch.zeros(3, 2))


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 3, 4, 6)), rng.random((2, 3, 4, 6))
    ref = 0.0
    for u, v in zip(a.ravel(), b.ravel()):
        ref += (u - v) ** 2
    ref /= a.size
    assert abs(reconstruction_loss(torch.from_numpy(a), torch.from_numpy(b)).item() - ref) < 1e-7


# ---------------------------------------------------------------- position


def test_position_examples():
    a = torch.softmax(torch.randn(2, 16, 32), -1)
    assert position_loss(a, a).item() == 0.0
    assert position_loss(a, a + 0.5).item() == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ShapeError):
        position_loss(a, a[:, :8])


@pytest.mark.parametrize("seed", range(5))
def test_position_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 5, 7)), rng.random((2, 5, 7))
    ref = sum(abs(u - v) for u, v in zip(a.ravel(), b.ravel())) / a.size
    assert abs(position_loss(torch.from_numpy(a), torch.from_numpy(b)).item() - ref) < 1e-7


# ---------------------------------------------------------------- content


def test_content_perfect_is_zero():
    targets = padded_targets(["ab", "c"], 4)
    probs = torch.nn.functional.one_hot(targets, 37).double()
    assert content_loss(probs, targets).item() == 0.0


def test_content_uniform_is_ln37():
    targets = padded_targets(["hello", "w0rld"], 16)
    probs = torch.full((2, 16, 37), 1 / 37, dtype=torch.float64)
    assert content_loss(probs, targets).item() == pytest.approx(math.log(37), abs=1e-12)
    assert math.log(37) == pytest.approx(3.6109, abs=1e-4)


def test_content_ignores_pad_positions():
    targets = padded_targets(["ab"], 6)
    probs = torch.full((1, 6, 37), 1 / 37, dtype=torch.float64)
    probs[0, 2:] = 0.0  # pad positions can be arbitrarily bad
    probs[0, 2:, 5] = 1.0
    assert content_loss(probs, targets).item() == pytest.approx(math.log(37), abs=1e-12)


def test_content_weight_linearity():
    torch.manual_seed(0)
    targets = padded_targets(["aab", "ba"], 5)
    probs = torch.softmax(torch.randn(2, 5, 37, dtype=torch.float64), -1)
    w = torch.ones(37, dtype=torch.float64)
    base = content_loss(probs, targets, w) * 5  # 5 non-pad positions
    a = targets == 1
    a_part = -torch.log(probs.gather(2, targets[..., None]).squeeze(-1))[a].sum()
    w2 = w.clone()
    w2[1] = 2.0
    doubled = content_loss(probs, targets, w2) * 5
    assert (doubled - base).item() == pytest.approx(a_part.item(), abs=1e-12)


def test_content_label_too_long():
    with pytest.raises(ShapeError):
        padded_targets(["abcdefghijklmnopq"], 16)
    with pytest.raises(ShapeError):
        content_loss(torch.rand(1, 16, 37), torch.zeros(1, 8, dtype=torch.long))


def test_inverse_frequency_weights():
    w = inverse_frequency_weights(["aab"])
    # a seen twice, b once: 1/2 and 1 -> mean 0.75
    assert w[1].item() == pytest.approx(0.5 / 0.75)
    assert w[2].item() == pytest.approx(1.0 / 0.75)
    assert w[0].item() == 1.0 and w[3].item() == 1.0


# ---------------------------------------------------------------- fine-tune


def test_finetune_examples():
    binary = Alphabet(("-", "a"))
    certain = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    assert finetune_loss(certain, "a", binary).item() == 0.0
    uniform = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
    assert finetune_loss(uniform, "a", binary).item() == pytest.approx(-math.log(0.75), abs=1e-12)


# ---------------------------------------------------------------- total


def test_total_arithmetic():
    rep = total_loss(0.5, 0.2, 0.3, 0.4, LossWeights(1, 1, 1, 1))
    assert rep.re.item() == pytest.approx(0.5, abs=1e-12)
    assert rep.total.item() == pytest.approx(1.4, abs=1e-12)


def test_total_degenerate_cases():
    assert total_loss(0.7, 0.2, 0.3, 0.4, LossWeights(1, 1, 0, 0)).total.item() == pytest.approx(0.7)
    assert total_loss(0, 0, 0, 0).total.item() == 0.0


def test_alpha2_ignored_when_frozen():
    rep = total_loss(0.5, 0.2, 0.3, 0.4, LossWeights(1, 1, 1, 1), finetune=False)
    assert rep.total.item() == pytest.approx(1.0)
    assert rep.ft.item() == pytest.approx(0.4)


def test_total_rejects_nan():
    with pytest.raises(TrainingAbort):
        total_loss(float("nan"), 0, 0, 0)
    with pytest.raises(TrainingAbort):
        total_loss(0, 0, 0, torch.tensor(float("inf")))


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha1=-0.1)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0, 10), min_size=4, max_size=4),
    st.lists(st.floats(0, 5), min_size=4, max_size=4),
)
def test_total_report_invariants(parts, ws):
    weights = LossWeights(*ws)
    rep = total_loss(*parts, weights)
    rc, pos, con, ft = parts
    assert rep.re.item() == pytest.approx(ws[0] * pos + ws[1] * con, abs=1e-6)
    assert rep.total.item() == pytest.approx(rc + ws[2] * rep.re.item() + ws[3] * ft, abs=1e-6)
    assert min(rep.floats().values()) >= 0
    # linear in alpha1: the slope is exactly L_re
    bumped = total_loss(*parts, LossWeights(ws[0], ws[1], ws[2] + 1.0, ws[3]))
    assert bumped.total.item() - rep.total.item() == pytest.approx(rep.re.item(), abs=1e-6)


def test_report_tsv_line():
    line = total_loss(0.5, 0.2, 0.3, 0.4, LossWeights(1, 1, 1, 1)).tsv(7)
    fields = line.split("\t")
    assert fields[0] == "7" and len(fields) == 6
    assert [float(f) for f in fields[1:]] == pytest.approx([0.5, 0.2, 0.3, 0.4, 1.4])


def test_total_gradient_wrt_sr():
    torch.manual_seed(0)
    sr = torch.rand(1, 3, 4, 6, dtype=torch.float64)
    hr = torch.rand(1, 3, 4, 6, dtype=torch.float64)
    attn_hr = torch.softmax(torch.randn(1, 4, 5, dtype=torch.float64), -1)
    proj = torch.randn(72, 20, dtype=torch.float64)
    cls = torch.randn(72, 4 * 37, dtype=torch.float64)
    targets = padded_targets(["ab"], 4)

    def fn():
        attn_sr = torch.softmax(sr.reshape(1, -1) @ proj, -1).reshape(1, 4, 5)
        probs = torch.softmax((sr.reshape(1, -1) @ cls).reshape(1, 4, 37), -1)
        return total_loss(
            reconstruction_loss(sr, hr),
            position_loss(attn_hr, attn_sr),
            content_loss(probs, targets),
            torch.tensor(0.0, dtype=torch.float64),
            LossWeights(1.0, 0.5, 0.7, 1.0),
        ).total

    assert grad_check(fn, {"sr": sr}).passed
