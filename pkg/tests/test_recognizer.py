import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sgenet.alphabet import DEFAULT_ALPHABET, Alphabet
from sgenet.data import generate_corpus
from sgenet.nn_core import ShapeError
from sgenet.recognizer import (
    AlignmentError,
    build_recognizer,
    ctc_loss,
    ctc_nll,
    decode_positions,
    expected_ordinal,
    greedy_decode,
    padded_targets,
    position_accuracy,
    pretrain,
)

from oracles import ctc_bruteforce

BIN = Alphabet(("-", "a"), 0)


def one_hot_frames(ids, n=37):
    d = torch.zeros(len(ids), n)
    d[torch.arange(len(ids)), torch.tensor(ids)] = 1.0
    return d


def test_alphabet_default():
    assert len(DEFAULT_ALPHABET) == 37
    assert DEFAULT_ALPHABET.symbols[DEFAULT_ALPHABET.blank_index] == "-"
    with pytest.raises(ValueError):
        Alphabet(("-", "a", "a"))


# ---------------------------------------------------------------- CTC


def test_ctc_certain_path_is_zero():
    dist = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    assert ctc_loss(dist, "a", BIN).item() == 0.0


def test_ctc_two_uniform_frames():
    dist = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
    loss = ctc_loss(dist, "a", BIN).item()
    assert loss == pytest.approx(-math.log(0.75), abs=1e-12)
    assert loss == pytest.approx(0.2877, abs=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_ctc_five_frames_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(3), size=5)
    label = [int(v) for v in rng.integers(1, 3, size=2)]
    dp = ctc_nll(torch.log(torch.from_numpy(probs))[None], [label]).item()
    assert abs(dp - ctc_bruteforce(probs, label)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(
    t_len=st.integers(1, 5),
    n_sym=st.integers(2, 4),
    data=st.data(),
)
def test_ctc_property_vs_enumeration(t_len, n_sym, data):
    seed = data.draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_sym) * 0.7, size=t_len)
    max_u = t_len
    label = data.draw(st.lists(st.integers(1, n_sym - 1), min_size=0, max_size=max_u))
    reps = sum(a == b for a, b in zip(label, label[1:]))
    if len(label) + reps > t_len:
        with pytest.raises(AlignmentError):
            ctc_nll(torch.log(torch.from_numpy(probs))[None], [label])
        return
    dp = ctc_nll(torch.log(torch.from_numpy(probs))[None], [label]).item()
    oracle = ctc_bruteforce(probs, label)
    assert dp >= -1e-12
    assert abs(dp - oracle) < 1e-6


def test_ctc_batched_matches_individual():
    torch.manual_seed(0)
    lp = torch.log_softmax(torch.randn(3, 6, 5, dtype=torch.float64), -1)
    labels = [[1, 2], [3, 3, 4], []]
    batch = ctc_nll(lp, labels)
    for i, lab in enumerate(labels):
        assert torch.allclose(batch[i], ctc_nll(lp[i : i + 1], [lab])[0], atol=1e-12)


def test_ctc_label_too_long():
    dist = torch.full((1, 2, 37), 1 / 37)
    with pytest.raises(AlignmentError):
        ctc_loss(dist, "abc")
    with pytest.raises(AlignmentError):
        ctc_loss(dist, "aa")


def test_ctc_zero_iff_certain():
    ids = [1, 0, 2, 2]
    dist = one_hot_frames(ids)[None].double()
    assert ctc_loss(dist, "ab").item() == 0.0
    soft = dist * 0.9 + 0.1 / 37
    assert ctc_loss(soft, "ab").item() > 0


# ---------------------------------------------------------------- decoding


@pytest.mark.parametrize(
    "frames,text",
    [([1, 1, 0, 2], "ab"), ([0, 0, 0], ""), ([1, 0, 1], "aa")],
)
def test_greedy_decode(frames, text):
    assert greedy_decode(one_hot_frames(frames)) == text


def test_decode_positions_stops_at_pad():
    probs = one_hot_frames([3, 1, 0, 5])[None]
    assert decode_positions(probs) == ["ca"]


# ---------------------------------------------------------------- recognizers


def test_guidance_recognizer_shape_and_simplex():
    torch.manual_seed(0)
    m = build_recognizer("guidance")
    dist = m(torch.rand(3, 3, 16, 64))
    assert dist.shape == (3, 16, 37)
    assert torch.all(dist >= 0)
    assert torch.allclose(dist.sum(-1), torch.ones(3, 16), atol=1e-5)


def test_guidance_zero_head_is_uniform():
    m = build_recognizer("guidance")
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    dist = m(torch.rand(2, 3, 16, 64))
    assert torch.allclose(dist, torch.full_like(dist, 1 / 37), atol=1e-7)


def test_guidance_rejects_hr_geometry():
    with pytest.raises(ShapeError):
        build_recognizer("guidance")(torch.rand(1, 3, 32, 128))


def test_loss_recognizer_outputs():
    torch.manual_seed(0)
    m = build_recognizer("loss").eval()
    x = torch.rand(2, 3, 32, 128)
    p, a = m(x)
    assert p.shape == (2, 16, 37)
    assert a.shape[:2] == (2, 16)
    assert torch.allclose(a.sum(-1), torch.ones(2, 16), atol=1e-5)
    assert torch.allclose(p.sum(-1), torch.ones(2, 16), atol=1e-5)
    p2, a2 = m(x)
    assert torch.equal(p, p2) and torch.equal(a, a2)
    assert (a - a2).abs().mean().item() == 0
    assert m.middle_layer == 0 and len(m.blocks) == 2
    with pytest.raises(ShapeError):
        m(torch.rand(1, 3, 16, 64))


def test_expected_ordinal_on_certain_paths():
    # frames a a - b b c -> characters start at frames 0, 3, 5
    probs = one_hot_frames([1, 1, 0, 2, 2, 3])[None]
    assert expected_ordinal(probs)[0].tolist() == [1, 1, 1, 2, 2, 3]
    # a blank between repeats starts a new character
    assert expected_ordinal(one_hot_frames([1, 0, 1])[None])[0].tolist() == [1, 1, 2]


def test_expected_ordinal_loop_oracle():
    torch.manual_seed(0)
    p = torch.softmax(torch.randn(2, 7, 5, dtype=torch.float64), -1)
    got = expected_ordinal(p)
    for b in range(2):
        count = 0.0
        for t in range(7):
            for c in range(1, 5):
                prev = p[b, t - 1, c].item() if t > 0 else 0.0
                count += p[b, t, c].item() * (1 - prev)
            assert abs(got[b, t].item() - count) < 1e-12


def test_loss_recognizer_queries_start_as_ordinal_codes():
    from sgenet.nn_core import sinusoidal_encoding

    m = build_recognizer("loss")
    assert torch.allclose(m.queries.detach(), sinusoidal_encoding(17, 64)[1:], atol=1e-6)


def test_position_accuracy_counts_pads():
    class Fixed(torch.nn.Module):
        t_dec = 4

        def forward(self, x):
            probs = torch.nn.functional.one_hot(padded_targets(["ab"], 4), 37).float()
            probs[0, 1] = torch.nn.functional.one_hot(torch.tensor(5), 37).float()  # one wrong slot
            return probs.expand(len(x), -1, -1), None

    assert position_accuracy(Fixed(), torch.zeros(2, 1), ["ab", "ab"]) == pytest.approx(0.75)


def test_eval_recognizer_geometry():
    m = build_recognizer("eval")
    assert m(torch.rand(1, 3, 32, 128)).shape == (1, 16, 37)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["guidance", "loss", "eval"]))
def test_all_distributions_are_simplices(seed, kind):
    torch.manual_seed(seed)
    m = build_recognizer(kind).eval()
    size = (16, 64) if kind == "guidance" else (32, 128)
    x = torch.rand(2, 3, *size) * torch.rand(1).item() * 4
    out = m(x)
    dist = out[0] if kind == "loss" else out
    assert torch.all(dist >= 0)
    assert torch.allclose(dist.sum(-1), torch.ones(dist.shape[:2]), atol=1e-5)


# ---------------------------------------------------------------- pretraining


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_corpus(32, seed=123)


@pytest.mark.parametrize("kind", ["guidance", "loss"])
def test_pretrain_one_epoch_lowers_loss(kind, tiny_corpus):
    torch.manual_seed(0)
    m = build_recognizer(kind)
    rep = pretrain(m, kind, tiny_corpus, epochs=1, lr=3e-3, batch_size=8, heldout=tiny_corpus)
    assert rep.final_loss < rep.initial_loss
    assert (rep.heldout_position_accuracy is not None) == (kind == "loss")


def test_pretrain_zero_lr_leaves_parameters(tiny_corpus):
    torch.manual_seed(0)
    m = build_recognizer("guidance")
    before = {k: v.clone() for k, v in m.state_dict().items()}
    pretrain(m, "guidance", tiny_corpus, epochs=1, lr=0.0, batch_size=8)
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k]), k
