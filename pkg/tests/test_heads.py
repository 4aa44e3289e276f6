import math

import numpy as np
import pytest

from tspmn.encoder import ModelConfig
from tspmn.heads import (
    HEAD_PARAM_NAMES,
    ctd_loss,
    decide,
    init_head_params,
    match_probabilities,
    mmtm_loss,
    msf_loss,
    pretrain_loss,
)
from tspmn.util import DataError

from .oracles import scalar_cross_entropy_sum

CONFIG = ModelConfig(vocab_size=12, hidden=8, heads=2, ffn=16, max_len=32)
RNG = np.random.default_rng(42)


def _zero_head():
    params = init_head_params(CONFIG, 0)
    params["match_w"] = np.zeros_like(params["match_w"])
    params["match_b"] = np.zeros_like(params["match_b"])
    params["mlm_w"] = np.zeros_like(params["mlm_w"])
    params["mlm_b"] = np.zeros_like(params["mlm_b"])
    return params


def test_head_param_names_and_shapes():
    params = init_head_params(CONFIG, 1)
    assert tuple(params) == HEAD_PARAM_NAMES
    assert params["match_w"].shape == (8, 2)
    assert params["mlm_w"].shape == (8, 12)


def test_zero_head_gives_uniform_probabilities():
    states = RNG.normal(size=(10, 8))
    probs = match_probabilities(_zero_head(), states, [2, 5, 7])
    assert np.allclose(probs, 0.5)


def test_probabilities_normalize():
    params = init_head_params(CONFIG, 3)
    states = RNG.normal(size=(20, 8)) * 5
    probs = match_probabilities(params, states, list(range(0, 20, 3)))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert (probs >= 0).all() and (probs <= 1).all()


def test_analytic_softmax_value():
    # logits [ln 3, 0] must give probabilities [0.75, 0.25]
    params = _zero_head()
    params["match_b"] = np.array([math.log(3.0), 0.0])
    probs = match_probabilities(params, np.zeros((3, 8)), [0])
    assert np.allclose(probs, [[0.75, 0.25]], atol=1e-9)


def test_shift_invariance():
    params = init_head_params(CONFIG, 3)
    states = RNG.normal(size=(6, 8))
    base = match_probabilities(params, states, [0, 1, 2])
    shifted = dict(params)
    shifted["match_b"] = params["match_b"] + 17.3
    moved = match_probabilities(shifted, states, [0, 1, 2])
    assert np.allclose(base, moved, atol=1e-6)
    assert decide(base) == decide(moved)


def test_match_probabilities_validates_positions():
    params = init_head_params(CONFIG, 1)
    with pytest.raises(DataError):
        match_probabilities(params, np.zeros((4, 8)), [5])
    with pytest.raises(DataError):
        match_probabilities(params, np.zeros((4, 8)), [])


def test_decide_strictly_greater():
    assert decide(np.array([[0.6, 0.4]])) == [0]
    assert decide(np.array([[0.4, 0.6]])) == []
    assert decide(np.array([[0.5, 0.5]])) == []  # exact tie is not selected
    assert decide(np.array([[0.7, 0.3], [0.2, 0.8], [0.9, 0.1]])) == [0, 2]


def test_msf_loss_confident_correct_goes_to_zero():
    eps = 1e-12
    probs = np.array([[1.0 - eps, eps]])
    loss, _ = msf_loss(probs, [True])
    assert loss == pytest.approx(0.0, abs=1e-9)


def test_msf_loss_uniform_is_ln2():
    probs = np.array([[0.5, 0.5], [0.5, 0.5]])
    loss, grad = msf_loss(probs, [True, False])
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)
    assert grad.shape == (2, 2)


def test_msf_loss_gradient_formula():
    probs = np.array([[0.9, 0.1], [0.3, 0.7]])
    loss, grad = msf_loss(probs, [True, False])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(grad, (probs - y) / 2)


def test_msf_loss_matches_scalar_oracle_random():
    rng = np.random.default_rng(8)
    for _ in range(200):
        count = rng.integers(1, 12)
        logits = rng.normal(size=(count, 2))
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        labels = rng.random(count) < 0.5
        loss, _ = msf_loss(probs, labels.tolist())
        assert loss == pytest.approx(
            scalar_cross_entropy_sum(probs.tolist(), labels.tolist()), rel=1e-9
        )


def test_msf_loss_rejects_mismatch():
    with pytest.raises(DataError):
        msf_loss(np.array([[0.5, 0.5]]), [True, False])


def test_ctd_loss_delegates_to_matching():
    params = init_head_params(CONFIG, 5)
    states = RNG.normal(size=(16, 8))
    eots = [1, 4, 9]
    labels = [True, False, True]
    probs = match_probabilities(params, states, eots)
    want_loss, want_grad = msf_loss(probs, labels)
    got_loss, got_grad = ctd_loss(params, states, eots, labels)
    assert got_loss == want_loss
    assert np.array_equal(got_grad, want_grad)


def test_ctd_all_negative_uniform_head_is_ln2():
    states = RNG.normal(size=(12, 8))
    loss, _ = ctd_loss(_zero_head(), states, [0, 3, 6], [False, False, False])
    assert loss == pytest.approx(math.log(2.0), abs=1e-6)


def test_mmtm_zero_head_is_ln_vocab():
    states = RNG.normal(size=(10, 8))
    loss, grad = mmtm_loss(_zero_head(), states, [2, 3], [5, 7])
    assert loss == pytest.approx(math.log(CONFIG.vocab_size), abs=1e-6)
    assert grad.shape == (2, CONFIG.vocab_size)


def test_mmtm_biased_head_goes_small():
    params = _zero_head()
    params["mlm_b"] = np.zeros(CONFIG.vocab_size)
    params["mlm_b"][5] = 30.0
    states = np.zeros((4, 8))
    loss, _ = mmtm_loss(params, states, [1, 2], [5, 5])
    assert loss < 0.01


def test_mmtm_rejects_empty_or_misaligned():
    params = init_head_params(CONFIG, 1)
    states = RNG.normal(size=(6, 8))
    with pytest.raises(DataError, match="no masked"):
        mmtm_loss(params, states, [], [])
    with pytest.raises(DataError):
        mmtm_loss(params, states, [1, 2], [3])


def test_mmtm_matches_scalar_resummation():
    params = init_head_params(CONFIG, 9)
    states = RNG.normal(size=(14, 8))
    positions = [0, 5, 9, 13]
    targets = [1, 4, 4, 11]
    loss, _ = mmtm_loss(params, states, positions, targets)
    total = 0.0
    for pos, tgt in zip(positions, targets):
        logits = states[pos] @ params["mlm_w"] + params["mlm_b"]
        logp = logits - (np.log(np.sum(np.exp(logits - logits.max()))) + logits.max())
        total += -logp[tgt]
    assert loss == pytest.approx(total / len(positions), rel=1e-9)


def test_pretrain_loss_weighting():
    assert pretrain_loss(1.0, 2.0, 0.9) == pytest.approx(1.1, abs=1e-15)
    assert pretrain_loss(3.5, 99.0, 1.0) == 3.5
    assert pretrain_loss(99.0, 3.5, 0.0) == 3.5
    with pytest.raises(DataError):
        pretrain_loss(1.0, 1.0, 1.5)


def test_losses_non_negative_random():
    rng = np.random.default_rng(13)
    params = init_head_params(CONFIG, 2)
    for _ in range(50):
        states = rng.normal(size=(10, 8)) * 3
        probs = match_probabilities(params, states, [0, 4, 8])
        loss, _ = msf_loss(probs, list(rng.random(3) < 0.5))
        assert loss >= 0.0
        mloss, _ = mmtm_loss(params, states, [1, 2], list(rng.integers(0, 12, 2)))
        assert mloss >= 0.0
